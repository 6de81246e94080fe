use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];

/// Lowercased whitespace tokenization.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

/// Token inventory with reserved ids `PAD=0`, `UNK=1`, `MASK=2`.
///
/// Regular entries are ordered by descending frequency, ties broken
/// lexicographically, so the same corpus always yields the same ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    min_freq: usize,
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens, r.min_freq)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            min_freq: v.min_freq,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Builds a vocabulary from tokenized sentences; tokens seen fewer than
    /// `min_freq` times map to UNK.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in sentences.iter().flatten() {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !RESERVED.contains(&t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Vocab::from_tokens(tokens, min_freq))
    }

    /// Rebuilds from a full id-ordered token list (reserved entries first).
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn min_freq_two_keeps_only_frequent() {
        let v = Vocab::build(&corpus(&["a a b"]), 2).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[MASK]", "a"]);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("a"), 3);
    }

    #[test]
    fn infinite_cutoff_leaves_reserved_only() {
        let v = Vocab::build(&corpus(&["x y z", "x"]), usize::MAX).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn deterministic_ordering() {
        let c = corpus(&["b c a", "c b", "c"]);
        let v1 = Vocab::build(&c, 1).unwrap();
        let v2 = Vocab::build(&c, 1).unwrap();
        assert_eq!(v1, v2);
        // c:3, b:2, a:1
        assert_eq!(&v1.tokens()[3..], &["c", "b", "a"]);
        let tied = Vocab::build(&corpus(&["z y x"]), 1).unwrap();
        assert_eq!(&tied.tokens()[3..], &["x", "y", "z"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(Vocab::build(&empty, 1), Err(Error::Data(_))));
    }

    #[test]
    fn lowercases_and_roundtrips() {
        let c = corpus(&["The Dog barks"]);
        let v = Vocab::build(&c, 1).unwrap();
        let ids = v.encode(&c[0]);
        assert_eq!(v.decode(&ids), vec!["the", "dog", "barks"]);
        assert_eq!(v.id("unseen"), UNK);
    }
}
