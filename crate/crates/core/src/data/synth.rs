//! Synthetic treebank sampled from a fixed toy grammar:
//!
//! ```text
//! S  -> NP VP
//! NP -> Det N | Det Adj N
//! VP -> V NP  | V PP
//! PP -> P NP
//! ```
//!
//! Dependencies are head-percolated: N heads NP, P heads PP, V heads VP and S.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::treebank::{
    write_conllx, ConllSentence, ConllToken, ConstituencyTree, DependencyGraph, GoldDistanceMode, GoldSyntax, TreeNode,
};

pub const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some"];
pub const ADJECTIVES: &[&str] = &[
    "big", "small", "red", "old", "young", "happy", "sad", "quick", "slow", "green", "tall", "short",
    "bright", "dark", "quiet", "loud", "gentle", "angry", "clever", "lazy", "brave", "shy", "warm", "cold",
];
pub const NOUNS: &[&str] = &[
    "dog", "cat", "bird", "man", "woman", "child", "teacher", "farmer", "king", "queen", "horse", "fox",
    "mouse", "house", "tree", "river", "garden", "table", "chair", "book", "letter", "car", "boat", "city",
    "village", "forest", "mountain", "road", "bridge", "window", "door", "apple", "song", "story", "ball",
    "box", "lamp", "cup", "hat", "coat", "friend", "doctor", "baker", "sailor", "painter", "student",
    "wolf", "bear", "rabbit", "owl", "field", "hill", "lake", "school", "market", "kitchen", "garage",
    "station", "tower", "castle",
];
pub const VERBS: &[&str] = &[
    "saw", "liked", "found", "chased", "watched", "helped", "carried", "painted", "heard", "followed",
    "visited", "built", "opened", "pushed", "pulled", "met", "loved", "feared", "held", "lost", "sat",
    "ran", "walked", "slept", "stood", "waited", "jumped", "lived", "worked", "played",
];
pub const PREPOSITIONS: &[&str] = &["on", "in", "near", "under", "behind", "with", "by", "over", "beside", "past"];

/// One generated sentence with its aligned annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSentence {
    pub tokens: Vec<String>,
    pub tree: ConstituencyTree,
    pub dependency: ConllSentence,
    /// Whether the verb phrase expanded to `V PP`.
    pub vp_has_pp: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub sentences: Vec<SynthSentence>,
}

struct Builder {
    tokens: Vec<ConllToken>,
    heads: Vec<usize>,
}

impl Builder {
    fn word(&mut self, form: &str, pos: &str) -> usize {
        self.tokens.push(ConllToken {
            form: form.to_string(),
            cpos: pos.to_string(),
            pos: pos.to_string(),
            deprel: String::new(),
        });
        self.heads.push(0);
        self.tokens.len()
    }

    fn attach(&mut self, dependent: usize, head: usize, rel: &str) {
        self.heads[dependent - 1] = head;
        self.tokens[dependent - 1].deprel = rel.to_string();
    }
}

fn leaf(w: &str) -> TreeNode {
    TreeNode::Leaf(w.to_string())
}

fn node(label: &str, children: Vec<TreeNode>) -> TreeNode {
    TreeNode::Internal {
        label: label.to_string(),
        children,
    }
}

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

/// Returns the NP subtree and the index of its head noun.
fn gen_np<R: Rng>(rng: &mut R, b: &mut Builder) -> (TreeNode, usize) {
    let det = pick(rng, DETERMINERS);
    let det_i = b.word(det, "DT");
    let mut children = vec![leaf(det)];
    let adj_i = if rng.gen_bool(0.4) {
        let adj = pick(rng, ADJECTIVES);
        children.push(leaf(adj));
        Some(b.word(adj, "JJ"))
    } else {
        None
    };
    let noun = pick(rng, NOUNS);
    children.push(leaf(noun));
    let n_i = b.word(noun, "NN");
    b.attach(det_i, n_i, "det");
    if let Some(a) = adj_i {
        b.attach(a, n_i, "amod");
    }
    (node("NP", children), n_i)
}

fn gen_sentence<R: Rng>(rng: &mut R) -> Result<SynthSentence> {
    let mut b = Builder {
        tokens: Vec::new(),
        heads: Vec::new(),
    };
    let (subj, subj_head) = gen_np(rng, &mut b);
    let verb = pick(rng, VERBS);
    let v_i = b.word(verb, "VB");
    b.attach(subj_head, v_i, "nsubj");
    b.tokens[v_i - 1].deprel = "root".into();
    let vp_has_pp = rng.gen_bool(0.5);
    let complement = if vp_has_pp {
        let prep = pick(rng, PREPOSITIONS);
        let p_i = b.word(prep, "IN");
        let (obj, obj_head) = gen_np(rng, &mut b);
        b.attach(obj_head, p_i, "pobj");
        b.attach(p_i, v_i, "prep");
        node("PP", vec![leaf(prep), obj])
    } else {
        let (obj, obj_head) = gen_np(rng, &mut b);
        b.attach(obj_head, v_i, "obj");
        obj
    };
    let tree = ConstituencyTree::new(node("S", vec![subj, node("VP", vec![leaf(verb), complement])]))?;
    let dependency = ConllSentence {
        graph: DependencyGraph::new(b.heads)?,
        tokens: b.tokens,
    };
    Ok(SynthSentence {
        tokens: dependency.forms(),
        tree,
        dependency,
        vp_has_pp,
    })
}

/// Samples `n` sentences; the same seed always yields the same corpus.
pub fn synth_corpus(seed: u64, n: usize) -> Result<SynthCorpus> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus needs at least one sentence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n).map(|_| gen_sentence(&mut rng)).collect::<Result<_>>()?;
    Ok(SynthCorpus { sentences })
}

/// Paths written by [`SynthCorpus::write`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub sentences: PathBuf,
    pub trees: PathBuf,
    pub deps: PathBuf,
    pub labels: Option<PathBuf>,
}

impl SynthCorpus {
    pub fn token_lists(&self) -> Vec<Vec<String>> {
        self.sentences.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn sentences_text(&self) -> String {
        self.sentences.iter().map(|s| s.tokens.join(" ") + "\n").collect()
    }

    pub fn trees_text(&self) -> String {
        self.sentences.iter().map(|s| s.tree.to_string() + "\n").collect()
    }

    pub fn conllx_text(&self) -> String {
        self.sentences.iter().map(|s| write_conllx(&s.dependency)).collect()
    }

    /// Gold annotation of every sentence with distances read off in `mode`.
    pub fn gold(&self, mode: GoldDistanceMode) -> Result<Vec<GoldSyntax>> {
        self.sentences
            .iter()
            .map(|s| GoldSyntax::new(s.tree.clone(), Some(s.dependency.graph.clone()), mode))
            .collect()
    }

    /// `(label, tokens)` pairs of the verb-phrase PP task.
    pub fn labeled(&self) -> Vec<(String, Vec<String>)> {
        self.sentences
            .iter()
            .map(|s| (if s.vp_has_pp { "pp" } else { "nopp" }.to_string(), s.tokens.clone()))
            .collect()
    }

    /// `label<TAB>sentence` lines; the label is `pp` when the verb phrase
    /// holds a prepositional phrase and `nopp` otherwise.
    pub fn labeled_text(&self) -> String {
        let mut s = String::new();
        for sent in &self.sentences {
            let label = if sent.vp_has_pp { "pp" } else { "nopp" };
            let _ = writeln!(s, "{label}\t{}", sent.tokens.join(" "));
        }
        s
    }

    /// Writes `<stem>.txt`, `<stem>.trees` and `<stem>.conllx` into `dir`,
    /// plus `<stem>.labels.tsv` when `with_labels` is set.
    pub fn write(&self, dir: &Path, stem: &str, with_labels: bool) -> Result<SynthFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |ext: &str, body: String| -> Result<PathBuf> {
            let p = dir.join(format!("{stem}.{ext}"));
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        };
        Ok(SynthFiles {
            sentences: write("txt", self.sentences_text())?,
            trees: write("trees", self.trees_text())?,
            deps: write("conllx", self.conllx_text())?,
            labels: if with_labels {
                Some(write("labels.tsv", self.labeled_text())?)
            } else {
                None
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::parse_ptb_bracketed;

    #[test]
    fn deterministic_by_seed() {
        let a = synth_corpus(7, 50).unwrap();
        let b = synth_corpus(7, 50).unwrap();
        assert_eq!(a.sentences_text(), b.sentences_text());
        assert_eq!(a.conllx_text(), b.conllx_text());
        assert_ne!(a.sentences_text(), synth_corpus(8, 50).unwrap().sentences_text());
    }

    #[test]
    fn trees_reparse_and_align() {
        let c = synth_corpus(1, 200).unwrap();
        for s in &c.sentences {
            let t = parse_ptb_bracketed(&s.tree.to_string()).unwrap();
            assert_eq!(t, s.tree);
            assert_eq!(t.tokens(), s.tokens);
            assert_eq!(s.dependency.graph.len(), s.tokens.len());
        }
    }

    #[test]
    fn closed_vocabulary_is_small_and_disjoint() {
        let mut all: Vec<&str> = [DETERMINERS, ADJECTIVES, NOUNS, VERBS, PREPOSITIONS].concat();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n, "word lists overlap");
        assert!(n <= 500);
    }
}
