use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Head index per token (1-based heads, 0 = root).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyGraph {
    heads: Vec<usize>,
}

impl DependencyGraph {
    /// Validates a head array: heads in range, exactly one root, no cycles.
    pub fn new(heads: Vec<usize>) -> Result<Self> {
        let n = heads.len();
        if n == 0 {
            return Err(Error::Validity("empty sentence".into()));
        }
        if let Some((i, &h)) = heads.iter().enumerate().find(|(_, &h)| h > n) {
            return Err(Error::Validity(format!("token {} has head {h} beyond sentence length {n}", i + 1)));
        }
        let roots = heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::Validity(format!("expected exactly one root, found {roots}")));
        }
        let g = DependencyGraph { heads };
        for tok in 1..=n {
            g.depth_checked(tok)?;
        }
        Ok(g)
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// 1-based index of the root token.
    pub fn root(&self) -> usize {
        self.heads.iter().position(|&h| h == 0).expect("validated single root") + 1
    }

    /// Head of 1-based token `tok` (0 for the root).
    pub fn head(&self, tok: usize) -> usize {
        self.heads[tok - 1]
    }

    fn depth_checked(&self, tok: usize) -> Result<usize> {
        let mut cur = tok;
        let mut steps = 0;
        while self.heads[cur - 1] != 0 {
            cur = self.heads[cur - 1];
            steps += 1;
            if steps > self.heads.len() {
                return Err(Error::Validity(format!("head cycle through token {tok}")));
            }
        }
        Ok(steps)
    }

    /// Number of head edges from each token up to the root.
    pub fn depths(&self) -> Vec<usize> {
        (1..=self.len())
            .map(|t| self.depth_checked(t).expect("validated acyclic"))
            .collect()
    }

    /// True when one of the two 1-based tokens heads the other.
    pub fn related(&self, i: usize, j: usize) -> bool {
        self.head(j) == i || self.head(i) == j
    }
}

/// One CoNLL-X row beyond what the head array carries.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ConllToken {
    pub form: String,
    pub cpos: String,
    pub pos: String,
    pub deprel: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConllSentence {
    pub tokens: Vec<ConllToken>,
    pub graph: DependencyGraph,
}

impl ConllSentence {
    pub fn forms(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.form.clone()).collect()
    }
}

/// Parses one sentence block of tab-separated 10-column CoNLL-X rows.
pub fn parse_conllx(block: &str) -> Result<ConllSentence> {
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    for (lineno, line) in block.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Data(format!(
                "line {}: expected 10 tab-separated columns, found {}",
                lineno + 1,
                cols.len()
            )));
        }
        let id: usize = cols[0]
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad token id `{}`", lineno + 1, cols[0])))?;
        if id != tokens.len() + 1 {
            return Err(Error::Data(format!("line {}: token id {id} out of sequence", lineno + 1)));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad head `{}`", lineno + 1, cols[6])))?;
        heads.push(head);
        tokens.push(ConllToken {
            form: cols[1].to_string(),
            cpos: cols[3].to_string(),
            pos: cols[4].to_string(),
            deprel: cols[7].to_string(),
        });
    }
    if tokens.is_empty() {
        return Err(Error::Data("empty CoNLL-X sentence block".into()));
    }
    Ok(ConllSentence {
        tokens,
        graph: DependencyGraph::new(heads)?,
    })
}

/// Parses a whole file: sentence blocks separated by blank lines.
pub fn parse_conllx_document(text: &str) -> Result<Vec<ConllSentence>> {
    let mut out = Vec::new();
    let mut block = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !block.is_empty() {
                out.push(parse_conllx(&block)?);
                block.clear();
            }
        } else {
            block.push_str(line);
            block.push('\n');
        }
    }
    if !block.is_empty() {
        out.push(parse_conllx(&block)?);
    }
    Ok(out)
}

/// Serializes a sentence as a CoNLL-X block terminated by a blank line.
pub fn write_conllx(sentence: &ConllSentence) -> String {
    let mut s = String::new();
    for (i, tok) in sentence.tokens.iter().enumerate() {
        let field = |v: &str| if v.is_empty() { "_".to_string() } else { v.to_string() };
        let _ = writeln!(
            s,
            "{}\t{}\t_\t{}\t{}\t_\t{}\t{}\t_\t_",
            i + 1,
            tok.form,
            field(&tok.cpos),
            field(&tok.pos),
            sentence.graph.heads()[i],
            field(&tok.deprel),
        );
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(heads: &[usize]) -> String {
        heads
            .iter()
            .enumerate()
            .map(|(i, h)| format!("{}\tw{}\t_\tX\tX\t_\t{}\tdep\t_\t_\n", i + 1, i + 1, h))
            .collect()
    }

    #[test]
    fn reads_heads_and_root() {
        let s = parse_conllx(&block(&[2, 0, 2])).unwrap();
        assert_eq!(s.graph.root(), 2);
        assert_eq!(s.graph.depths(), vec![1, 0, 1]);
        assert!(s.graph.related(1, 2) && s.graph.related(2, 1));
        assert!(!s.graph.related(1, 3));
    }

    #[test]
    fn rejects_empty_cycle_and_multiroot() {
        assert!(matches!(parse_conllx(""), Err(Error::Data(_))));
        assert!(matches!(parse_conllx(&block(&[2, 3, 1])), Err(Error::Validity(_))));
        assert!(matches!(parse_conllx(&block(&[0, 0, 2])), Err(Error::Validity(_))));
        // root present, but 2 and 3 point at each other
        assert!(matches!(DependencyGraph::new(vec![0, 3, 2]), Err(Error::Validity(_))));
    }

    #[test]
    fn document_roundtrip() {
        let text = format!("{}\n{}\n", block(&[2, 0, 2]), block(&[0]));
        let doc = parse_conllx_document(&text).unwrap();
        assert_eq!(doc.len(), 2);
        let again: String = doc.iter().map(write_conllx).collect();
        assert_eq!(parse_conllx_document(&again).unwrap(), doc);
    }
}
