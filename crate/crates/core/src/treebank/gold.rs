use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::conllx::DependencyGraph;
use super::tree::ConstituencyTree;
use crate::error::{Error, Result};
use crate::span::Span;

/// How gold distances are read off annotated trees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoldDistanceMode {
    /// Edges from the token up to the dependency root.
    #[default]
    DepDepth,
    /// Tree height minus the leaf's depth: shallower leaves get larger values.
    ConstHeight,
}

impl FromStr for GoldDistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dep-depth" => Ok(GoldDistanceMode::DepDepth),
            "const-height" => Ok(GoldDistanceMode::ConstHeight),
            other => Err(Error::Config(format!(
                "unknown gold distance mode `{other}` (expected dep-depth or const-height)"
            ))),
        }
    }
}

impl fmt::Display for GoldDistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoldDistanceMode::DepDepth => "dep-depth",
            GoldDistanceMode::ConstHeight => "const-height",
        })
    }
}

/// Gold annotation for one sentence plus the quantities derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldSyntax {
    pub tokens: Vec<String>,
    pub constituency: ConstituencyTree,
    pub dependency: Option<DependencyGraph>,
    /// Lowest-constituent partition of the sentence.
    pub spans: Vec<Span>,
    pub distances: Vec<f64>,
    pub mode: GoldDistanceMode,
}

impl GoldSyntax {
    pub fn new(
        constituency: ConstituencyTree,
        dependency: Option<DependencyGraph>,
        mode: GoldDistanceMode,
    ) -> Result<Self> {
        let tokens = constituency.tokens();
        if let Some(dep) = &dependency {
            if dep.len() != tokens.len() {
                return Err(Error::Alignment(format!(
                    "constituency tree has {} tokens, dependency graph {}",
                    tokens.len(),
                    dep.len()
                )));
            }
        }
        let distances = distances_from(&constituency, dependency.as_ref(), mode)?;
        let spans = gold_spans(&constituency);
        Ok(GoldSyntax {
            tokens,
            constituency,
            dependency,
            spans,
            distances,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Gold distances of a sentence under `mode`.
pub fn gold_distances(gold: &GoldSyntax, mode: GoldDistanceMode) -> Result<Vec<f64>> {
    distances_from(&gold.constituency, gold.dependency.as_ref(), mode)
}

fn distances_from(
    tree: &ConstituencyTree,
    dep: Option<&DependencyGraph>,
    mode: GoldDistanceMode,
) -> Result<Vec<f64>> {
    match mode {
        GoldDistanceMode::DepDepth => {
            let dep = dep.ok_or_else(|| {
                Error::Data("dep-depth distances need a dependency annotation".into())
            })?;
            Ok(dep.depths().into_iter().map(|d| d as f64).collect())
        }
        GoldDistanceMode::ConstHeight => {
            let depths = tree.leaf_depths();
            let height = depths.iter().copied().max().unwrap_or(0);
            Ok(depths.into_iter().map(|d| (height - d) as f64).collect())
        }
    }
}

/// Partition of the sentence by each token's lowest enclosing constituent:
/// maximal runs of adjacent tokens that share their parent node.
pub fn gold_spans(tree: &ConstituencyTree) -> Vec<Span> {
    gold_spans_labeled(tree).into_iter().map(|(s, _)| s).collect()
}

pub fn gold_spans_labeled(tree: &ConstituencyTree) -> Vec<(Span, String)> {
    let parents = tree.leaf_parents();
    let labels: Vec<String> = tree.labeled_spans().into_iter().map(|l| l.label).collect();
    let mut out: Vec<(Span, String)> = Vec::new();
    let mut start = 0;
    for i in 1..=parents.len() {
        if i == parents.len() || parents[i] != parents[start] {
            out.push((Span::new(start + 1, i), labels[parents[start]].clone()));
            start = i;
        }
    }
    out
}

/// Constituent categories reported in phrase-type breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhraseType {
    NP,
    VP,
    PP,
    ADJP,
    ADVP,
    Other,
}

impl PhraseType {
    pub const ALL: [PhraseType; 6] = [
        PhraseType::NP,
        PhraseType::VP,
        PhraseType::PP,
        PhraseType::ADJP,
        PhraseType::ADVP,
        PhraseType::Other,
    ];

    /// Buckets a treebank label, ignoring function tags such as `NP-SBJ`.
    pub fn from_label(label: &str) -> Self {
        let base = label.split(['-', '=']).next().unwrap_or("");
        match base {
            "NP" => PhraseType::NP,
            "VP" => PhraseType::VP,
            "PP" => PhraseType::PP,
            "ADJP" => PhraseType::ADJP,
            "ADVP" => PhraseType::ADVP,
            _ => PhraseType::Other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhraseType::NP => "NP",
            PhraseType::VP => "VP",
            PhraseType::PP => "PP",
            PhraseType::ADJP => "ADJP",
            PhraseType::ADVP => "ADVP",
            PhraseType::Other => "Other",
        }
    }
}

/// Binary tree recovered from a distance vector; leaves are 1-based positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BinaryTree {
    Leaf(usize),
    Node {
        span: Span,
        left: Box<BinaryTree>,
        right: Box<BinaryTree>,
    },
}

impl BinaryTree {
    pub fn span(&self) -> Span {
        match self {
            BinaryTree::Leaf(i) => Span::singleton(*i),
            BinaryTree::Node { span, .. } => *span,
        }
    }

    /// Spans of all internal nodes, preorder.
    pub fn internal_spans(&self) -> Vec<Span> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            if let BinaryTree::Node { span, left, right } = t {
                out.push(*span);
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }
}

/// Top-down split at the largest distance (leftmost on ties). When the
/// maximum opens the range it becomes the left leaf of the node.
pub fn distance_to_tree<T: PartialOrd + Copy>(d: &[T]) -> Result<(BinaryTree, Vec<Span>)> {
    if d.is_empty() {
        return Err(Error::Contract("distance_to_tree needs at least one token".into()));
    }
    fn build<T: PartialOrd + Copy>(d: &[T], lo: usize, hi: usize) -> BinaryTree {
        if lo == hi {
            return BinaryTree::Leaf(lo + 1);
        }
        let mut k = lo;
        for i in lo + 1..=hi {
            if d[i] > d[k] {
                k = i;
            }
        }
        let (left, right) = if k == lo {
            (BinaryTree::Leaf(lo + 1), build(d, lo + 1, hi))
        } else {
            (build(d, lo, k - 1), build(d, k, hi))
        };
        BinaryTree::Node {
            span: Span::new(lo + 1, hi + 1),
            left: Box::new(left),
            right: Box::new(right),
        }
    }
    let tree = build(d, 0, d.len() - 1);
    let spans = tree.internal_spans();
    Ok((tree, spans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::is_partition;
    use crate::treebank::tree::parse_ptb_bracketed;

    #[test]
    fn dep_depth_distances() {
        let tree = parse_ptb_bracketed("(S (NP a b) c)").unwrap();
        let dep = DependencyGraph::new(vec![2, 0, 2]).unwrap();
        let g = GoldSyntax::new(tree, Some(dep), GoldDistanceMode::DepDepth).unwrap();
        assert_eq!(g.distances, vec![1.0, 0.0, 1.0]);
        let root = g.dependency.as_ref().unwrap().root();
        assert_eq!(g.distances[root - 1], 0.0);
    }

    #[test]
    fn const_height_distances() {
        let tree = parse_ptb_bracketed("(S (NP the dog) (VP barks))").unwrap();
        let g = GoldSyntax::new(tree, None, GoldDistanceMode::ConstHeight).unwrap();
        assert_eq!(g.distances, vec![0.0, 0.0, 0.0]);
        let deeper = parse_ptb_bracketed("(S (NP the dog) (VP saw (NP a cat)))").unwrap();
        assert_eq!(
            distances_from(&deeper, None, GoldDistanceMode::ConstHeight).unwrap(),
            vec![1.0, 1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn missing_annotation_and_misalignment() {
        let tree = parse_ptb_bracketed("(S a b)").unwrap();
        assert!(matches!(
            GoldSyntax::new(tree.clone(), None, GoldDistanceMode::DepDepth),
            Err(Error::Data(_))
        ));
        let dep = DependencyGraph::new(vec![0]).unwrap();
        assert!(matches!(
            GoldSyntax::new(tree, Some(dep), GoldDistanceMode::DepDepth),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn lowest_constituent_spans() {
        let t = parse_ptb_bracketed("(S (NP the dog) (VP barks))").unwrap();
        assert_eq!(
            gold_spans_labeled(&t),
            vec![(Span::new(1, 2), "NP".to_string()), (Span::new(3, 3), "VP".to_string())]
        );
        let flat = parse_ptb_bracketed("(S a b c)").unwrap();
        assert_eq!(gold_spans(&flat), vec![Span::new(1, 3)]);
        let split = parse_ptb_bracketed("(S (VP saw (NP a cat) today))").unwrap();
        let spans = gold_spans(&split);
        assert_eq!(spans, vec![Span::new(1, 1), Span::new(2, 3), Span::new(4, 4)]);
        assert!(is_partition(&spans, 4));
    }

    #[test]
    fn phrase_type_buckets() {
        assert_eq!(PhraseType::from_label("NP-SBJ"), PhraseType::NP);
        assert_eq!(PhraseType::from_label("ADVP"), PhraseType::ADVP);
        assert_eq!(PhraseType::from_label("SBAR"), PhraseType::Other);
    }

    #[test]
    fn tree_from_distances() {
        let (t, spans) = distance_to_tree(&[5.0]).unwrap();
        assert_eq!(t, BinaryTree::Leaf(1));
        assert!(spans.is_empty());

        let (_, spans) = distance_to_tree(&[1.0, 3.0, 2.0]).unwrap();
        let mut sorted = spans.clone();
        sorted.sort();
        assert_eq!(sorted, vec![Span::new(1, 3), Span::new(2, 3)]);
    }
}
