//! Gold constituency and dependency annotation: readers, derived distances
//! and spans, and the distance-to-tree conversion used for evaluation.

mod conllx;
mod gold;
mod manifest;
mod tree;

pub use conllx::{parse_conllx, parse_conllx_document, write_conllx, ConllSentence, ConllToken, DependencyGraph};
pub use gold::{
    distance_to_tree, gold_distances, gold_spans, gold_spans_labeled, BinaryTree, GoldDistanceMode, GoldSyntax,
    PhraseType,
};
pub use manifest::{load_aligned, read_manifest, read_trees, AlignedCorpus, ManifestEntry};
pub use tree::{parse_ptb_bracketed, ConstituencyTree, LabeledSpan, TreeNode};
