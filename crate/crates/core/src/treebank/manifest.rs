use std::fs;
use std::path::{Path, PathBuf};

use super::conllx::parse_conllx_document;
use super::gold::{GoldDistanceMode, GoldSyntax};
use super::tree::{parse_ptb_bracketed, ConstituencyTree};
use crate::data::tokenize;
use crate::error::{Error, Result};

/// One row of an aligned-corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sentences: PathBuf,
    pub constituency: PathBuf,
    pub dependency: PathBuf,
}

/// Reads a manifest: each non-blank, non-`#` line holds three whitespace
/// separated paths (sentences, bracketed trees, CoNLL-X), relative to the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [s, c, d] = cols.as_slice() else {
            return Err(Error::Data(format!(
                "{}:{}: expected `sentences trees deps`",
                path.display(),
                i + 1
            )));
        };
        out.push(ManifestEntry {
            sentences: base.join(s),
            constituency: base.join(c),
            dependency: base.join(d),
        });
    }
    Ok(out)
}

/// One tree per line; blank lines stand for sentences without a tree.
pub fn read_trees(path: &Path) -> Result<Vec<Option<ConstituencyTree>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            if line.trim().is_empty() {
                Ok(None)
            } else {
                parse_ptb_bracketed(line).map(Some).map_err(|e| match e {
                    Error::Parse { offset, message } => Error::Parse {
                        offset,
                        message: format!("{}:{}: {message}", path.display(), i + 1),
                    },
                    other => other,
                })
            }
        })
        .collect()
}

/// Sentences with their gold annotation, where available.
#[derive(Clone, Debug, Default)]
pub struct AlignedCorpus {
    pub sentences: Vec<Vec<String>>,
    pub gold: Vec<Option<GoldSyntax>>,
}

impl AlignedCorpus {
    pub fn missing_gold(&self) -> usize {
        self.gold.iter().filter(|g| g.is_none()).count()
    }
}

/// Loads a sentence file and aligns it with optional tree and dependency files.
///
/// Tree tokens must match the (lowercased) sentence tokens; a blank tree line
/// leaves that sentence without gold annotation.
pub fn load_aligned(
    sentences: &Path,
    trees: Option<&Path>,
    deps: Option<&Path>,
    mode: GoldDistanceMode,
) -> Result<AlignedCorpus> {
    let text = fs::read_to_string(sentences).map_err(|e| Error::io(sentences, e))?;
    let sents: Vec<Vec<String>> = text.lines().map(tokenize).collect();
    let Some(trees_path) = trees else {
        if deps.is_some() {
            return Err(Error::Data("dependency file given without constituency trees".into()));
        }
        let n = sents.len();
        return Ok(AlignedCorpus {
            sentences: sents,
            gold: vec![None; n],
        });
    };
    let trees = read_trees(trees_path)?;
    if trees.len() != sents.len() {
        return Err(Error::Alignment(format!(
            "{} sentences but {} tree lines",
            sents.len(),
            trees.len()
        )));
    }
    let dep_graphs = match deps {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let doc = parse_conllx_document(&text)?;
            if doc.len() != trees.iter().flatten().count() {
                return Err(Error::Alignment(format!(
                    "{} dependency blocks but {} trees",
                    doc.len(),
                    trees.iter().flatten().count()
                )));
            }
            Some(doc)
        }
        None => None,
    };
    let mut dep_iter = dep_graphs.map(|d| d.into_iter());
    let mut gold = Vec::with_capacity(sents.len());
    for (i, (sent, tree)) in sents.iter().zip(trees).enumerate() {
        let Some(tree) = tree else {
            gold.push(None);
            continue;
        };
        let tree_tokens: Vec<String> = tree.tokens().iter().map(|t| t.to_lowercase()).collect();
        if &tree_tokens != sent {
            return Err(Error::Alignment(format!(
                "sentence {}: tree tokens {:?} differ from sentence {:?}",
                i + 1,
                tree_tokens,
                sent
            )));
        }
        let dep = dep_iter
            .as_mut()
            .map(|it| it.next().expect("block count checked").graph);
        gold.push(Some(GoldSyntax::new(tree, dep, mode)?));
    }
    Ok(AlignedCorpus {
        sentences: sents,
        gold,
    })
}
