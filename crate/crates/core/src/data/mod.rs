//! Corpus reading, vocabulary, batching and the synthetic treebank generator.

mod batch;
mod synth;
mod vocab;

use std::fs;
use std::path::Path;

pub use batch::{encode_and_batch, Batches, TokenBatch};
pub use synth::{synth_corpus, SynthCorpus, SynthFiles, SynthSentence};
pub use vocab::{tokenize, Vocab, MASK, PAD, RESERVED, UNK};

use crate::error::{Error, Result};

/// Reads a one-sentence-per-line corpus, tokenized and lowercased.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Reads `label<TAB>sentence` lines.
pub fn read_labeled(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (label, sent) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{}:{}: expected `label<TAB>sentence`", path.display(), i + 1))
            })?;
            Ok((label.trim().to_string(), tokenize(sent)))
        })
        .collect()
}
