use log::warn;

use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};

/// Right-padded id matrix for a group of sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    /// `[B × n_max]`, positions at or past a row's length hold `PAD`.
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// `mask[b][t]` is true for real tokens.
    pub mask: Vec<Vec<bool>>,
    /// Index of each row's sentence in the source corpus.
    pub sentences: Vec<usize>,
}

impl TokenBatch {
    /// Pads id sequences to a common width. Every sequence must be non-empty.
    pub fn from_sequences(seqs: Vec<Vec<usize>>, sentences: Vec<usize>) -> Result<Self> {
        if seqs.len() != sentences.len() {
            return Err(Error::Contract("one sentence index per sequence".into()));
        }
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Contract("empty sequence in batch".into()));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let mask = lengths
            .iter()
            .map(|&l| (0..width).map(|t| t < l).collect())
            .collect();
        let ids = seqs
            .into_iter()
            .map(|mut s| {
                s.resize(width, PAD);
                s
            })
            .collect();
        Ok(TokenBatch {
            ids,
            lengths,
            mask,
            sentences,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Unpadded ids of row `b`.
    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b][..self.lengths[b]]
    }

    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Batches {
    pub batches: Vec<TokenBatch>,
    /// Sentences cut down to `max_len`.
    pub truncated: usize,
    /// Empty input lines that were dropped.
    pub skipped_empty: usize,
}

/// Encodes tokenized sentences and groups them in corpus order; the final
/// batch may be smaller than `batch_size`.
pub fn encode_and_batch<S: AsRef<str>>(
    sentences: &[Vec<S>],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
) -> Result<Batches> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Config("batch_size and max_len must be positive".into()));
    }
    let mut truncated = 0;
    let mut skipped_empty = 0;
    let mut encoded = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        if s.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let mut ids = vocab.encode(s);
        if ids.len() > max_len {
            ids.truncate(max_len);
            truncated += 1;
        }
        encoded.push((i, ids));
    }
    if truncated > 0 {
        warn!("truncated {truncated} sentence(s) to max_len {max_len}");
    }
    if skipped_empty > 0 {
        warn!("skipped {skipped_empty} empty sentence(s)");
    }
    let mut batches = Vec::with_capacity(encoded.len().div_ceil(batch_size));
    for chunk in encoded.chunks(batch_size) {
        let (idx, seqs): (Vec<usize>, Vec<Vec<usize>>) = chunk.iter().cloned().unzip();
        batches.push(TokenBatch::from_sequences(seqs, idx)?);
    }
    Ok(Batches {
        batches,
        truncated,
        skipped_empty,
    })
}
