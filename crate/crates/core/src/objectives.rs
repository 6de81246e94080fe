//! Loss terms: masked-LM cross-entropy, the phrase/context structure loss with
//! negative sampling, and their weighted compositions.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::syntax::PhraseEmbedding;
use crate::tensor::{Graph, Var};

pub const DEFAULT_GAMMA_PRE: f64 = 0.5;
pub const DEFAULT_GAMMA_FINE: f64 = 0.23;
pub const DEFAULT_NEGATIVES: usize = 5;

/// Where phrase segmentations come from during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureMode {
    /// Segment from the model's own distances.
    #[default]
    Unsupervised,
    /// Substitute distances and segmentation derived from gold trees.
    Supervised,
}

impl std::str::FromStr for StructureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(StructureMode::Unsupervised),
            "supervised" => Ok(StructureMode::Supervised),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected unsupervised or supervised)"
            ))),
        }
    }
}

impl fmt::Display for StructureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureMode::Unsupervised => "unsupervised",
            StructureMode::Supervised => "supervised",
        })
    }
}

/// Mean negative log-likelihood of `targets` under `logits: [m×V]`.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Contract("masked-LM loss with no masked positions".into()));
    }
    g.cross_entropy(logits, targets)
}

/// `sigmoid(sᵀc)` for two `[1×d]` rows, as a `[1×1]` node.
pub fn structure_prob<T: Scalar>(g: &mut Graph<T>, phrase: Var, context: Var) -> Result<Var> {
    let dot = g.matmul_t(phrase, context)?;
    Ok(g.sigmoid(dot))
}

/// Plain-value counterpart of [`structure_prob`].
pub fn structure_prob_value<T: Scalar>(phrase: &[T], context: &[T]) -> T {
    sigmoid(phrase.iter().zip(context).map(|(&a, &b)| a * b).sum())
}

/// Structure terms for one sentence.
#[derive(Clone, Copy, Debug)]
pub struct StructureTerms {
    /// `Σ_m [(1 - p(s_m | c_m)) + mean_n p(ŝ_n | c_m)]`
    pub total: Var,
    /// `Σ_m mean_n p(ŝ_n | c_m)`
    pub negative: Var,
}

/// Each phrase is scored against the phrasal context row of its opening token;
/// `negatives[m]` holds the sampled negative embeddings for phrase `m`.
pub fn structure_loss<T: Scalar>(
    g: &mut Graph<T>,
    phrases: &[PhraseEmbedding],
    phrasal_ctx: Var,
    negatives: &[Vec<Var>],
) -> Result<StructureTerms> {
    if phrases.is_empty() {
        return Err(Error::Contract("structure loss over zero phrases".into()));
    }
    if negatives.len() != phrases.len() {
        return Err(Error::Contract(format!(
            "{} negative lists for {} phrases",
            negatives.len(),
            phrases.len()
        )));
    }
    let mut totals = Vec::with_capacity(phrases.len());
    let mut negs = Vec::with_capacity(phrases.len());
    for (phrase, sampled) in phrases.iter().zip(negatives) {
        if sampled.is_empty() {
            return Err(Error::Sampling(format!("no negatives for phrase {}", phrase.span)));
        }
        let ctx = g.select_rows(phrasal_ctx, &[phrase.span.start - 1])?;
        let pos = structure_prob(g, phrase.embedding, ctx)?;
        let miss = g.affine(pos, -T::one(), T::one());
        let mut probs = Vec::with_capacity(sampled.len());
        for &neg in sampled {
            probs.push(structure_prob(g, neg, ctx)?);
        }
        let neg_sum = g.add_n(&probs)?;
        let neg_mean = g.scale(neg_sum, T::lit(1.0 / sampled.len() as f64));
        totals.push(g.add(miss, neg_mean)?);
        negs.push(neg_mean);
    }
    let total = g.add_n(&totals)?;
    let negative = g.add_n(&negs)?;
    Ok(StructureTerms {
        total: g.reshape(total, &[1])?,
        negative: g.reshape(negative, &[1])?,
    })
}

/// A phrase available as a negative, tagged with its sentence.
#[derive(Clone, Copy, Debug)]
pub struct PoolEntry {
    pub sentence: usize,
    pub phrase: usize,
    pub embedding: Var,
}

/// Draws `count` negatives (with replacement) for phrase `phrase` of `sentence`.
/// Phrases from other sentences are used when any exist; otherwise the other
/// phrases of the same sentence.
pub fn sample_negatives<R: Rng + ?Sized>(
    pool: &[PoolEntry],
    sentence: usize,
    phrase: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let others: Vec<&PoolEntry> = pool.iter().filter(|e| e.sentence != sentence).collect();
    let candidates = if others.is_empty() {
        pool.iter()
            .filter(|e| e.sentence == sentence && e.phrase != phrase)
            .collect()
    } else {
        others
    };
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "empty negative pool for phrase {phrase} of sentence {sentence}"
        )));
    }
    Ok((0..count)
        .map(|_| candidates.choose(rng).expect("non-empty").embedding)
        .collect())
}

/// `l_w + γ·l_g`
pub fn pretrain_loss<T: Scalar>(g: &mut Graph<T>, l_w: Var, l_g: Var, gamma_pre: f64) -> Result<Var> {
    let weighted = g.scale(l_g, T::lit(gamma_pre));
    g.add(l_w, weighted)
}

/// `l_task + γ·l_g`. Gold structure is not allowed while fine-tuning.
pub fn finetune_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_task: Var,
    l_g: Var,
    gamma_fine: f64,
    mode: StructureMode,
) -> Result<Var> {
    if mode == StructureMode::Supervised {
        return Err(Error::Mode("gold structure injection is disabled during fine-tuning".into()));
    }
    let weighted = g.scale(l_g, T::lit(gamma_fine));
    g.add(l_task, weighted)
}

/// Scalar loss components of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_w: f64,
    pub l_g: f64,
    pub l_neg: f64,
    pub l_task: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_w,l_g,l_neg,l_task,total,ppl";

    /// `exp(l_w)`, the batch masked perplexity.
    pub fn perplexity(&self) -> f64 {
        self.l_w.exp()
    }

    /// One CSV row; floats are printed in shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let task = self.l_task.map(|t| t.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.l_w,
            self.l_g,
            self.l_neg,
            task,
            self.total,
            self.perplexity()
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Data(format!("loss row has {} columns, expected 7", cols.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("bad number `{s}` in loss row: {e}")))
        };
        Ok(LossBreakdown {
            step: cols[0]
                .parse()
                .map_err(|e| Error::Data(format!("bad step `{}`: {e}", cols[0])))?,
            l_w: num(cols[1])?,
            l_g: num(cols[2])?,
            l_neg: num(cols[3])?,
            l_task: if cols[4].is_empty() { None } else { Some(num(cols[4])?) },
            total: num(cols[5])?,
        })
    }
}
