//! Masking, optimization, the pre-training and fine-tuning loops, and checkpoints.

mod checkpoint;
mod config;
mod masking;
mod optim;

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, MAGIC, VERSION};
pub use config::{MissingTreePolicy, TrainConfig, BATCH_SIZE_GRID, CONFIG_KEYS, LR_GRID};
pub use masking::{mask_batch, MaskAction, MaskedSentence, MaskingPlan};
pub use optim::{Adam, AdamConfig};

use crate::data::{TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::model::{Segmenter, SentenceStructure, StructureLm};
use crate::objectives::{
    finetune_loss, mlm_loss, pretrain_loss, sample_negatives, structure_loss, LossBreakdown, PoolEntry,
    StructureMode,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::treebank::GoldSyntax;

/// Independent random streams derived from the configured seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    Shuffle = 1,
    Mask = 2,
    Negatives = 3,
    Dropout = 4,
    EvalMask = 5,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A loss graph for one batch with handles to its components.
#[derive(Debug)]
pub struct StepGraph<T> {
    pub graph: Graph<T>,
    pub total: Var,
    pub l_w: Option<Var>,
    pub l_task: Option<Var>,
    pub l_g: Var,
    pub l_neg: Var,
    pub structures: Vec<SentenceStructure<T>>,
    /// True when no negatives could be drawn and the structure terms are zero constants.
    pub structure_skipped: bool,
}

impl<T: Scalar> StepGraph<T> {
    pub fn breakdown(&self, step: usize) -> LossBreakdown {
        let v = |x: Var| self.graph.value(x).item().as_f64();
        LossBreakdown {
            step,
            l_w: self.l_w.map_or(0.0, v),
            l_g: v(self.l_g),
            l_neg: v(self.l_neg),
            l_task: self.l_task.map(v),
            total: v(self.total),
        }
    }
}

/// Batch-mean structure terms; `None` when the batch offers no negatives.
fn structure_terms<T: Scalar>(
    g: &mut Graph<T>,
    structures: &[SentenceStructure<T>],
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Var, Var)>> {
    let pool: Vec<PoolEntry> = structures
        .iter()
        .enumerate()
        .flat_map(|(b, s)| {
            s.phrases.iter().enumerate().map(move |(m, p)| PoolEntry {
                sentence: b,
                phrase: m,
                embedding: p.embedding,
            })
        })
        .collect();
    if pool.len() < 2 {
        return Ok(None);
    }
    let mut totals = Vec::with_capacity(structures.len());
    let mut negs = Vec::with_capacity(structures.len());
    for (b, s) in structures.iter().enumerate() {
        let sampled = (0..s.phrases.len())
            .map(|m| sample_negatives(&pool, b, m, negatives, rng))
            .collect::<Result<Vec<_>>>()?;
        let terms = structure_loss(g, &s.phrases, s.contexts.phrasal, &sampled)?;
        totals.push(terms.total);
        negs.push(terms.negative);
    }
    let inv = T::lit(1.0 / structures.len() as f64);
    let l_g = g.add_n(&totals)?;
    let l_neg = g.add_n(&negs)?;
    Ok(Some((g.scale(l_g, inv), g.scale(l_neg, inv))))
}

fn zero_terms<T: Scalar>(g: &mut Graph<T>) -> (Var, Var) {
    let z = g.constant(Tensor::full(&[1], T::zero()));
    (z, z)
}

/// Pre-training loss for `batch` under `plan`: MLM over every masked position
/// plus `γ·l_g`, with one segmenter per row.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_graph<T: Scalar>(
    model: &StructureLm<T>,
    batch: &TokenBatch,
    plan: &MaskingPlan,
    segmenters: &[Segmenter<'_, T>],
    gamma_pre: f64,
    negatives: usize,
    neg_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepGraph<T>> {
    if segmenters.len() != batch.len() || plan.sentences.len() != batch.len() {
        return Err(Error::Contract("one segmenter and mask plan per batch row".into()));
    }
    let masked_total = plan.num_masked();
    if masked_total == 0 {
        return Err(Error::Contract("batch has no masked positions".into()));
    }
    let mut g = Graph::new();
    let input = plan.apply(batch);
    let acts = model.encode(&mut g, &input, dropout_rng)?;
    let mut mlm_terms = Vec::with_capacity(batch.len());
    for (a, m) in acts.iter().zip(&plan.sentences) {
        if m.positions.is_empty() {
            continue;
        }
        let logits = model.encoder().mlm_logits(&mut g, &model.store, a.top(), &m.positions)?;
        let nll = mlm_loss(&mut g, logits, &m.targets)?;
        mlm_terms.push(g.scale(nll, T::lit(m.positions.len() as f64 / masked_total as f64)));
    }
    let l_w = g.add_n(&mlm_terms)?;
    let l_w = g.reshape(l_w, &[1])?;
    let structures = acts
        .iter()
        .zip(segmenters)
        .map(|(a, &s)| model.sentence_structure(&mut g, a, s))
        .collect::<Result<Vec<_>>>()?;
    let terms = structure_terms(&mut g, &structures, negatives, neg_rng)?;
    let structure_skipped = terms.is_none();
    let (l_g, l_neg) = terms.unwrap_or_else(|| zero_terms(&mut g));
    let total = pretrain_loss(&mut g, l_w, l_g, gamma_pre)?;
    Ok(StepGraph {
        graph: g,
        total,
        l_w: Some(l_w),
        l_task: None,
        l_g,
        l_neg,
        structures,
        structure_skipped,
    })
}

/// Fine-tuning loss for `batch` with one class index per row and one
/// segmenter per row. Gold segmenters are rejected.
#[allow(clippy::too_many_arguments)]
pub fn finetune_graph<T: Scalar>(
    model: &StructureLm<T>,
    batch: &TokenBatch,
    labels: &[usize],
    segmenters: &[Segmenter<'_, T>],
    config: &TrainConfig,
    neg_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepGraph<T>> {
    if config.mode == StructureMode::Supervised || segmenters.iter().any(|s| matches!(s, Segmenter::Gold(_))) {
        return Err(Error::Mode("gold structure injection is disabled during fine-tuning".into()));
    }
    if labels.len() != batch.len() || segmenters.len() != batch.len() {
        return Err(Error::Contract("one label and segmenter per batch row".into()));
    }
    let mut g = Graph::new();
    let acts = model.encode(&mut g, batch, dropout_rng)?;
    let mut task_terms = Vec::with_capacity(batch.len());
    for (a, &label) in acts.iter().zip(labels) {
        let logits = model.class_logits(&mut g, a)?;
        task_terms.push(g.cross_entropy(logits, &[label])?);
    }
    let l_task = g.add_n(&task_terms)?;
    let l_task = g.scale(l_task, T::lit(1.0 / batch.len() as f64));
    let l_task = g.reshape(l_task, &[1])?;
    let structures = acts
        .iter()
        .zip(segmenters)
        .map(|(a, &s)| model.sentence_structure(&mut g, a, s))
        .collect::<Result<Vec<_>>>()?;
    let terms = structure_terms(&mut g, &structures, config.negatives, neg_rng)?;
    let structure_skipped = terms.is_none();
    let (l_g, l_neg) = terms.unwrap_or_else(|| zero_terms(&mut g));
    let total = finetune_loss(&mut g, l_task, l_g, config.gamma_fine, config.mode)?;
    Ok(StepGraph {
        graph: g,
        total,
        l_w: None,
        l_task: Some(l_task),
        l_g,
        l_neg,
        structures,
        structure_skipped,
    })
}

/// Backpropagates `step.total` and stores fresh gradients in the model.
pub fn accumulate_gradients<T: Scalar>(model: &mut StructureLm<T>, step: &mut StepGraph<T>) -> Result<()> {
    step.graph.backward(step.total)?;
    model.store.zero_grads();
    step.graph.write_param_grads(&mut model.store);
    Ok(())
}

/// Summary of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LossBreakdown>,
    pub steps_per_epoch: usize,
    pub skipped_empty: usize,
    pub skipped_missing_tree: usize,
    pub truncated: usize,
    /// Steps whose batch offered no negative phrases.
    pub structure_skipped: usize,
}

/// Called after every epoch with the 1-based epoch number.
pub type EpochHook<'a, T> = dyn FnMut(usize, &StructureLm<T>) -> Result<()> + 'a;

struct Example<'a> {
    ids: Vec<usize>,
    gold: Option<&'a GoldSyntax>,
    label: usize,
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch_of(examples: &[Example<'_>], rows: &[usize]) -> Result<TokenBatch> {
    TokenBatch::from_sequences(rows.iter().map(|&i| examples[i].ids.clone()).collect(), rows.to_vec())
}

/// Builds a vocabulary and a fresh model from `sentences`, then pre-trains it.
pub fn pretrain<T: Scalar>(
    sentences: &[Vec<String>],
    gold: Option<&[Option<GoldSyntax>]>,
    config: &TrainConfig,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<(StructureLm<T>, TrainReport)> {
    config.validate()?;
    let vocab = Vocab::build(sentences, config.min_freq)?;
    let mut model = StructureLm::new(vocab, config.clone())?;
    let report = pretrain_model(&mut model, sentences, gold, on_epoch)?;
    Ok((model, report))
}

/// Pre-trains `model` in place under `model.config`.
pub fn pretrain_model<T: Scalar>(
    model: &mut StructureLm<T>,
    sentences: &[Vec<String>],
    gold: Option<&[Option<GoldSyntax>]>,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let supervised = cfg.mode == StructureMode::Supervised;
    if let Some(gold) = gold {
        if gold.len() != sentences.len() {
            return Err(Error::Alignment(format!(
                "{} sentences but {} gold entries",
                sentences.len(),
                gold.len()
            )));
        }
    } else if supervised {
        return Err(Error::Data("supervised mode requires gold trees for the corpus".into()));
    }
    let mut report = TrainReport::default();
    let mut examples = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        if s.is_empty() {
            report.skipped_empty += 1;
            continue;
        }
        let tree = gold.and_then(|g| g[i].as_ref());
        if s.len() > cfg.max_len {
            report.truncated += 1;
        }
        if supervised && (tree.is_none() || s.len() > cfg.max_len) {
            if cfg.missing_tree == MissingTreePolicy::Abort {
                return Err(Error::Data(format!("sentence {} has no usable gold tree", i + 1)));
            }
            report.skipped_missing_tree += 1;
            continue;
        }
        examples.push(Example {
            ids: model.encode_tokens(s),
            gold: tree,
            label: 0,
        });
    }
    if report.skipped_missing_tree > 0 {
        warn!("skipped {} sentence(s) without a usable gold tree", report.skipped_missing_tree);
    }
    if report.truncated > 0 {
        warn!("truncated {} sentence(s) to max_len {}", report.truncated, cfg.max_len);
    }
    if examples.is_empty() {
        return Err(Error::Data("no trainable sentences".into()));
    }
    report.steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let mut shuffle = stream_rng(cfg.seed, RngStream::Shuffle);
    let mut mask_rng = stream_rng(cfg.seed, RngStream::Mask);
    let mut neg_rng = stream_rng(cfg.seed, RngStream::Negatives);
    let mut drop_rng = stream_rng(cfg.seed, RngStream::Dropout);
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.weight_decay));
    let vocab_size = model.vocab().len();
    for epoch in 1..=cfg.epochs {
        for rows in epoch_batches(examples.len(), cfg.batch_size, &mut shuffle) {
            let batch = batch_of(&examples, &rows)?;
            let plan = mask_batch(&batch, vocab_size, cfg.mask_rate, false, &mut mask_rng)?;
            let segmenters: Vec<Segmenter<'_, T>> = rows
                .iter()
                .map(|&i| match (supervised, examples[i].gold) {
                    (true, Some(gold)) => Segmenter::Gold(gold),
                    _ => Segmenter::Induced {
                        lambda: cfg.lambda_unsup,
                    },
                })
                .collect();
            let mut step = pretrain_graph(
                model,
                &batch,
                &plan,
                &segmenters,
                cfg.gamma_pre,
                cfg.negatives,
                &mut neg_rng,
                Some(&mut drop_rng),
            )?;
            report.structure_skipped += usize::from(step.structure_skipped);
            accumulate_gradients(model, &mut step)?;
            adam.step(&mut model.store)?;
            report.log.push(step.breakdown(report.log.len() + 1));
        }
        let last = report.log.last().expect("at least one step");
        info!("epoch {epoch}: step {} total {} ppl {}", last.step, last.total, last.perplexity());
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

/// Fine-tunes `model` on `(label, tokens)` pairs with a classification head.
/// With `frozen`, losses are computed and logged but no parameter changes.
pub fn finetune<T: Scalar>(
    model: &mut StructureLm<T>,
    data: &[(String, Vec<String>)],
    frozen: bool,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if cfg.mode == StructureMode::Supervised {
        return Err(Error::Mode("gold structure injection is disabled during fine-tuning".into()));
    }
    if model.classifier().is_none() {
        let classes: BTreeSet<&String> = data.iter().map(|(l, _)| l).collect();
        model.attach_classifier(classes.into_iter().cloned().collect())?;
    }
    let classifier = model.classifier().expect("attached").clone();
    let mut report = TrainReport::default();
    let mut examples = Vec::with_capacity(data.len());
    for (label, tokens) in data {
        let label = classifier.class_index(label)?;
        if tokens.is_empty() {
            report.skipped_empty += 1;
            continue;
        }
        if tokens.len() > cfg.max_len {
            report.truncated += 1;
        }
        examples.push(Example {
            ids: model.encode_tokens(tokens),
            gold: None,
            label,
        });
    }
    if examples.is_empty() {
        return Err(Error::Data("no labeled sentences to fine-tune on".into()));
    }
    report.steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let mut shuffle = stream_rng(cfg.seed, RngStream::Shuffle);
    let mut neg_rng = stream_rng(cfg.seed, RngStream::Negatives);
    let mut drop_rng = stream_rng(cfg.seed, RngStream::Dropout);
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.weight_decay));
    for epoch in 1..=cfg.epochs {
        for rows in epoch_batches(examples.len(), cfg.batch_size, &mut shuffle) {
            let batch = batch_of(&examples, &rows)?;
            let labels: Vec<usize> = rows.iter().map(|&i| examples[i].label).collect();
            let segmenters = vec![
                Segmenter::Induced {
                    lambda: cfg.lambda_unsup
                };
                rows.len()
            ];
            let mut step = finetune_graph(
                model,
                &batch,
                &labels,
                &segmenters,
                &cfg,
                &mut neg_rng,
                Some(&mut drop_rng),
            )?;
            report.structure_skipped += usize::from(step.structure_skipped);
            if !frozen {
                accumulate_gradients(model, &mut step)?;
                adam.step(&mut model.store)?;
            }
            report.log.push(step.breakdown(report.log.len() + 1));
        }
        let last = report.log.last().expect("at least one step");
        info!("fine-tune epoch {epoch}: step {} total {}", last.step, last.total);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

/// Writes the loss log as CSV.
pub fn log_csv(log: &[LossBreakdown]) -> String {
    let mut out = String::from(LossBreakdown::CSV_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}
