//! Evaluation quantities: masked perplexity, unlabeled span F1, attention/
//! dependency alignment, phrase-length deviation, the distance-gap statistic,
//! and induced phrase-type proportions.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;

use crate::data::{encode_and_batch, TokenBatch};
use crate::encoder::ActivationValues;
use crate::error::{Error, Result};
use crate::model::StructureLm;
use crate::scalar::Scalar;
use crate::span::Span;
use crate::tensor::{Graph, Tensor};
use crate::training::{mask_batch, stream_rng, RngStream};
use crate::treebank::{AlignedCorpus, DependencyGraph, LabeledSpan, PhraseType};

/// Summed masked-token negative log-likelihood and the number of masked tokens.
pub fn masked_nll<T: Scalar>(model: &StructureLm<T>, sentences: &[Vec<String>], seed: u64) -> Result<(f64, usize)> {
    let cfg = &model.config;
    let batches = encode_and_batch(sentences, model.vocab(), cfg.batch_size, model.encoder_config().max_len)?;
    let mut rng = stream_rng(seed, RngStream::EvalMask);
    let mut total = 0.0;
    let mut count = 0;
    for batch in &batches.batches {
        let plan = mask_batch(batch, model.vocab().len(), cfg.mask_rate, true, &mut rng)?;
        let input = plan.apply(batch);
        for (b, m) in plan.sentences.iter().enumerate() {
            if m.positions.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let acts = model.encode_ids(&mut g, input.row(b))?;
            let logits = model.encoder().mlm_logits(&mut g, &model.store, acts.top(), &m.positions)?;
            let nll = g.cross_entropy(logits, &m.targets)?;
            total += g.value(nll).item().as_f64() * m.positions.len() as f64;
            count += m.positions.len();
        }
    }
    Ok((total, count))
}

/// `exp` of the mean masked-token NLL over the corpus. Every selected position
/// is replaced by the mask token; the selection is fixed by `seed`.
pub fn masked_perplexity<T: Scalar>(model: &StructureLm<T>, sentences: &[Vec<String>], seed: u64) -> Result<f64> {
    let (total, count) = masked_nll(model, sentences, seed)?;
    perplexity_from(total, count)
}

pub fn perplexity_from(total_nll: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Contract("perplexity over zero masked tokens".into()));
    }
    Ok((total_nll / count as f64).exp())
}

/// Micro-averaged span precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub induced: usize,
    pub gold: usize,
}

fn scored_spans(spans: &[Span]) -> BTreeSet<Span> {
    spans.iter().copied().filter(|s| s.len() > 1).collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl SpanScores {
    fn from_counts(matched: usize, induced: usize, gold: usize) -> Self {
        let precision = ratio(matched, induced);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        SpanScores {
            precision,
            recall,
            f1,
            matched,
            induced,
            gold,
        }
    }
}

/// Exact-match F1 over `(induced, gold)` span lists, one pair per sentence.
/// Duplicates are ignored and single-token spans are excluded from both sides.
pub fn span_f1(pairs: &[(Vec<Span>, Vec<Span>)]) -> SpanScores {
    let (mut matched, mut induced, mut gold) = (0, 0, 0);
    for (i, g) in pairs {
        let i = scored_spans(i);
        let g = scored_spans(g);
        matched += i.intersection(&g).count();
        induced += i.len();
        gold += g.len();
    }
    SpanScores::from_counts(matched, induced, gold)
}

/// Attention mass on related token pairs over total attention mass.
///
/// `attention[s]` is sentence `s`'s `[n×n]` map; `(i, j)` counts when `i`
/// heads `j`, or in either direction with `both_directions`.
pub fn dependency_alignment<T: Scalar>(
    attention: &[&Tensor<T>],
    deps: &[&DependencyGraph],
    both_directions: bool,
) -> Result<f64> {
    if attention.len() != deps.len() {
        return Err(Error::Alignment(format!(
            "{} attention maps for {} dependency graphs",
            attention.len(),
            deps.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, dep) in attention.iter().zip(deps) {
        let n = dep.len();
        if a.shape() != [n, n] {
            return Err(Error::Alignment(format!(
                "attention of shape {:?} for a sentence of {n} tokens",
                a.shape()
            )));
        }
        for i in 1..=n {
            for j in 1..=n {
                let w = a.get2(i - 1, j - 1).as_f64();
                let related = if both_directions { dep.related(i, j) } else { dep.head(j) == i };
                den += w;
                if related {
                    num += w;
                }
            }
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Alignment score for every layer and head; `scores[l][h]` is block `l+1`, head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTable {
    pub scores: Vec<Vec<f64>>,
}

impl AlignmentTable {
    /// Mean over heads per layer.
    pub fn layer_means(&self) -> Vec<f64> {
        self.scores
            .iter()
            .map(|h| h.iter().sum::<f64>() / h.len() as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,dep_align\n");
        for (l, heads) in self.scores.iter().enumerate() {
            for (h, s) in heads.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", l + 1, h + 1, s);
            }
        }
        out
    }
}

pub fn alignment_table<T: Scalar>(
    acts: &[ActivationValues<T>],
    deps: &[&DependencyGraph],
    both_directions: bool,
) -> Result<AlignmentTable> {
    let Some(first) = acts.first() else {
        return Err(Error::Data("alignment table over zero sentences".into()));
    };
    let layers = first.attention.len();
    let heads = first.attention.first().map_or(0, Vec::len);
    let mut scores = vec![vec![0.0; heads]; layers];
    for (l, row) in scores.iter_mut().enumerate() {
        for (h, cell) in row.iter_mut().enumerate() {
            let maps: Vec<&Tensor<T>> = acts.iter().map(|a| &a.attention[l][h]).collect();
            *cell = dependency_alignment(&maps, deps, both_directions)?;
        }
    }
    Ok(AlignmentTable { scores })
}

/// Corpus summary of per-sentence phrase-length deviation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhrDev {
    pub mean: f64,
    pub median: f64,
    pub per_sentence: Vec<f64>,
    /// Sentences without gold spans or induced spans.
    pub skipped: usize,
}

/// Gold span with the largest token overlap, leftmost on ties.
fn best_overlap(span: Span, gold: &[Span]) -> Span {
    let mut best = gold[0];
    let mut best_overlap = span.overlap(&best);
    for &g in &gold[1..] {
        let o = span.overlap(&g);
        if o > best_overlap {
            best = g;
            best_overlap = o;
        }
    }
    best
}

/// Population standard deviation of `|induced length - aligned gold length|`
/// within one sentence.
pub fn phr_dev_sentence(induced: &[Span], gold: &[Span]) -> Option<f64> {
    if induced.is_empty() || gold.is_empty() {
        return None;
    }
    let deltas: Vec<f64> = induced
        .iter()
        .map(|&s| (s.len() as f64 - best_overlap(s, gold).len() as f64).abs())
        .collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / deltas.len() as f64;
    Some(var.sqrt())
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

pub fn phr_dev(pairs: &[(Vec<Span>, Vec<Span>)]) -> PhrDev {
    let mut per_sentence = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (induced, gold) in pairs {
        match phr_dev_sentence(induced, gold) {
            Some(v) => per_sentence.push(v),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("phrase-length deviation skipped {skipped} sentence(s) without spans");
    }
    let mean = if per_sentence.is_empty() {
        0.0
    } else {
        per_sentence.iter().sum::<f64>() / per_sentence.len() as f64
    };
    PhrDev {
        mean,
        median: median(&per_sentence),
        per_sentence,
        skipped,
    }
}

/// Mean absolute gap between each distance and the smallest one (leftmost on ties).
pub fn diff_raw(d: &[f64]) -> Result<f64> {
    let Some(&first) = d.first() else {
        return Err(Error::Contract("distance gap statistic of an empty sentence".into()));
    };
    let root = d.iter().copied().fold(first, |m, x| if x < m { x } else { m });
    Ok(d.iter().map(|x| (x - root).abs()).sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffReport {
    pub raw: Vec<f64>,
    /// Min-max normalized to `[0, 1]` over the corpus.
    pub normalized: Vec<f64>,
    /// All raw values were equal, so every normalized value is 0.
    pub degenerate: bool,
}

impl DiffReport {
    /// Counts of normalized values in `bins` equal-width bins over `[0, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins.max(1)];
        for &v in &self.normalized {
            let b = ((v * h.len() as f64) as usize).min(h.len() - 1);
            h[b] += 1;
        }
        h
    }

    pub fn mean_normalized(&self) -> f64 {
        if self.normalized.is_empty() {
            0.0
        } else {
            self.normalized.iter().sum::<f64>() / self.normalized.len() as f64
        }
    }
}

pub fn diff_statistic(distances: &[Vec<f64>]) -> Result<DiffReport> {
    let raw = distances.iter().map(|d| diff_raw(d)).collect::<Result<Vec<f64>>>()?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    if degenerate {
        warn!("distance gap statistic is constant across the corpus; normalized values set to 0");
    }
    let normalized = raw
        .iter()
        .map(|&r| if degenerate { 0.0 } else { (r - lo) / (hi - lo) })
        .collect();
    Ok(DiffReport {
        raw,
        normalized,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseTypeReport {
    /// One entry per [`PhraseType::ALL`], in that order.
    pub proportions: Vec<(PhraseType, f64)>,
    pub avg_len: f64,
    pub total: usize,
}

impl PhraseTypeReport {
    pub fn proportion(&self, t: PhraseType) -> f64 {
        self.proportions.iter().find(|(k, _)| *k == t).map_or(0.0, |(_, p)| *p)
    }
}

/// Labels each induced span with the gold constituent covering exactly the
/// same tokens (the innermost one in unary chains), or `Other`.
pub fn phrase_type_proportions(induced: &[Vec<Span>], gold: &[Vec<LabeledSpan>]) -> Result<PhraseTypeReport> {
    if induced.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} induced sentences for {} gold sentences",
            induced.len(),
            gold.len()
        )));
    }
    let mut counts = [0usize; 6];
    let mut total = 0;
    let mut length = 0;
    for (spans, labeled) in induced.iter().zip(gold) {
        for s in spans {
            let label = labeled
                .iter()
                .rev()
                .find(|l| l.span == *s)
                .map_or(PhraseType::Other, |l| PhraseType::from_label(&l.label));
            let slot = PhraseType::ALL.iter().position(|&t| t == label).expect("listed");
            counts[slot] += 1;
            total += 1;
            length += s.len();
        }
    }
    Ok(PhraseTypeReport {
        proportions: PhraseType::ALL
            .iter()
            .zip(counts)
            .map(|(&t, c)| (t, ratio(c, total)))
            .collect(),
        avg_len: ratio(length, total),
        total,
    })
}

/// Every evaluation quantity for one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub perplexity: f64,
    pub spans: SpanScores,
    pub dep_align: Option<AlignmentTable>,
    pub phr_dev: PhrDev,
    pub diff: DiffReport,
    pub phrase_types: PhraseTypeReport,
}

impl EvalReport {
    /// CSV sections, each introduced by a `# name` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# spans\nprecision,recall,f1,matched,induced,gold");
        let s = &self.spans;
        let _ = writeln!(out, "{},{},{},{},{},{}", s.precision, s.recall, s.f1, s.matched, s.induced, s.gold);
        if let Some(t) = &self.dep_align {
            let _ = write!(out, "\n# dep_align\n{}", t.to_csv());
        }
        let _ = writeln!(out, "\n# phr_dev\nsentence,phr_dev");
        for (i, v) in self.phr_dev.per_sentence.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, v);
        }
        let _ = writeln!(out, "\n# diff\nsentence,raw,normalized");
        for (i, (r, n)) in self.diff.raw.iter().zip(&self.diff.normalized).enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, r, n);
        }
        let _ = writeln!(out, "\n# diff_histogram\nbin_low,bin_high,count");
        let bins = self.diff.histogram(10);
        for (b, c) in bins.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", b as f64 / 10.0, (b + 1) as f64 / 10.0, c);
        }
        let _ = writeln!(out, "\n# phrase_types\ntype,proportion");
        for (t, p) in &self.phrase_types.proportions {
            let _ = writeln!(out, "{},{}", t.name(), p);
        }
        out
    }

    /// Flat `key=value` lines.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("perplexity", self.perplexity.to_string());
        kv("span_precision", self.spans.precision.to_string());
        kv("span_recall", self.spans.recall.to_string());
        kv("span_f1", self.spans.f1.to_string());
        if let Some(t) = &self.dep_align {
            for (l, m) in t.layer_means().iter().enumerate() {
                kv(&format!("dep_align_layer{}", l + 1), m.to_string());
            }
        }
        kv("phr_dev_mean", self.phr_dev.mean.to_string());
        kv("phr_dev_median", self.phr_dev.median.to_string());
        kv("phr_dev_skipped", self.phr_dev.skipped.to_string());
        kv("diff_mean_normalized", self.diff.mean_normalized().to_string());
        kv("diff_degenerate", self.diff.degenerate.to_string());
        for (t, p) in &self.phrase_types.proportions {
            kv(&format!("type_{}", t.name()), p.to_string());
        }
        kv("avg_phrase_len", self.phrase_types.avg_len.to_string());
        out
    }
}

/// Full report for `corpus`: the model segments every sentence at `lambda`;
/// structure metrics use the sentences that carry gold annotation and fit
/// within `max_len`.
pub fn evaluate<T: Scalar>(
    model: &StructureLm<T>,
    corpus: &AlignedCorpus,
    lambda: f64,
    seed: u64,
    both_directions: bool,
) -> Result<EvalReport> {
    let perplexity = masked_perplexity(model, &corpus.sentences, seed)?;
    let max_len = model.encoder_config().max_len;
    let mut distances = Vec::new();
    let mut pairs = Vec::new();
    let mut induced_spans = Vec::new();
    let mut labeled = Vec::new();
    let mut acts = Vec::new();
    let mut deps = Vec::new();
    let mut too_long = 0;
    for (tokens, gold) in corpus.sentences.iter().zip(&corpus.gold) {
        if tokens.is_empty() {
            continue;
        }
        let (d, seg) = model.induce(tokens, lambda)?;
        distances.push(d.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
        let Some(gold) = gold else { continue };
        if tokens.len() > max_len {
            too_long += 1;
            continue;
        }
        pairs.push((seg.spans.clone(), gold.spans.clone()));
        induced_spans.push(seg.spans);
        labeled.push(gold.constituency.labeled_spans());
        if let Some(dep) = &gold.dependency {
            acts.push(model.activations(tokens)?);
            deps.push(dep);
        }
    }
    if too_long > 0 {
        warn!("{too_long} annotated sentences exceed max_len {max_len}; left out of structure metrics");
    }
    let dep_align = if acts.is_empty() {
        None
    } else {
        Some(alignment_table(&acts, &deps, both_directions)?)
    };
    Ok(EvalReport {
        perplexity,
        spans: span_f1(&pairs),
        dep_align,
        phr_dev: phr_dev(&pairs),
        diff: diff_statistic(&distances)?,
        phrase_types: phrase_type_proportions(&induced_spans, &labeled)?,
    })
}

/// Accuracy of the classification head on `(label, tokens)` pairs.
pub fn accuracy<T: Scalar>(model: &StructureLm<T>, data: &[(String, Vec<String>)]) -> Result<f64> {
    let cls = model
        .classifier()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    let mut correct = 0;
    for (label, tokens) in data {
        let want = cls.class_index(label)?;
        if model.predict(tokens)? == want {
            correct += 1;
        }
    }
    Ok(ratio(correct, data.len()))
}

/// Token batches of `sentences` with the model's limits, for callers that
/// need padded input.
pub fn batches_for<T: Scalar>(model: &StructureLm<T>, sentences: &[Vec<String>]) -> Result<Vec<TokenBatch>> {
    Ok(encode_and_batch(sentences, model.vocab(), model.config.batch_size, model.encoder_config().max_len)?.batches)
}
