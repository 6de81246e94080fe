//! Structure learning at a middle encoder layer: word and phrasal contexts,
//! per-token syntactic distances, greedy phrase segmentation, and phrasal
//! attention pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerActivations;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::span::Span;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::treebank::GoldSyntax;

/// Mixture weights over layers `l-1`, `l`, `l+1` at initialization.
pub const DEFAULT_ALPHA_INIT: [f64; 3] = [0.35, 0.40, 0.25];
pub const DISTANCE_KERNEL_WIDTH: usize = 3;

/// How a freshly opened phrase starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Opening {
    /// The opening token alone; the next token is the first membership test.
    #[default]
    Single,
    /// The opening token and its right neighbour are joined unconditionally.
    Pair,
}

impl std::str::FromStr for Opening {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Opening::Single),
            "pair" => Ok(Opening::Pair),
            other => Err(Error::Config(format!("unknown opening `{other}` (expected single or pair)"))),
        }
    }
}

impl std::fmt::Display for Opening {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Opening::Single => "single",
            Opening::Pair => "pair",
        })
    }
}

/// Probability that 1-based token `j` joins the open `span`:
/// the product of `sigmoid(d_j - d_k)` over every `k` in the span.
pub fn membership_prob<T: Scalar>(d: &[T], span: Span, j: usize) -> Result<T> {
    if span.end > d.len() || j == 0 || j > d.len() {
        return Err(Error::Contract(format!(
            "membership test of token {j} against {span} in a sentence of {}",
            d.len()
        )));
    }
    if j != span.end + 1 {
        return Err(Error::Contract(format!("token {j} does not follow span {span}")));
    }
    let dj = d[j - 1];
    Ok(span.indices().map(|k| sigmoid(dj - d[k])).fold(T::one(), |acc, p| acc * p))
}

/// Exhaustive left-to-right phrase partition of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSegmentation<T> {
    pub spans: Vec<Span>,
    /// Membership probability each token was admitted with; phrase openers get 1.
    pub membership: Vec<T>,
}

impl<T: Scalar> PhraseSegmentation<T> {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }
}

/// Greedy segmentation: a token joins the open phrase iff its membership
/// probability is strictly above `lambda`.
pub fn segment_phrases<T: Scalar>(d: &[T], lambda: f64) -> PhraseSegmentation<T> {
    segment_phrases_with(d, lambda, Opening::Single)
}

pub fn segment_phrases_with<T: Scalar>(d: &[T], lambda: f64, opening: Opening) -> PhraseSegmentation<T> {
    let n = d.len();
    let threshold = T::lit(lambda);
    let mut spans = Vec::new();
    let mut membership = vec![T::one(); n];
    let mut start = 1;
    let mut j = 2;
    if opening == Opening::Pair && n >= 2 {
        membership[1] = membership_prob(d, Span::singleton(1), 2).expect("in range");
        j = 3;
    }
    while j <= n {
        let open = Span::new(start, j - 1);
        let p = membership_prob(d, open, j).expect("in range");
        if p > threshold {
            membership[j - 1] = p;
            j += 1;
            continue;
        }
        spans.push(open);
        start = j;
        j += 1;
        if opening == Opening::Pair && j <= n {
            membership[j - 1] = membership_prob(d, Span::singleton(start), j).expect("in range");
            j += 1;
        }
    }
    if n > 0 {
        spans.push(Span::new(start, n));
    }
    PhraseSegmentation { spans, membership }
}

/// Segmentation fixed to `spans`, with membership probabilities re-read
/// from `d` along each span.
pub fn segmentation_along<T: Scalar>(d: &[T], spans: &[Span]) -> Result<PhraseSegmentation<T>> {
    if !crate::span::is_partition(spans, d.len()) {
        return Err(Error::Alignment(format!(
            "spans do not partition a sentence of {} tokens",
            d.len()
        )));
    }
    let mut membership = vec![T::one(); d.len()];
    for span in spans {
        for j in span.start + 1..=span.end {
            membership[j - 1] = membership_prob(d, Span::new(span.start, j - 1), j)?;
        }
    }
    Ok(PhraseSegmentation {
        spans: spans.to_vec(),
        membership,
    })
}

/// Gold distances and the gold lowest-constituent segmentation for a
/// sentence of `n` tokens.
pub fn inject_gold<T: Scalar>(gold: &GoldSyntax, n: usize) -> Result<(Vec<T>, PhraseSegmentation<T>)> {
    if gold.len() != n {
        return Err(Error::Alignment(format!(
            "gold annotation covers {} tokens, sentence has {n}",
            gold.len()
        )));
    }
    let d: Vec<T> = gold.distances.iter().map(|&x| T::lit(x)).collect();
    let seg = segmentation_along(&d, &gold.spans)?;
    Ok((d, seg))
}

/// Graph handles for the two contexts of one sentence, trimmed to its real tokens.
#[derive(Clone, Copy, Debug)]
pub struct SyntacticContexts {
    pub word: Var,
    pub phrasal: Var,
    /// `[3]` mixture weights over layers `l-1`, `l`, `l+1`.
    pub alphas: Var,
}

/// One pooled phrase.
#[derive(Clone, Copy, Debug)]
pub struct PhraseEmbedding {
    pub span: Span,
    /// `[1×d_model]`
    pub embedding: Var,
    /// `[1×|span|]` attention over the span's tokens.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct SyntaxModule {
    layer: usize,
    alpha_logits: ParamId,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    proj_weight: ParamId,
    proj_bias: ParamId,
}

fn alpha_logits(init: [f64; 3]) -> Result<Vec<f64>> {
    if init.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::Config(format!("alpha init {init:?} must be positive")));
    }
    let total: f64 = init.iter().sum();
    Ok(init.iter().map(|&a| (a / total).ln()).collect())
}

impl SyntaxModule {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        d_model: usize,
        layer: usize,
        alpha_init: [f64; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let logits = alpha_logits(alpha_init)?;
        let alpha_logits = store.add(
            "syntax.alpha_logits",
            Tensor::from_parts(vec![3], logits.into_iter().map(T::lit).collect()),
        )?;
        let k = DISTANCE_KERNEL_WIDTH;
        let conv_kernel = store.add(
            "syntax.conv.kernel",
            Tensor::uniform(&[k, d_model, d_model], 1.0 / ((k * d_model) as f64).sqrt(), rng),
        )?;
        let conv_bias = store.add("syntax.conv.bias", Tensor::zeros(&[d_model]))?;
        let proj_weight = store.add(
            "syntax.proj.weight",
            Tensor::uniform(&[d_model, 1], 1.0 / (d_model as f64).sqrt(), rng),
        )?;
        let proj_bias = store.add("syntax.proj.bias", Tensor::zeros(&[1]))?;
        Ok(SyntaxModule {
            layer,
            alpha_logits,
            conv_kernel,
            conv_bias,
            proj_weight,
            proj_bias,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, d_model: usize, layer: usize) -> Result<Self> {
        let k = DISTANCE_KERNEL_WIDTH;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != shape {
                return Err(Error::Integrity(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        Ok(SyntaxModule {
            layer,
            alpha_logits: get("syntax.alpha_logits", &[3])?,
            conv_kernel: get("syntax.conv.kernel", &[k, d_model, d_model])?,
            conv_bias: get("syntax.conv.bias", &[d_model])?,
            proj_weight: get("syntax.proj.weight", &[d_model, 1])?,
            proj_bias: get("syntax.proj.bias", &[1])?,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [
            self.alpha_logits,
            self.conv_kernel,
            self.conv_bias,
            self.proj_weight,
            self.proj_bias,
        ]
    }

    /// Current mixture weights, read from the store.
    pub fn alphas<T: Scalar>(&self, store: &ParamStore<T>) -> [T; 3] {
        let w = crate::tensor::softmax_values(store.value(self.alpha_logits).data());
        [w[0], w[1], w[2]]
    }

    /// Word context `hidden[l-1]` and phrasal context `Σ α_k hidden[l-1+k]`.
    pub fn build_contexts<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        acts: &LayerActivations,
    ) -> Result<SyntacticContexts> {
        let l = self.layer;
        if l < 2 || l + 1 >= acts.hidden.len() {
            return Err(Error::Config(format!(
                "structure layer {l} needs layers l-1..l+1 within 1..{}",
                acts.hidden.len() - 1
            )));
        }
        let rows: Vec<usize> = (0..acts.len).collect();
        let mut trimmed = Vec::with_capacity(3);
        for k in 0..3 {
            let h = acts.hidden[l - 1 + k];
            trimmed.push(if g.value(h).rows() == acts.len {
                h
            } else {
                g.select_rows(h, &rows)?
            });
        }
        let logits = g.param(store, self.alpha_logits);
        let alphas = g.softmax(logits)?;
        let mut terms = Vec::with_capacity(3);
        for (k, &h) in trimmed.iter().enumerate() {
            let a = g.index(alphas, k)?;
            terms.push(g.mul(h, a)?);
        }
        let phrasal = g.add_n(&terms)?;
        Ok(SyntacticContexts {
            word: trimmed[0],
            phrasal,
            alphas,
        })
    }

    /// Per-token distances `[n×1]`: kernel-3 convolution, relu, linear to a scalar.
    pub fn distance_head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, word_ctx: Var) -> Result<Var> {
        let kernel = g.param(store, self.conv_kernel);
        let bias = g.param(store, self.conv_bias);
        let conv = g.conv1d(word_ctx, kernel)?;
        let conv = g.add(conv, bias)?;
        let hidden = g.relu(conv);
        let w = g.param(store, self.proj_weight);
        let b = g.param(store, self.proj_bias);
        let out = g.matmul(hidden, w)?;
        g.add(out, b)
    }
}

/// Pools each phrase with attention `softmax(d_i · p*_i)` over its tokens.
/// `distances` is `[n×1]`; membership probabilities enter as constants.
pub fn phrase_embed<T: Scalar>(
    g: &mut Graph<T>,
    seg: &PhraseSegmentation<T>,
    distances: Var,
    word_ctx: Var,
) -> Result<Vec<PhraseEmbedding>> {
    let n = g.value(word_ctx).rows();
    if seg.len() != n || g.value(distances).numel() != n || !crate::span::is_partition(&seg.spans, n) {
        return Err(Error::Alignment(format!(
            "segmentation of {} tokens applied to a context of {n} rows",
            seg.len()
        )));
    }
    seg.spans
        .iter()
        .map(|&span| {
            let idx: Vec<usize> = span.indices().collect();
            let w = idx.len();
            let d = g.select_rows(distances, &idx)?;
            let d = g.reshape(d, &[1, w])?;
            let p: Vec<T> = idx.iter().map(|&i| seg.membership[i]).collect();
            let p = g.constant(Tensor::from_parts(vec![1, w], p));
            let scores = g.mul(d, p)?;
            let weights = g.softmax(scores)?;
            let rows = g.select_rows(word_ctx, &idx)?;
            let embedding = g.matmul(weights, rows)?;
            Ok(PhraseEmbedding {
                span,
                embedding,
                weights,
            })
        })
        .collect()
}

/// Tab-separated `token:distance` pairs, then ` ||| `, then the spans.
pub fn format_induction<T: Scalar>(tokens: &[String], d: &[T], spans: &[Span]) -> String {
    let pairs: Vec<String> = tokens
        .iter()
        .zip(d)
        .map(|(t, v)| format!("{t}:{:.2}", v.as_f64()))
        .collect();
    let spans: Vec<String> = spans.iter().map(Span::to_string).collect();
    format!("{} ||| {}", pairs.join("\t"), spans.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spans(pairs: &[(usize, usize)]) -> Vec<Span> {
        pairs.iter().map(|&(s, e)| Span::new(s, e)).collect()
    }

    #[test]
    fn membership_examples() {
        let d = [1.0, 2.0, 0.5];
        assert_eq!(membership_prob(&[3.0, 3.0], Span::singleton(1), 2).unwrap(), 0.5);
        assert_abs_diff_eq!(membership_prob(&d, Span::singleton(1), 2).unwrap(), 0.731_058_578_6, epsilon = 1e-9);
        let p = membership_prob(&d, Span::new(1, 2), 3).unwrap();
        let oracle = (1.0 / (1.0 + 0.5f64.exp())) * (1.0 / (1.0 + 1.5f64.exp()));
        assert_abs_diff_eq!(p, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 0.06888, epsilon = 1e-5);
        assert!(matches!(membership_prob(&d, Span::new(1, 3), 4), Err(Error::Contract(_))));
        assert!(matches!(membership_prob(&d, Span::new(1, 1), 3), Err(Error::Contract(_))));
    }

    #[test]
    fn segmentation_examples() {
        let d = [1.0, 2.0, 0.5];
        let seg = segment_phrases(&d, 0.5);
        assert_eq!(seg.spans, spans(&[(1, 2), (3, 3)]));
        assert_eq!(seg.membership[0], 1.0);
        assert_abs_diff_eq!(seg.membership[1], 0.731_058_578_6, epsilon = 1e-9);
        assert_eq!(seg.membership[2], 1.0);
        assert_eq!(segment_phrases(&d, 1.0).spans, spans(&[(1, 1), (2, 2), (3, 3)]));
        assert_eq!(segment_phrases(&d, 0.0).spans, spans(&[(1, 3)]));
        assert_eq!(segment_phrases(&[0.3], 0.5).spans, spans(&[(1, 1)]));
        assert!(segment_phrases::<f64>(&[], 0.5).spans.is_empty());
    }

    #[test]
    fn pair_opening_joins_first_two() {
        let d = [2.0, 1.0, 0.0, 5.0];
        assert_eq!(segment_phrases(&d, 0.5).spans, spans(&[(1, 1), (2, 2), (3, 4)]));
        assert_eq!(
            segment_phrases_with(&d, 0.5, Opening::Pair).spans,
            spans(&[(1, 2), (3, 4)])
        );
        assert_eq!(segment_phrases_with(&[1.0], 0.5, Opening::Pair).spans, spans(&[(1, 1)]));
    }

    #[test]
    fn later_phrases_can_cross_coarser_boundaries() {
        // A rejection at the higher threshold restarts the open phrase, and the
        // shorter phrase admits the next token more easily.
        let d = [0.0, 10.0, 10.0, 10.1];
        assert_eq!(segment_phrases(&d, 0.3).spans, spans(&[(1, 3), (4, 4)]));
        assert_eq!(segment_phrases(&d, 0.5).spans, spans(&[(1, 2), (3, 4)]));
    }

    #[test]
    fn phrase_attention_example() {
        let mut g = Graph::<f64>::new();
        let d = [1.0, 2.0];
        let seg = segment_phrases(&d, 0.5);
        assert_eq!(seg.spans, spans(&[(1, 2)]));
        let dist = g.input(Tensor::matrix(2, 1, d.to_vec()).unwrap());
        let ctx = g.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let phrases = phrase_embed(&mut g, &seg, dist, ctx).unwrap();
        let u = g.value(phrases[0].weights).data().to_vec();
        let score = 2.0 * seg.membership[1];
        let z = 1f64.exp() + score.exp();
        assert_abs_diff_eq!(u[0], 1f64.exp() / z, epsilon = 1e-12);
        assert_abs_diff_eq!(u[0] + u[1], 1.0, epsilon = 1e-12);
        assert_eq!(g.value(phrases[0].embedding).data(), &u[..]);

        // Membership rounded to three places.
        let rounded = PhraseSegmentation {
            spans: seg.spans.clone(),
            membership: vec![1.0, 0.731],
        };
        let phrases = phrase_embed(&mut g, &rounded, dist, ctx).unwrap();
        let u = g.value(phrases[0].weights).data();
        assert_abs_diff_eq!(u[0], 0.3866, epsilon = 1e-4);
        assert_abs_diff_eq!(u[1], 0.6134, epsilon = 1e-4);
    }

    #[test]
    fn singleton_phrase_copies_context_row() {
        let mut g = Graph::<f64>::new();
        let seg = segment_phrases(&[0.0, -1.0], 0.5);
        assert_eq!(seg.spans, spans(&[(1, 1), (2, 2)]));
        let dist = g.input(Tensor::matrix(2, 1, vec![0.0, -1.0]).unwrap());
        let ctx = g.input(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let phrases = phrase_embed(&mut g, &seg, dist, ctx).unwrap();
        assert_eq!(g.value(phrases[1].weights).data(), &[1.0]);
        assert_eq!(g.value(phrases[1].embedding).data(), &[3.0, 4.0]);
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let seg = PhraseSegmentation {
            spans: spans(&[(1, 3)]),
            membership: vec![1.0, 0.5, 0.25],
        };
        let dist = g.input(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
        let ctx = g.input(Tensor::zeros(&[3, 2]));
        let phrases = phrase_embed(&mut g, &seg, dist, ctx).unwrap();
        for &u in g.value(phrases[0].weights).data() {
            assert_abs_diff_eq!(u, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gold_injection_follows_lowest_constituents() {
        let tree = crate::treebank::parse_ptb_bracketed("(S (NP the dog) (VP barks))").unwrap();
        let deps = crate::treebank::DependencyGraph::new(vec![2, 3, 0]).unwrap();
        let gold = GoldSyntax::new(tree, Some(deps), Default::default()).unwrap();
        let (d, seg) = inject_gold::<f64>(&gold, 3).unwrap();
        assert_eq!(d, gold.distances);
        assert_eq!(seg.spans, spans(&[(1, 2), (3, 3)]));
        assert!(matches!(inject_gold::<f64>(&gold, 4), Err(Error::Alignment(_))));
    }

    #[test]
    fn induction_line_format() {
        let toks: Vec<String> = ["the", "dog", "barks"].iter().map(|s| s.to_string()).collect();
        let line = format_induction(&toks, &[1.0, 2.0, 0.5], &spans(&[(1, 2), (3, 3)]));
        assert_eq!(line, "the:1.00\tdog:2.00\tbarks:0.50 ||| (1,2) (3,3)");
    }

    #[test]
    fn alpha_logits_reproduce_init() {
        let logits = alpha_logits(DEFAULT_ALPHA_INIT).unwrap();
        let w = crate::tensor::softmax_values(&logits);
        for (a, b) in w.iter().zip(DEFAULT_ALPHA_INIT) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(alpha_logits([0.5, 0.5, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn segmentation_partitions(d in prop::collection::vec(-3.0f64..3.0, 1..13), lambda in 0.0f64..=1.0) {
            let seg = segment_phrases(&d, lambda);
            prop_assert!(crate::span::is_partition(&seg.spans, d.len()));
            for &p in &seg.membership {
                prop_assert!(p > 0.0 && p <= 1.0);
            }
        }

        #[test]
        fn higher_threshold_never_extends_first_phrase(d in prop::collection::vec(-3.0f64..3.0, 1..13), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let coarse = segment_phrases(&d, lo).spans[0];
            let fine = segment_phrases(&d, hi).spans[0];
            prop_assert!(coarse.contains(&fine));
        }

        #[test]
        fn pairs_rise_within_phrase(d in prop::collection::vec(-3.0f64..3.0, 2..13)) {
            for span in segment_phrases(&d, 0.5).spans.iter().filter(|s| s.len() == 2) {
                prop_assert!(d[span.start - 1] < d[span.end - 1]);
            }
        }
    }
}
