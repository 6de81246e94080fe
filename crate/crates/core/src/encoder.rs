//! Transformer encoder: embeddings, multi-head self-attention blocks, and the
//! weight-tied masked-LM projection.
//!
//! Each block computes `out = LN₂(FFN(LN₁(E)) + E)` where `E` is the projected
//! multi-head attention output over the block input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive logit for padded key positions.
pub const PAD_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Middle layer `l`; the syntax module reads hidden layers `l-1`, `l`, `l+1`.
    pub structure_layer: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 64,
            vocab_size,
            structure_layer: 3,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return fail("encoder extents must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(1 < self.structure_layer && self.structure_layer < self.n_layers) {
            return fail(format!(
                "structure layer {} must satisfy 1 < l < n_layers ({})",
                self.structure_layer, self.n_layers
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Graph handles for one sentence's forward pass.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    /// `hidden[0]` is the embedding output, `hidden[l]` the output of block `l`.
    pub hidden: Vec<Var>,
    /// `attention[l-1][head]` is block `l`'s `[n×n]` attention map.
    pub attention: Vec<Vec<Var>>,
    /// Number of real (unpadded) tokens.
    pub len: usize,
}

impl LayerActivations {
    pub fn top(&self) -> Var {
        *self.hidden.last().expect("at least the embedding layer")
    }
}

/// Detached copies of activations, trimmed to the real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationValues<T> {
    pub hidden: Vec<Tensor<T>>,
    pub attention: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ActivationValues<T> {
    pub fn from_graph(g: &Graph<T>, acts: &LayerActivations) -> Self {
        let trim = |t: &Tensor<T>, rows: usize, cols: usize| {
            let c = t.last_dim();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                data.extend_from_slice(&t.data()[i * c..i * c + cols]);
            }
            Tensor::from_parts(vec![rows, cols], data)
        };
        let n = acts.len;
        ActivationValues {
            hidden: acts
                .hidden
                .iter()
                .map(|&h| {
                    let t = g.value(h);
                    trim(t, n, t.last_dim())
                })
                .collect(),
            attention: acts
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&a| trim(g.value(a), n, n)).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    mlm_bias: ParamId,
}

fn linear_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Standard deviation of the embedding tables at initialization.
const EMBED_INIT_STD: f64 = 0.02;

impl Encoder {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<T: Scalar, R: Rng>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb_bound = EMBED_INIT_STD * 3f64.sqrt();
        let token_emb = store.add("embed.token", Tensor::uniform(&[config.vocab_size, d], emb_bound, rng))?;
        let pos_emb = store.add("embed.position", Tensor::uniform(&[config.max_len, d], emb_bound, rng))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 1..=config.n_layers {
            let mut lin = |name: &str, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId)> {
                let w = store.add(
                    format!("layer{l}.{name}.weight"),
                    Tensor::uniform(&[fan_in, fan_out], linear_bound(fan_in), rng),
                )?;
                let b = store.add(format!("layer{l}.{name}.bias"), Tensor::zeros(&[fan_out]))?;
                Ok((w, b))
            };
            let (wq, bq) = lin("attn.query", d, d)?;
            let (wk, bk) = lin("attn.key", d, d)?;
            let (wv, bv) = lin("attn.value", d, d)?;
            let (wo, bo) = lin("attn.output", d, d)?;
            let (ff_w1, ff_b1) = lin("ff.inner", d, config.d_ff)?;
            let (ff_w2, ff_b2) = lin("ff.outer", config.d_ff, d)?;
            let mut ln = |name: &str| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.add(format!("layer{l}.{name}.gain"), Tensor::full(&[d], T::one()))?,
                    store.add(format!("layer{l}.{name}.bias"), Tensor::zeros(&[d]))?,
                ))
            };
            let (ln1_gain, ln1_bias) = ln("norm1")?;
            let (ln2_gain, ln2_bias) = ln("norm2")?;
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gain,
                ln1_bias,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
                ln2_gain,
                ln2_bias,
            });
        }
        let mlm_bias = store.add("mlm.bias", Tensor::zeros(&[config.vocab_size]))?;
        Ok(Encoder {
            config,
            token_emb,
            pos_emb,
            layers,
            mlm_bias,
        })
    }

    /// Re-binds to parameters already present in `store` (e.g. after loading a checkpoint).
    pub fn bind<T: Scalar>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != shape {
                return Err(Error::Integrity(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 1..=config.n_layers {
            let w = |n: &str, i: usize, o: usize| get(format!("layer{l}.{n}.weight"), &[i, o]);
            let b = |n: &str, o: usize| get(format!("layer{l}.{n}.bias"), &[o]);
            layers.push(LayerParams {
                wq: w("attn.query", d, d)?,
                bq: b("attn.query", d)?,
                wk: w("attn.key", d, d)?,
                bk: b("attn.key", d)?,
                wv: w("attn.value", d, d)?,
                bv: b("attn.value", d)?,
                wo: w("attn.output", d, d)?,
                bo: b("attn.output", d)?,
                ln1_gain: get(format!("layer{l}.norm1.gain"), &[d])?,
                ln1_bias: b("norm1", d)?,
                ff_w1: w("ff.inner", d, config.d_ff)?,
                ff_b1: b("ff.inner", config.d_ff)?,
                ff_w2: w("ff.outer", config.d_ff, d)?,
                ff_b2: b("ff.outer", d)?,
                ln2_gain: get(format!("layer{l}.norm2.gain"), &[d])?,
                ln2_bias: b("norm2", d)?,
            });
        }
        Ok(Encoder {
            token_emb: get("embed.token".into(), &[config.vocab_size, d])?,
            pos_emb: get("embed.position".into(), &[config.max_len, d])?,
            mlm_bias: get("mlm.bias".into(), &[config.vocab_size])?,
            layers,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameters of blocks `1..=layer` plus the embeddings.
    pub fn params_up_to(&self, layer: usize) -> Vec<ParamId> {
        let mut out = vec![self.token_emb, self.pos_emb];
        for lp in &self.layers[..layer.min(self.layers.len())] {
            out.extend([
                lp.wq, lp.bq, lp.wk, lp.bk, lp.wv, lp.bv, lp.wo, lp.bo, lp.ln1_gain, lp.ln1_bias, lp.ff_w1,
                lp.ff_b1, lp.ff_w2, lp.ff_b2, lp.ln2_gain, lp.ln2_bias,
            ]);
        }
        out
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_emb
    }

    pub fn mlm_bias(&self) -> ParamId {
        self.mlm_bias
    }

    /// Token plus learned absolute position embeddings, `[n×d_model]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Truncation {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        let tok = g.param(store, self.token_emb);
        let pos = g.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = g.select_rows(tok, ids)?;
        let p = g.select_rows(pos, &positions)?;
        g.add(t, p)
    }

    /// One block over `h: [n×d_model]`. Keys at positions `>= valid_len` are masked out.
    /// Returns the block output and one attention map per head.
    pub fn attention_layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: usize,
        h: Var,
        valid_len: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let lp = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no encoder block {layer}")))?;
        let (n, d) = g.value(h).dims2("attention_layer")?;
        if d != self.config.d_model {
            return Err(Error::shape("attention_layer", g.shape(h), &[n, self.config.d_model]));
        }
        let dropout = self.config.dropout;
        let linear = |g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.matmul(x, wv)?;
            g.add(y, bv)
        };
        let q = linear(g, h, lp.wq, lp.bq)?;
        let k = linear(g, h, lp.wk, lp.bk)?;
        let v = linear(g, h, lp.wv, lp.bv)?;
        let mask = (valid_len < n).then(|| {
            let row = (0..n)
                .map(|j| if j < valid_len { T::zero() } else { T::lit(PAD_LOGIT) })
                .collect();
            g.constant(Tensor::from_parts(vec![1, n], row))
        });
        let dk = self.config.head_dim();
        let inv_sqrt = T::lit(1.0 / (dk as f64).sqrt());
        let mut maps = Vec::with_capacity(self.config.n_heads);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let qh = g.slice_cols(q, head * dk, dk)?;
            let kh = g.slice_cols(k, head * dk, dk)?;
            let vh = g.slice_cols(v, head * dk, dk)?;
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, inv_sqrt);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            maps.push(attn);
            let attn = match rng.as_deref_mut() {
                Some(r) => g.dropout(attn, dropout, r),
                None => attn,
            };
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let e = linear(g, cat, lp.wo, lp.bo)?;
        let (g1, b1) = (g.param(store, lp.ln1_gain), g.param(store, lp.ln1_bias));
        let eps = T::lit(LAYER_NORM_EPS);
        let normed = g.layer_norm(e, g1, b1, eps)?;
        let inner = linear(g, normed, lp.ff_w1, lp.ff_b1)?;
        let inner = g.relu(inner);
        let ff = linear(g, inner, lp.ff_w2, lp.ff_b2)?;
        let ff = match rng {
            Some(r) => g.dropout(ff, dropout, r),
            None => ff,
        };
        let res = g.add(ff, e)?;
        let (g2, b2) = (g.param(store, lp.ln2_gain), g.param(store, lp.ln2_bias));
        let out = g.layer_norm(res, g2, b2, eps)?;
        Ok((out, maps))
    }

    /// Full forward pass over one (possibly padded) id row.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        valid_len: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LayerActivations> {
        if valid_len == 0 || valid_len > ids.len() {
            return Err(Error::Contract(format!(
                "valid length {valid_len} outside 1..={}",
                ids.len()
            )));
        }
        let mut h = self.embed(g, store, ids)?;
        if let Some(r) = rng.as_deref_mut() {
            h = g.dropout(h, self.config.dropout, r);
        }
        let mut hidden = vec![h];
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in 0..self.layers.len() {
            let (out, maps) = self.attention_layer(g, store, layer, h, valid_len, rng.as_deref_mut())?;
            hidden.push(out);
            attention.push(maps);
            h = out;
        }
        Ok(LayerActivations {
            hidden,
            attention,
            len: valid_len,
        })
    }

    /// Encodes every row of a padded batch into one shared graph.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &TokenBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<LayerActivations>> {
        let width = batch.width();
        if batch.ids.iter().any(|r| r.len() != width) || batch.lengths.len() != batch.ids.len() {
            return Err(Error::Contract("batch rows padded inconsistently".into()));
        }
        batch
            .ids
            .iter()
            .zip(&batch.lengths)
            .map(|(ids, &len)| self.forward(g, store, ids, len, rng.as_deref_mut()))
            .collect()
    }

    /// Weight-tied vocabulary logits at `positions` of `h_top`, `[|positions|×V]`.
    pub fn mlm_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_top: Var,
        positions: &[usize],
    ) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::Contract("masked-LM logits need at least one position".into()));
        }
        let rows = g.select_rows(h_top, positions)?;
        let emb = g.param(store, self.token_emb);
        let logits = g.matmul_t(rows, emb)?;
        let bias = g.param(store, self.mlm_bias);
        g.add(logits, bias)
    }
}
