use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, transpose};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs holds a single element
    Scalar,
    /// rhs matches the last extent of lhs
    Row,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Index(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    AddN(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    param: Option<ParamId>,
}

/// Append-only computation tape. Node order is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_with(store, id, true)
    }

    /// Like [`Graph::param`]; `trainable = false` loads the value without a gradient slot.
    pub fn param_with(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), trainable);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// Adds every parameter leaf's accumulated gradient into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &self.nodes[v.0].grad {
                let dst = &mut store.get_mut(id).grad;
                for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    /// Whether each relu input element is positive, in graph order. Two
    /// evaluations with different patterns lie on opposite sides of a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > T::zero())),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_t")?;
        let (n, k2) = self.value(b).dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let out = transpose(self.value(x).data(), r, c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if self.value(b).numel() == self.value(a).last_dim()
            && sb.last() == sa.last()
            && sb.iter().rev().skip(1).all(|&e| e == 1)
        {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, kind: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b).data();
        let d = va.last_dim();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => vb[i],
                    Broadcast::Scalar => vb[0],
                    Broadcast::Row => vb[i % d],
                };
                f(x, y)
            })
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may be a single element or a row matching `a`'s last extent.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("add", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b, kind), rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("mul", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b, kind), rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.affine(x, factor, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last extent, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|e| e.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalizes each last-extent slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dt = T::lit(d as f64);
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Same-padded cross-correlation along the token axis.
    /// `x: [n×c_in]`, `kernel: [k×c_in×c_out]` with odd `k`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (n, c_in) = self.value(x).dims2("conv1d")?;
        let (k, kc, c_out) = match self.shape(kernel) {
            &[k, kc, co] => (k, kc, co),
            other => return Err(Error::shape("conv1d", self.shape(x), other)),
        };
        if kc != c_in {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(kernel)));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {k}")));
        }
        let half = k / 2;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); n * c_out];
        for t in 0..n {
            let out_row = &mut out[t * c_out..(t + 1) * c_out];
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(half).filter(|&s| s < n) else {
                    continue;
                };
                gemm_nn(
                    &xv[src * c_in..(src + 1) * c_in],
                    &kv[j * c_in * c_out..(j + 1) * c_in * c_out],
                    out_row,
                    1,
                    c_in,
                    c_out,
                );
            }
        }
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c_out], out),
            Op::Conv1d { x, kernel },
            rg,
        ))
    }

    /// Gathers rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2("select_rows")?;
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no indices".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", self.shape(x), &[bad]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Picks one element (flat index) as a one-element tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if i >= n {
            return Err(Error::shape("index", self.shape(x), &[i]));
        }
        let out = Tensor::scalar(self.value(x).data()[i]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Index(x, i), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Mean over rows of a 2-D tensor, giving `[1×cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rt = T::lit(r as f64);
        out.iter_mut().for_each(|o| *o /= rt);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), rg))
    }

    /// Sum of same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![T::zero(); self.value(first).numel()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::shape("add_n", &shape, self.shape(x)));
            }
            for (a, &v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += v;
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::from_parts(shape, acc), Op::AddN(xs.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `logits: [m×V]` against one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2("cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::Contract("cross-entropy over zero targets".into()));
        }
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|e| e.is_nan()) {
            return Err(Error::Numeric("NaN logits".into()));
        }
        let mut probs = lv.to_vec();
        let mut total = T::zero();
        for (row, (&t, lrow)) in probs.chunks_mut(v).zip(targets.iter().zip(lv.chunks(v))) {
            let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + lrow.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - lrow[t];
            softmax_in_place(row);
        }
        let loss = total / T::lit(m as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        );
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    // ---- backward ----

    /// Reverse sweep from a one-element `loss`. Gradients of `requires_grad`
    /// leaves accumulate across calls until [`Graph::zero_grad`].
    ///
    /// Returns the number of nodes visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(visited)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = out.last_dim();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    send(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(*a).data(), g, &mut db, m, k, n);
                    send(*b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = out.last_dim();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g, self.value(*b).data(), &mut da, m, n, k);
                    send(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g, self.value(*a).data(), &mut db, m, n, k);
                    send(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims(out);
                send(*x, transpose(g, r, c));
            }
            Op::Add(a, b, kind) => {
                send(*a, g.to_vec());
                if needs(*b) {
                    send(*b, reduce_broadcast(g, *kind, self.value(*b).numel()));
                }
            }
            Op::Mul(a, b, kind) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let d = out.last_dim();
                if needs(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| {
                            gj * match kind {
                                Broadcast::Same => bv[j],
                                Broadcast::Scalar => bv[0],
                                Broadcast::Row => bv[j % d],
                            }
                        })
                        .collect();
                    send(*a, da);
                }
                if needs(*b) {
                    let prod: Vec<T> = g.iter().zip(av).map(|(&gj, &aj)| gj * aj).collect();
                    send(*b, reduce_broadcast(&prod, *kind, bv.len()));
                }
            }
            Op::Affine(x, scale) => send(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::Sigmoid(x) => send(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&gj, &y)| gj * y * (T::one() - y))
                    .collect(),
            ),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(self.value(*x).data())
                    .map(|(&gj, &v)| if v > T::zero() { gj } else { T::zero() })
                    .collect(),
            ),
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(d).zip(out.data().chunks(d)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(grow.iter().zip(yrow).map(|(&gj, &y)| y * (gj - dot)));
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                if needs(*x) {
                    let dt = T::lit(d as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>();
                        dx.extend(
                            dh.iter()
                                .zip(hrow)
                                .map(|(&a, &h)| is / dt * (dt * a - sum_dh - h * sum_dh_h)),
                        );
                    }
                    send(*x, dx);
                }
                if needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &a), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o += a * h;
                        }
                    }
                    send(*gain, dg);
                }
                if needs(*bias) {
                    send(*bias, reduce_broadcast(g, Broadcast::Row, d));
                }
            }
            Op::Conv1d { x, kernel } => {
                let (n, c_in) = dims(self.value(*x));
                let k = self.shape(*kernel)[0];
                let c_out = out.last_dim();
                let half = k / 2;
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let mut dx = needs(*x).then(|| vec![T::zero(); n * c_in]);
                let mut dk = needs(*kernel).then(|| vec![T::zero(); k * c_in * c_out]);
                for t in 0..n {
                    let grow = &g[t * c_out..(t + 1) * c_out];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(half).filter(|&s| s < n) else {
                            continue;
                        };
                        let kslab = &kv[j * c_in * c_out..(j + 1) * c_in * c_out];
                        if let Some(dx) = dx.as_mut() {
                            gemm_nt(grow, kslab, &mut dx[src * c_in..(src + 1) * c_in], 1, c_out, c_in);
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm_tn(
                                &xv[src * c_in..(src + 1) * c_in],
                                grow,
                                &mut dk[j * c_in * c_out..(j + 1) * c_in * c_out],
                                1,
                                c_in,
                                c_out,
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::SelectRows { x, rows } => {
                let c = out.last_dim();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (grow, &r) in g.chunks(c).zip(rows) {
                    for (d, &v) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                send(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims(self.value(*x));
                let len = out.last_dim();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Index(x, idx) => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                dx[*idx] = g[0];
                send(*x, dx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::MeanRows(x) => {
                let (r, _) = dims(self.value(*x));
                let rt = T::lit(r as f64);
                let row: Vec<T> = g.iter().map(|&v| v / rt).collect();
                send(*x, row.iter().copied().cycle().take(row.len() * r).collect());
            }
            Op::AddN(xs) => {
                for &x in xs {
                    send(x, g.to_vec());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dl[row * v + t] -= scale;
                }
                send(*logits, dl);
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
        }
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn reduce_broadcast<T: Scalar>(g: &[T], kind: Broadcast, target_len: usize) -> Vec<T> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().copied().sum::<T>()],
        Broadcast::Row => {
            let mut out = vec![T::zero(); target_len];
            for row in g.chunks(target_len) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
