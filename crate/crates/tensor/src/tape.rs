//! Reverse-mode gradient tape.
//!
//! Every tensor produced during a forward pass lives on a [`Tape`] and is
//! addressed by a [`Var`]. Nodes are appended in evaluation order, so inputs
//! always precede outputs and the reverse pass is a single backwards sweep.
//! An op is recorded (with whatever activations its backward rule needs)
//! only when at least one of its inputs requires a gradient.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept a
//! right-hand side whose shape equals the left-hand side, is a trailing
//! suffix of it (`[m, n] + [n]`), or holds a single element.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, AttentionDims, KeyIndex};
use crate::scalar::{lit, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Clamp used by [`Tape::inverse_sigmoid`]; inputs are pulled into
/// `[EPS, 1 - EPS]` so points on the range boundary stay finite.
pub const INVERSE_SIGMOID_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// User-defined differentiable op. The caller computes the forward value;
/// the op only supplies the vector-Jacobian product.
pub trait CustomOp<S: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means
    /// the input receives no gradient through this op.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &[S])
        -> Vec<Option<Vec<S>>>;

    /// Bytes of activations the op keeps alive for its backward pass.
    fn saved_bytes(&self) -> usize {
        0
    }
}

struct AttentionRecord<S> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    index: KeyIndex,
    probs: Vec<S>,
}

enum Op<S: Scalar> {
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Concat { inputs: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Slice { a: Var, start: usize, dim: usize, outer: usize, inner: usize },
    Reshape { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Relu { a: Var },
    Sigmoid { a: Var },
    InvSigmoid { a: Var },
    Clamp { a: Var, lo: S, hi: S },
    Softmax { a: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<S>, rstd: Vec<S> },
    Attention(Box<AttentionRecord<S>>),
    Sum { a: Var },
    Mean { a: Var },
    MeanAxis { a: Var, outer: usize, dim: usize, inner: usize },
    L1 { a: Var, b: Var },
    Cosine { a: Var, b: Var, cols: usize, eps: S },
    RepeatRows { a: Var, times: usize, cols: usize },
    IndexRows { a: Var, index: Vec<usize>, cols: usize },
    SineEmbed { a: Var, dim: usize, temperature: f64 },
    Bilinear { map: Var, coords: Var, h: usize, w: usize },
    Focal { logits: Var, targets: Vec<usize>, weights: Vec<S>, gamma: S },
    Bce { logits: Var, targets: Vec<S> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Option<Op<S>>,
    requires_grad: bool,
}

/// Allocation bookkeeping for the benchmark: every node value and every
/// saved activation is counted once, at creation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub bytes: usize,
    pub nodes: usize,
    /// Largest single attention score matrix (elements, all heads) per label.
    pub peak_scores: BTreeMap<&'static str, usize>,
    /// Sum of attention score elements per label.
    pub total_scores: BTreeMap<&'static str, usize>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    stats: AllocStats,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs || numel(rhs) == 1 || (rhs.len() <= lhs.len() && lhs.ends_with(rhs))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn sine_freqs(dim: usize, temperature: f64) -> Vec<f64> {
    (0..dim / 2)
        .map(|p| 2.0 * PI / temperature.powf(2.0 * p as f64 / dim as f64))
        .collect()
}

/// Bilinear sample weights. Pixel `(col, row)` has its center at
/// `(col + 0.5, row + 0.5)`; corners outside the map read as zero.
struct Corners {
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

fn corners(u: f64, v: f64, h: usize, w: usize) -> Corners {
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let at = |cx: f64, cy: f64| -> Option<usize> {
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            None
        } else {
            Some(cy as usize * w + cx as usize)
        }
    };
    Corners {
        idx: [at(x0, y0), at(x0 + 1.0, y0), at(x0, y0 + 1.0), at(x0 + 1.0, y0 + 1.0)],
        fx: x - x0,
        fy: y - y0,
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stats: AllocStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> &AllocStats {
        &self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Saved softmax probabilities of an attention node, laid out per query
    /// as `[head][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Some(Op::Attention(rec)) => Some(&rec.probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Option<Op<S>>, saved: usize) -> Var {
        self.stats.bytes += (value.numel() + saved) * std::mem::size_of::<S>();
        self.stats.nodes += 1;
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None, 0)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Some(Op::MatMul { a, b, m, k, n }), 0))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let bd = self.data(b);
        let bl = bd.len();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        Ok((Tensor::new(sa.to_vec(), out)?, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, rg, Some(Op::Add { a, b }), 0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, rg, Some(Op::Sub { a, b }), 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, rg, Some(Op::Mul { a, b }), 0))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Some(Op::Scale { a, c }), 0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &d) in inputs.iter().zip(&sizes) {
                out.extend_from_slice(&self.data(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            sizes,
            outer,
            inner,
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, Some(op), 0))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.any_grad(&[a]);
        let op = Op::Slice {
            a,
            start,
            dim,
            outer,
            inner,
        };
        Ok(self.push(Tensor::new(oshape, out)?, rg, Some(op), 0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Some(Op::Reshape { a }), 0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid("transpose", format!("needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![cols, rows], out)?, rg, Some(Op::Transpose { a, rows, cols }), 0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S) -> (Tensor<S>, bool) {
        let t = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape");
        (t, self.any_grad(&[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, |x| if x > S::zero() { x } else { S::zero() });
        self.push(t, rg, Some(Op::Relu { a }), 0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, sigmoid);
        self.push(t, rg, Some(Op::Sigmoid { a }), 0)
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[1e-5, 1 - 1e-5]`.
    pub fn inverse_sigmoid(&mut self, a: Var) -> Var {
        let eps: S = lit(INVERSE_SIGMOID_EPS);
        let (t, rg) = self.unary(a, |x| {
            let x = x.max(eps).min(S::one() - eps);
            (x / (S::one() - x)).ln()
        });
        self.push(t, rg, Some(Op::InvSigmoid { a }), 0)
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let (t, rg) = self.unary(a, |x| x.max(lo).min(hi));
        self.push(t, rg, Some(Op::Clamp { a, lo, hi }), 0)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for j in 0..dim {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..dim {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Some(Op::Softmax { a, outer, dim, inner }), 0))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| invalid("layer-norm", "scalar input"))?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(mismatch("layer-norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / cols.max(1);
        let eps: S = lit(LAYER_NORM_EPS);
        let n: S = lit(cols as f64);
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![S::zero(); src.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let saved = if rg { xhat.len() + rstd.len() } else { 0 };
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            cols,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, Some(op), saved))
    }

    /// Multi-head scaled dot-product attention over rank-2 `q [Lq, D]`,
    /// `k [Lk, D]`, `v [Lk, D]`. A query with no visible keys outputs zeros.
    /// `label` tags the score matrix in [`AllocStats`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        index: KeyIndex,
        label: &'static str,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(mismatch("scaled-dot-attention", sq, sk));
        }
        if sv != sk {
            return Err(mismatch("scaled-dot-attention", sk, sv));
        }
        let dims = AttentionDims {
            queries: sq[0],
            keys: sk[0],
            dim: sq[1],
            heads,
        };
        if heads == 0 || dims.dim % heads != 0 {
            return Err(invalid(
                "scaled-dot-attention",
                format!("dimension {} not divisible into {heads} heads", dims.dim),
            ));
        }
        index
            .check(dims.queries, dims.keys)
            .map_err(|m| invalid("scaled-dot-attention", m))?;
        let (out, probs, _) =
            kernels::attention_forward(self.data(q), self.data(k), self.data(v), &dims, &index);
        let scores = probs.len();
        let peak = self.stats.peak_scores.entry(label).or_insert(0);
        *peak = (*peak).max(scores);
        *self.stats.total_scores.entry(label).or_insert(0) += scores;
        let shape = vec![dims.queries, dims.dim];
        let rg = self.any_grad(&[q, k, v]);
        let rec = AttentionRecord {
            q,
            k,
            v,
            heads,
            index,
            probs,
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, Some(Op::Attention(Box::new(rec))), scores))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Some(Op::Sum { a }), 0)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().copied().sum::<S>() / lit(d.len().max(1) as f64);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Some(Op::Mean { a }), 0)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("mean", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let inv: S = lit(1.0 / dim.max(1) as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(oshape, out)?, rg, Some(Op::MeanAxis { a, outer, dim, inner }), 0))
    }

    /// `Σ |a - b|` over all elements.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("L1-distance", self.shape(a), self.shape(b)));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), rg, Some(Op::L1 { a, b }), 0))
    }

    /// Row-wise cosine similarity along the last axis. Norms are smoothed as
    /// `sqrt(|x|² + eps)` so zero-length rows stay differentiable.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: S) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.is_empty() {
            return Err(mismatch("cosine", &shape, self.shape(b)));
        }
        let cols = *shape.last().expect("non-empty");
        let (da, db) = (self.data(a), self.data(b));
        let rows = da.len() / cols.max(1);
        let out: Vec<S> = (0..rows)
            .map(|r| {
                let (x, y) = (&da[r * cols..(r + 1) * cols], &db[r * cols..(r + 1) * cols]);
                let dot: S = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                let na = (x.iter().map(|&p| p * p).sum::<S>() + eps).sqrt();
                let nb = (y.iter().map(|&q| q * q).sum::<S>() + eps).sqrt();
                dot / (na * nb)
            })
            .collect();
        let rg = self.any_grad(&[a, b]);
        let oshape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(Tensor::new(oshape, out)?, rg, Some(Op::Cosine { a, b, cols, eps }), 0))
    }

    /// Repeats each row (slice along axis 0) `times` times consecutively:
    /// `[r, ...] -> [r * times, ...]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("repeat-rows", "scalar input"));
        }
        let cols = numel(&shape[1..]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(src.len() * times);
        for r in 0..shape[0] {
            let row = &src[r * cols..(r + 1) * cols];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let mut oshape = shape;
        oshape[0] *= times;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(oshape, out)?, rg, Some(Op::RepeatRows { a, times, cols }), 0))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn index_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("index-rows", "scalar input"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(invalid("index-rows", format!("row {bad} out of {}", shape[0])));
        }
        let cols = numel(&shape[1..]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let mut oshape = shape;
        oshape[0] = index.len();
        let rg = self.any_grad(&[a]);
        let op = Op::IndexRows {
            a,
            index: index.to_vec(),
            cols,
        };
        Ok(self.push(Tensor::new(oshape, out)?, rg, Some(op), 0))
    }

    /// Sinusoidal encoding of each coordinate of `a [m, k]` into `dim`
    /// values: pair `p` holds `sin(x·f_p), cos(x·f_p)` with
    /// `f_p = 2π / temperature^(2p/dim)`. Output is `[m, k·dim]`, coordinate
    /// blocks concatenated in input order.
    pub fn sine_embed(&mut self, a: Var, dim: usize, temperature: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || dim == 0 || dim % 2 != 0 {
            return Err(invalid(
                "sine-embed",
                format!("needs [m, k] input and even dim, got {shape:?} and {dim}"),
            ));
        }
        let freqs = sine_freqs(dim, temperature);
        let src = self.data(a);
        let mut out = Vec::with_capacity(src.len() * dim);
        for &x in src {
            let x = x.as_f64();
            for &f in &freqs {
                out.push(lit((x * f).sin()));
                out.push(lit((x * f).cos()));
            }
        }
        let rg = self.any_grad(&[a]);
        let op = Op::SineEmbed { a, dim, temperature };
        Ok(self.push(Tensor::new(vec![shape[0], shape[1] * dim], out)?, rg, Some(op), 0))
    }

    /// Bilinear lookup of `coords [m, 2]` (pixel `u, v`) in a feature map
    /// `map [h·w, c]` stored row-major by pixel. Zero padding outside.
    pub fn bilinear_sample(&mut self, map: Var, h: usize, w: usize, coords: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let cs = self.shape(coords).to_vec();
        if ms.len() != 2 || ms[0] != h * w {
            return Err(invalid("bilinear", format!("map {ms:?} is not [{h}*{w}, c]")));
        }
        if cs.len() != 2 || cs[1] != 2 {
            return Err(mismatch("bilinear", &ms, &cs));
        }
        let c = ms[1];
        let (md, cd) = (self.data(map), self.data(coords));
        let mut out = vec![S::zero(); cs[0] * c];
        for i in 0..cs[0] {
            let cr = corners(cd[2 * i].as_f64(), cd[2 * i + 1].as_f64(), h, w);
            let (fx, fy) = (cr.fx, cr.fy);
            let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            let orow = &mut out[i * c..(i + 1) * c];
            for (idx, wt) in cr.idx.iter().zip(weights) {
                if let Some(p) = idx {
                    let wt: S = lit(wt);
                    for (o, &m) in orow.iter_mut().zip(&md[p * c..(p + 1) * c]) {
                        *o += wt * m;
                    }
                }
            }
        }
        let rg = self.any_grad(&[map, coords]);
        Ok(self.push(Tensor::new(vec![cs[0], c], out)?, rg, Some(Op::Bilinear { map, coords, h, w }), 0))
    }

    /// Softmax focal loss, summed over rows:
    /// `Σ_i w_i · (1 - p_i)^γ · (-ln p_i)` where `p_i` is the softmax
    /// probability of row `i`'s target class. With `γ = 0` this is weighted
    /// cross-entropy.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], weights: &[S], gamma: S) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || weights.len() != shape[0] {
            return Err(invalid(
                "focal-loss",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let c = shape[1];
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(invalid("focal-loss", format!("target class {bad} out of {c}")));
        }
        let d = self.data(logits);
        let mut total = S::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
            let logp = row[t] - lse;
            let p = logp.exp();
            total += w * (S::one() - p).powf(gamma) * (-logp);
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::Focal {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            gamma,
        };
        Ok(self.push(Tensor::scalar(total), rg, Some(op), 0))
    }

    /// Mean binary cross-entropy with logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let d = self.data(logits);
        if d.len() != targets.len() {
            return Err(invalid(
                "bce",
                format!("{} logits vs {} targets", d.len(), targets.len()),
            ));
        }
        let n: S = lit(d.len().max(1) as f64);
        let total: S = d
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(S::zero()) - z * t + (S::one() + (-z.abs()).exp()).ln())
            .sum();
        let rg = self.any_grad(&[logits]);
        let op = Op::Bce {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n), rg, Some(op), 0))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        let rg = self.any_grad(inputs);
        let saved = op.saved_bytes() / std::mem::size_of::<S>();
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            op,
        };
        self.push(output, rg, Some(op), saved)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape and returns the
    /// gradient of every requires-grad leaf reached from `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut result = BTreeMap::new();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { map: result });
        }
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                None => {
                    if node.requires_grad {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        result.insert(Var(id), t);
                    }
                }
                Some(op) => backprop(&nodes, op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { map: result })
    }
}

fn wants<S: Scalar>(nodes: &[Node<S>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Accumulates through an elementwise or broadcast binary op.
fn accumulate_rhs<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    b: Var,
    n: usize,
    f: impl Fn(usize) -> S,
) {
    if !wants(nodes, b) {
        return;
    }
    let bl = nodes[b.0].value.numel();
    let mut gb = vec![S::zero(); bl];
    for i in 0..n {
        gb[i % bl] += f(i);
    }
    accumulate(grads, b, gb);
}

fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    op: &Op<S>,
    out: &Tensor<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let val = |v: Var| nodes[v.0].value.data();
    match op {
        Op::MatMul { a, b, m, k, n } => {
            if wants(nodes, *a) {
                let mut da = vec![S::zero(); m * k];
                kernels::matmul_grad_lhs(g, val(*b), &mut da, *m, *k, *n);
                accumulate(grads, *a, da);
            }
            if wants(nodes, *b) {
                let mut db = vec![S::zero(); k * n];
                kernels::matmul_grad_rhs(val(*a), g, &mut db, *m, *k, *n);
                accumulate(grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            if wants(nodes, *a) {
                accumulate(grads, *a, g.to_vec());
            }
            accumulate_rhs(nodes, grads, *b, g.len(), |i| g[i]);
        }
        Op::Sub { a, b } => {
            if wants(nodes, *a) {
                accumulate(grads, *a, g.to_vec());
            }
            accumulate_rhs(nodes, grads, *b, g.len(), |i| -g[i]);
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a), val(*b));
            let bl = bd.len();
            if wants(nodes, *a) {
                accumulate(grads, *a, g.iter().enumerate().map(|(i, &x)| x * bd[i % bl]).collect());
            }
            accumulate_rhs(nodes, grads, *b, g.len(), |i| g[i] * ad[i]);
        }
        Op::Scale { a, c } => {
            accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
        }
        Op::Concat {
            inputs,
            sizes,
            outer,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&v, &d) in inputs.iter().zip(sizes) {
                if wants(nodes, v) {
                    let mut gv = Vec::with_capacity(outer * d * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + d * inner]);
                    }
                    accumulate(grads, v, gv);
                }
                offset += d;
            }
        }
        Op::Slice {
            a,
            start,
            dim,
            outer,
            inner,
        } => {
            let len = g.len() / (outer * inner).max(1);
            let mut ga = vec![S::zero(); outer * dim * inner];
            for o in 0..*outer {
                let base = (o * dim + start) * inner;
                ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *a, ga);
        }
        Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
        Op::Transpose { a, rows, cols } => {
            let mut ga = vec![S::zero(); rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Relu { a } => {
            let ad = val(*a);
            accumulate(
                grads,
                *a,
                g.iter()
                    .zip(ad)
                    .map(|(&x, &v)| if v > S::zero() { x } else { S::zero() })
                    .collect(),
            );
        }
        Op::Sigmoid { a } => {
            let y = out.data();
            accumulate(
                grads,
                *a,
                g.iter().zip(y).map(|(&x, &s)| x * s * (S::one() - s)).collect(),
            );
        }
        Op::InvSigmoid { a } => {
            let eps: S = lit(INVERSE_SIGMOID_EPS);
            let ad = val(*a);
            accumulate(
                grads,
                *a,
                g.iter()
                    .zip(ad)
                    .map(|(&x, &v)| {
                        if v < eps || v > S::one() - eps {
                            S::zero()
                        } else {
                            x / (v * (S::one() - v))
                        }
                    })
                    .collect(),
            );
        }
        Op::Clamp { a, lo, hi } => {
            let ad = val(*a);
            accumulate(
                grads,
                *a,
                g.iter()
                    .zip(ad)
                    .map(|(&x, &v)| if v >= *lo && v <= *hi { x } else { S::zero() })
                    .collect(),
            );
        }
        Op::Softmax { a, outer, dim, inner } => {
            let y = out.data();
            let mut ga = vec![S::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * dim + j) * inner + i;
                    let dot: S = (0..*dim).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..*dim {
                        ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cols,
            xhat,
            rstd,
        } => {
            let cols = *cols;
            let rows = xhat.len() / cols.max(1);
            let gm = val(*gamma);
            if wants(nodes, *x) {
                let n: S = lit(cols as f64);
                let mut gx = vec![S::zero(); xhat.len()];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for c in 0..cols {
                        let d = gr[c] * gm[c];
                        m1 += d;
                        m2 += d * xr[c];
                    }
                    m1 /= n;
                    m2 /= n;
                    for c in 0..cols {
                        gx[r * cols + c] = rstd[r] * (gr[c] * gm[c] - m1 - xr[c] * m2);
                    }
                }
                accumulate(grads, *x, gx);
            }
            if wants(nodes, *gamma) {
                let mut gg = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
                accumulate(grads, *gamma, gg);
            }
            if wants(nodes, *beta) {
                let mut gb = vec![S::zero(); cols];
                for r in 0..rows {
                    add_into(&mut gb, &g[r * cols..(r + 1) * cols]);
                }
                accumulate(grads, *beta, gb);
            }
        }
        Op::Attention(rec) => {
            let qs = nodes[rec.q.0].value.shape();
            let dims = AttentionDims {
                queries: qs[0],
                keys: nodes[rec.k.0].value.shape()[0],
                dim: qs[1],
                heads: rec.heads,
            };
            let want = [wants(nodes, rec.q), wants(nodes, rec.k), wants(nodes, rec.v)];
            let ag = kernels::attention_backward(
                val(rec.q),
                val(rec.k),
                val(rec.v),
                &rec.probs,
                &dims,
                &rec.index,
                g,
                want,
            );
            if let Some(dq) = ag.dq {
                accumulate(grads, rec.q, dq);
            }
            if let Some(dk) = ag.dk {
                accumulate(grads, rec.k, dk);
            }
            if let Some(dv) = ag.dv {
                accumulate(grads, rec.v, dv);
            }
        }
        Op::Sum { a } => {
            let n = nodes[a.0].value.numel();
            accumulate(grads, *a, vec![g[0]; n]);
        }
        Op::Mean { a } => {
            let n = nodes[a.0].value.numel();
            accumulate(grads, *a, vec![g[0] / lit(n.max(1) as f64); n]);
        }
        Op::MeanAxis { a, outer, dim, inner } => {
            let inv: S = lit(1.0 / (*dim).max(1) as f64);
            let mut ga = vec![S::zero(); outer * dim * inner];
            for o in 0..*outer {
                for j in 0..*dim {
                    for i in 0..*inner {
                        ga[(o * dim + j) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::L1 { a, b } => {
            let sign: Vec<S> = val(*a)
                .iter()
                .zip(val(*b))
                .map(|(&x, &y)| {
                    if x > y {
                        g[0]
                    } else if x < y {
                        -g[0]
                    } else {
                        S::zero()
                    }
                })
                .collect();
            if wants(nodes, *b) {
                accumulate(grads, *b, sign.iter().map(|&s| -s).collect());
            }
            if wants(nodes, *a) {
                accumulate(grads, *a, sign);
            }
        }
        Op::Cosine { a, b, cols, eps } => {
            let (da, db) = (val(*a), val(*b));
            let cols = *cols;
            let mut ga = vec![S::zero(); da.len()];
            let mut gb = vec![S::zero(); db.len()];
            for (r, &gr) in g.iter().enumerate() {
                let (x, y) = (&da[r * cols..(r + 1) * cols], &db[r * cols..(r + 1) * cols]);
                let dot: S = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                let na2 = x.iter().map(|&p| p * p).sum::<S>() + *eps;
                let nb2 = y.iter().map(|&q| q * q).sum::<S>() + *eps;
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let inv = S::one() / (na * nb);
                for c in 0..cols {
                    ga[r * cols + c] = gr * (y[c] * inv - dot * x[c] * inv / na2);
                    gb[r * cols + c] = gr * (x[c] * inv - dot * y[c] * inv / nb2);
                }
            }
            if wants(nodes, *a) {
                accumulate(grads, *a, ga);
            }
            if wants(nodes, *b) {
                accumulate(grads, *b, gb);
            }
        }
        Op::RepeatRows { a, times, cols } => {
            let rows = nodes[a.0].value.numel() / (*cols).max(1);
            let mut ga = vec![S::zero(); rows * cols];
            for r in 0..rows {
                for t in 0..*times {
                    let src = (r * times + t) * cols;
                    add_into(&mut ga[r * cols..(r + 1) * cols], &g[src..src + cols]);
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::IndexRows { a, index, cols } => {
            let mut ga = vec![S::zero(); nodes[a.0].value.numel()];
            for (k, &r) in index.iter().enumerate() {
                add_into(&mut ga[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
            }
            accumulate(grads, *a, ga);
        }
        Op::SineEmbed { a, dim, temperature } => {
            let freqs = sine_freqs(*dim, *temperature);
            let ad = val(*a);
            let ga = ad
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let x = x.as_f64();
                    let mut acc = 0.0;
                    for (p, &f) in freqs.iter().enumerate() {
                        let gs = g[i * dim + 2 * p].as_f64();
                        let gc = g[i * dim + 2 * p + 1].as_f64();
                        acc += f * (gs * (x * f).cos() - gc * (x * f).sin());
                    }
                    lit(acc)
                })
                .collect();
            accumulate(grads, *a, ga);
        }
        Op::Bilinear { map, coords, h, w } => {
            let (md, cd) = (val(*map), val(*coords));
            let c = out.shape()[1];
            let m = out.shape()[0];
            let want_map = wants(nodes, *map);
            let want_coords = wants(nodes, *coords);
            let mut gm = want_map.then(|| vec![S::zero(); md.len()]);
            let mut gc = want_coords.then(|| vec![S::zero(); cd.len()]);
            for i in 0..m {
                let cr = corners(cd[2 * i].as_f64(), cd[2 * i + 1].as_f64(), *h, *w);
                let (fx, fy) = (cr.fx, cr.fy);
                let gi = &g[i * c..(i + 1) * c];
                if let Some(gm) = gm.as_mut() {
                    let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
                    for (idx, wt) in cr.idx.iter().zip(weights) {
                        if let Some(p) = idx {
                            let wt: S = lit(wt);
                            for (d, &x) in gm[p * c..(p + 1) * c].iter_mut().zip(gi) {
                                *d += wt * x;
                            }
                        }
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    let corner = |k: usize, ch: usize| -> f64 {
                        cr.idx[k].map_or(0.0, |p| md[p * c + ch].as_f64())
                    };
                    let (mut du, mut dv) = (0.0, 0.0);
                    for (ch, &gx) in gi.iter().enumerate() {
                        let gx = gx.as_f64();
                        let (m00, m10, m01, m11) = (corner(0, ch), corner(1, ch), corner(2, ch), corner(3, ch));
                        du += gx * ((1.0 - fy) * (m10 - m00) + fy * (m11 - m01));
                        dv += gx * ((1.0 - fx) * (m01 - m00) + fx * (m11 - m10));
                    }
                    gc[2 * i] += lit(du);
                    gc[2 * i + 1] += lit(dv);
                }
            }
            if let Some(gm) = gm {
                accumulate(grads, *map, gm);
            }
            if let Some(gc) = gc {
                accumulate(grads, *coords, gc);
            }
        }
        Op::Focal {
            logits,
            targets,
            weights,
            gamma,
        } => {
            let d = val(*logits);
            let c = nodes[logits.0].value.shape()[1];
            let mut gl = vec![S::zero(); d.len()];
            for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                let row = &d[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let exps: Vec<S> = row.iter().map(|&z| (z - max).exp()).collect();
                let sum: S = exps.iter().copied().sum();
                let logp = (row[t] - max) - sum.ln();
                let pt = exps[t] / sum;
                let one_m = (S::one() - pt).max(S::zero());
                let dl_dpt_pt = if *gamma == S::zero() {
                    -w
                } else {
                    -w * (one_m.powf(*gamma) - *gamma * one_m.powf(*gamma - S::one()).min(lit(1e12)) * pt * logp)
                };
                for k in 0..c {
                    let pk = exps[k] / sum;
                    let delta = if k == t { S::one() } else { S::zero() };
                    gl[i * c + k] = g[0] * dl_dpt_pt * (delta - pk);
                }
            }
            accumulate(grads, *logits, gl);
        }
        Op::Bce { logits, targets } => {
            let d = val(*logits);
            let n: S = lit(d.len().max(1) as f64);
            accumulate(
                grads,
                *logits,
                d.iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                    .collect(),
            );
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<S>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let gs = op.backward(&ins, out, g);
            for (&v, gv) in inputs.iter().zip(gs) {
                if let Some(gv) = gv {
                    if wants(nodes, v) {
                        accumulate(grads, v, gv);
                    }
                }
            }
        }
    }
}

/// Gradients of requires-grad leaves, keyed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients<S> {
    map: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<S>)> {
        self.map.iter().map(|(&v, t)| (v, t))
    }
}
