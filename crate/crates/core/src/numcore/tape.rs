//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive in creation order, which is already a
//! topological order, so the backward sweep walks the node list from the
//! loss down to index 0 and touches each node exactly once.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::tensor::{moments, Tensor};
use crate::error::{Error, Result};

/// Arithmetic precision of recorded values.
///
/// `F32` stores every primitive output and gradient rounded to single
/// precision; storage stays `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn apply(self, t: &mut Tensor) {
        if self == Precision::F32 {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masks and weights for a row-wise InfoNCE-style loss over a similarity
/// matrix `S` (`rows × cols`):
///
/// `loss = (1/normalizer) Σᵢ wᵢ Σⱼ posᵢⱼ (log Σₖ denomᵢₖ exp Sᵢₖ − Sᵢⱼ)`
#[derive(Clone, Debug)]
pub struct ContrastiveSpec {
    pub rows: usize,
    pub cols: usize,
    pub positives: Vec<bool>,
    pub denominators: Vec<bool>,
    pub weights: Vec<f64>,
    pub normalizer: f64,
}

impl ContrastiveSpec {
    pub fn new(rows: usize, cols: usize, normalizer: f64) -> Self {
        Self {
            rows,
            cols,
            positives: vec![false; rows * cols],
            denominators: vec![false; rows * cols],
            weights: vec![0.0; rows],
            normalizer,
        }
    }

    pub fn set_positive(&mut self, i: usize, j: usize) {
        self.positives[i * self.cols + j] = true;
    }

    pub fn set_denominator(&mut self, i: usize, k: usize) {
        self.denominators[i * self.cols + k] = true;
    }

    fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positives[i * self.cols + j]
    }

    fn is_denominator(&self, i: usize, k: usize) -> bool {
        self.denominators[i * self.cols + k]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Rc<Tensor>),
    ConcatBroadcast {
        h: Var,
        src: Var,
        row: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    VStack(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
        clamped: Vec<bool>,
    },
    Contrastive {
        sim: Var,
        /// `∂loss/∂S`, fixed at record time.
        weights: Tensor,
    },
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.apply(&mut value);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds the `1 × d` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let out = self.value(x).hadamard(&mask)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mask(x, Rc::new(mask)), rg))
    }

    /// `[h ∥ src[row]]`, with `src[row]` broadcast to every row of `h`.
    pub fn concat_broadcast(&mut self, h: Var, src: Var, row: usize) -> Result<Var> {
        let hv = self.value(h);
        let sv = self.value(src);
        if row >= sv.rows() {
            return Err(Error::Shape {
                op: "concat_broadcast",
                lhs: hv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let (n, d1, d2) = (hv.rows(), hv.cols(), sv.cols());
        let broadcast = sv.row(row);
        let mut data = Vec::with_capacity(n * (d1 + d2));
        for r in 0..n {
            data.extend_from_slice(hv.row(r));
            data.extend_from_slice(broadcast);
        }
        let out = Tensor::new(vec![n, d1 + d2], data)?;
        let rg = self.rg(h) || self.rg(src);
        Ok(self.push(out, Op::ConcatBroadcast { h, src, row }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let g = self.value(gain);
        let b = self.value(bias);
        if g.len() != d || b.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xhat.row_mut(r);
            let (mean, var) = moments(row);
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let mut out = xhat.clone();
        for r in 0..n {
            for ((v, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
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

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).mean_rows();
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::VStack(parts.to_vec()), rg))
    }

    /// Scales every row to unit L2 norm; a zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroVector);
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Mean of `−log max(softmax(logits)ᵢ[yᵢ], 1e-12)` over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() || labels.iter().any(|&y| y >= lv.cols()) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let probs = lv.softmax_rows();
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(labels.len());
        for (r, &y) in labels.iter().enumerate() {
            let p = probs.get(r, y);
            clamped.push(p < PROB_FLOOR);
            total -= p.max(PROB_FLOOR).ln();
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                clamped,
            },
            rg,
        ))
    }

    pub fn contrastive(&mut self, sim: Var, spec: ContrastiveSpec) -> Result<Var> {
        let s = self.value(sim);
        if s.rows() != spec.rows || s.cols() != spec.cols {
            return Err(Error::Shape {
                op: "contrastive",
                lhs: s.shape().to_vec(),
                rhs: vec![spec.rows, spec.cols],
            });
        }
        // Per-entry gradient weight dL/dS, computed alongside the value.
        let mut weights = Tensor::zeros(&[spec.rows, spec.cols]);
        let mut total = 0.0;
        for i in 0..spec.rows {
            let n_pos = (0..spec.cols).filter(|&j| spec.is_positive(i, j)).count();
            if n_pos == 0 || spec.weights[i] == 0.0 {
                continue;
            }
            let row = s.row(i);
            let max = (0..spec.cols)
                .filter(|&k| spec.is_denominator(i, k))
                .map(|k| row[k])
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..spec.cols {
                if spec.is_denominator(i, k) {
                    denom += (row[k] - max).exp();
                }
            }
            let lse = max + denom.ln();
            let w = spec.weights[i] / spec.normalizer;
            let mut anchor = 0.0;
            for j in 0..spec.cols {
                if spec.is_positive(i, j) {
                    anchor += lse - row[j];
                }
            }
            total += w * anchor;
            let wrow = weights.row_mut(i);
            for k in 0..spec.cols {
                let mut g = 0.0;
                if spec.is_denominator(i, k) {
                    g += n_pos as f64 * (row[k] - lse).exp();
                }
                if spec.is_positive(i, k) {
                    g -= 1.0;
                }
                wrow[k] = w * g;
            }
        }
        let rg = self.rg(sim);
        Ok(self.push(Tensor::scalar(total), Op::Contrastive { sim, weights }, rg))
    }

    /// `Σ cᵢ · vᵢ` over same-shaped inputs, accumulated left to right.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Tensor("empty linear combination".into()))?;
        let mut out = self.value(first.0).scale(first.1);
        for &(v, c) in &terms[1..] {
            out = out.add(&self.value(v).scale(c))?;
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::LinComb(terms.to_vec()), rg))
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Tensor(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, mut g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        self.precision.apply(&mut g);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(g.reshaped(&shape)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    let da = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = g.t_matmul(self.value(*a))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::row_vector(db))?;
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.scale(*f))?,
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Mask(x, mask) => self.accumulate(grads, *x, g.hadamard(mask)?)?,
            Op::ConcatBroadcast { h, src, row } => {
                let d1 = self.value(*h).cols();
                let sv = self.value(*src);
                let d2 = sv.cols();
                let n = g.rows();
                if self.rg(*h) {
                    let mut dh = Vec::with_capacity(n * d1);
                    for r in 0..n {
                        dh.extend_from_slice(&g.row(r)[..d1]);
                    }
                    self.accumulate(grads, *h, Tensor::new(vec![n, d1], dh)?)?;
                }
                if self.rg(*src) {
                    let mut ds = Tensor::zeros(&[sv.rows(), d2]);
                    let target = ds.row_mut(*row);
                    for r in 0..n {
                        for (d, v) in target.iter_mut().zip(&g.row(r)[d1..]) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *src, ds)?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (n, d) = (g.rows(), g.cols());
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g.get(r, c) * xhat.get(r, c);
                            db[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row_vector(dg))?;
                    self.accumulate(grads, *bias, Tensor::row_vector(db))?;
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[n, d]);
                    let df = d as f64;
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|c| g.get(r, c) * gv.data()[c]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let s = inv_std[r] / df;
                        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                            *out = s * (df * dxhat[c] - sum - xhat.get(r, c) * dot);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let inv = 1.0 / n as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                let mut dx = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    dx.extend_from_slice(&row);
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, row.len()], dx)?)?;
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (r, c) = (pv.rows(), pv.cols());
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    self.accumulate(grads, p, Tensor::new(vec![r, c], slice)?)?;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d = (*d - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d = yv * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                clamped,
            } => {
                let upstream = g.data()[0];
                let scale = upstream / labels.len() as f64;
                let mut dx = probs.clone();
                for (r, (&y, &c)) in labels.iter().zip(clamped).enumerate() {
                    let row = dx.row_mut(r);
                    if c {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, dx)?;
            }
            Op::Contrastive { sim, weights } => {
                let upstream = g.data()[0];
                self.accumulate(grads, *sim, weights.scale(upstream))?;
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, g.scale(c))?;
                }
            }
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient of `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
