//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value. Nodes are appended in execution order, so the node list is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! Every forward op checks its output for NaN/Inf and fails with an error
//! naming the op.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{dot, Tensor};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConstSub(Var),
    Gelu(Var),
    Cos(Var),
    Sin(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Dustbin(Var, Var),
    /// Potentials `u_1..u_T` and `v_0..v_T` of an unrolled log-domain Sinkhorn.
    Sinkhorn { z: Var, log_mu: Vec<f64>, log_nu: Vec<f64>, u: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
    GatherSum(Var, Vec<(usize, usize)>),
    BceSum { probs: Var, labels: Vec<f64>, eps: f64 },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Counts of matrix-product calls recorded on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// All `matmul` and `matmul_nt` calls.
    pub matmuls: usize,
    /// `matmul_nt` calls: query·keyᵀ style score products.
    pub score_products: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: OpCounters,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` is disconnected from the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Probability clamp used by the visibility cross-entropy.
pub(crate) fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.counters.matmuls += 1;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.counters.matmuls += 1;
        self.counters.score_products += 1;
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(dim_err("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let out = x.zip_map(y, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 × n` row `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(dim_err("add_row", format!("{:?} + row {:?}", xv.shape(), rv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, r), &[x, r])
    }

    /// Adds the `m × 1` column `c` to every column of `x`.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(dim_err("add_col", format!("{:?} + col {:?}", xv.shape(), cv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let ci = cv.data()[i];
            for o in out.row_mut(i) {
                *o += ci;
            }
        }
        self.push("add_col", out, Op::AddCol(x, c), &[x, c])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(dim_err("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let out = x.zip_map(y, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).scale(k);
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    /// `c - a` for a constant tensor `c` of the same shape.
    pub fn const_sub(&mut self, c: &Tensor, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.same_shape(c) {
            return Err(dim_err("const_sub", format!("{:?} - {:?}", c.shape(), x.shape())));
        }
        let out = c.zip_map(x, |p, q| p - q);
        self.push("const_sub", out, Op::ConstSub(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cos);
        self.push("cos", out, Op::Cos(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        self.push("sin", out, Op::Sin(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row log-sum-exp, `m × n → m × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| log_sum_exp(x.row(r).iter().copied())).collect();
        let out = Tensor::from_vec(x.rows(), 1, data)?;
        self.push("logsumexp_rows", out, Op::LogSumExpRows(a), &[a])
    }

    /// Per-column log-sum-exp, `m × n → 1 × n`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = (0..x.cols())
            .map(|c| log_sum_exp((0..x.rows()).map(|r| x.get(r, c))))
            .collect();
        let out = Tensor::from_vec(1, x.cols(), data)?;
        self.push("logsumexp_cols", out, Op::LogSumExpCols(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1 × C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let c = xv.cols();
        if g.shape() != [1, c] || b.shape() != [1, c] {
            return Err(dim_err("layer_norm", format!("x {:?}, gamma {:?}", xv.shape(), g.shape())));
        }
        let mut xhat = Tensor::zeros(xv.rows(), c);
        let mut out = Tensor::zeros(xv.rows(), c);
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd.push(s);
            for k in 0..c {
                let h = (row[k] - mean) * s;
                xhat.set(r, k, h);
                out.set(r, k, h * g.data()[k] + b.data()[k]);
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_rows(self.value(b))?;
        self.push("concat_rows", out, Op::ConcatRows(a, b), &[a, b])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {} rows", x.rows())));
        }
        let out = x.slice_rows(start, end);
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {} cols", x.cols())));
        }
        let mut out = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Surrounds `scores` (`m × n`) with a dustbin row and column filled by the
    /// `1 × 1` value `z`, giving an `(m+1) × (n+1)` matrix.
    pub fn dustbin_augment(&mut self, scores: Var, z: Var) -> Result<Var> {
        let (s, zv) = (self.value(scores), self.value(z));
        if zv.shape() != [1, 1] {
            return Err(dim_err("dustbin_augment", "dustbin score must be 1x1"));
        }
        let (m, n) = (s.rows(), s.cols());
        let mut out = Tensor::filled(m + 1, n + 1, zv.item());
        for i in 0..m {
            out.row_mut(i)[..n].copy_from_slice(s.row(i));
        }
        self.push("dustbin_augment", out, Op::Dustbin(scores, z), &[scores, z])
    }

    /// `iterations` alternating log-domain Sinkhorn updates on the couplings
    /// `z`, returning `z + u + v + offset`. Recorded as a single node whose
    /// backward pass replays the unrolled iterations exactly.
    pub fn sinkhorn(&mut self, z: Var, log_mu: Vec<f64>, log_nu: Vec<f64>, iterations: usize, offset: f64) -> Result<Var> {
        let zv = self.value(z);
        let (rows, cols) = (zv.rows(), zv.cols());
        if log_mu.len() != rows || log_nu.len() != cols {
            return Err(dim_err(
                "sinkhorn",
                format!("{rows}x{cols} couplings with {} row and {} column marginals", log_mu.len(), log_nu.len()),
            ));
        }
        let mut us = Vec::with_capacity(iterations);
        let mut vs = Vec::with_capacity(iterations + 1);
        let mut v = vec![0.0; cols];
        let mut colmax = vec![0.0; cols];
        let mut colsum = vec![0.0; cols];
        for _ in 0..iterations {
            let u: Vec<f64> = (0..rows)
                .map(|i| log_mu[i] - log_sum_exp(zv.row(i).iter().zip(&v).map(|(a, b)| a + b)))
                .collect();
            colmax.fill(f64::NEG_INFINITY);
            for (i, ui) in u.iter().enumerate() {
                for (m, zij) in colmax.iter_mut().zip(zv.row(i)) {
                    *m = m.max(zij + ui);
                }
            }
            colsum.fill(0.0);
            for (i, ui) in u.iter().enumerate() {
                for ((acc, zij), m) in colsum.iter_mut().zip(zv.row(i)).zip(&colmax) {
                    *acc += (zij + ui - m).exp();
                }
            }
            let next: Vec<f64> = (0..cols).map(|j| log_nu[j] - (colmax[j] + colsum[j].ln())).collect();
            vs.push(std::mem::replace(&mut v, next));
            us.push(u);
        }
        vs.push(v);
        let mut out = zv.clone();
        if let (Some(u), Some(v)) = (us.last(), vs.last()) {
            for (i, ui) in u.iter().enumerate() {
                for (o, vj) in out.row_mut(i).iter_mut().zip(v) {
                    *o += ui + vj + offset;
                }
            }
        } else {
            out = out.map(|x| x + offset);
        }
        self.push("sinkhorn", out, Op::Sinkhorn { z, log_mu, log_nu, u: us, v: vs }, &[z])
    }

    pub fn gather_sum(&mut self, a: Var, cells: Vec<(usize, usize)>) -> Result<Var> {
        let x = self.value(a);
        let mut total = 0.0;
        for &(r, c) in &cells {
            if r >= x.rows() || c >= x.cols() {
                return Err(dim_err("gather_sum", format!("cell ({r}, {c}) outside {:?}", x.shape())));
            }
            total += x.get(r, c);
        }
        self.push("gather_sum", Tensor::scalar(total), Op::GatherSum(a, cells), &[a])
    }

    /// Summed binary cross-entropy of column 0 of `probs` against `labels`,
    /// with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce_sum(&mut self, probs: Var, labels: Vec<f64>, eps: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.rows() != labels.len() {
            return Err(dim_err("bce_sum", format!("{} predictions, {} labels", p.rows(), labels.len())));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(k, &y)| {
                let b = clamp_prob(p.get(k, 0), eps);
                -(y * b.ln() + (1.0 - y) * (1.0 - b).ln())
            })
            .sum();
        self.push("bce_sum", Tensor::scalar(total), Op::BceSum { probs, labels, eps }, &[probs])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Reverse sweep from the scalar `loss`. Leaves not reachable from `loss`
    /// get no entry (see [`Gradients::get_or_zeros`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(dim_err("backward", "loss must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul_nt(bv)?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av.matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(bv)?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, g.matmul_tn(av)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                let mut dr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *r, dr);
            }
            Op::AddCol(x, c) => {
                self.accumulate(grads, *x, g.clone());
                let data = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                self.accumulate(grads, *c, Tensor::from_vec(g.rows(), 1, data)?);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |p, q| p * q));
                self.accumulate(grads, *b, g.zip_map(av, |p, q| p * q));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::ConstSub(a) => self.accumulate(grads, *a, g.scale(-1.0)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |d, v| d * gelu_grad(v)));
            }
            Op::Cos(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |d, v| -d * v.sin()));
            }
            Op::Sin(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |d, v| d * v.cos()));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[k] * (gr[k] - inner);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let lse = &node.value;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (l, gr) = (lse.data()[r], g.data()[r]);
                    for (d, v) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                        *d = gr * (v - l).exp();
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSumExpCols(a) => {
                let x = self.value(*a);
                let lse = node.value.data();
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = g.data()[c] * (xr[c] - lse[c]).exp();
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = self.value(*gamma);
                let c = xhat.cols();
                let mut dx = Tensor::zeros(xhat.rows(), c);
                let mut dgamma = Tensor::zeros(1, c);
                let mut dbeta = Tensor::zeros(1, c);
                for r in 0..xhat.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut mean_g = 0.0;
                    let mut mean_gh = 0.0;
                    for k in 0..c {
                        let gk = gr[k] * gm.data()[k];
                        mean_g += gk;
                        mean_gh += gk * hr[k];
                        dgamma.data_mut()[k] += gr[k] * hr[k];
                        dbeta.data_mut()[k] += gr[k];
                    }
                    mean_g /= c as f64;
                    mean_gh /= c as f64;
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        let gk = gr[k] * gm.data()[k];
                        *d = rstd[r] * (gk - mean_g - hr[k] * mean_gh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Tensor::zeros(g.rows(), ca);
                let mut db = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                self.accumulate(grads, *a, g.slice_rows(0, ra));
                self.accumulate(grads, *b, g.slice_rows(ra, g.rows()));
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Dustbin(s, z) => {
                let (m, n) = (g.rows() - 1, g.cols() - 1);
                let mut ds = Tensor::zeros(m, n);
                let mut dz = 0.0;
                for r in 0..=m {
                    for c in 0..=n {
                        if r < m && c < n {
                            ds.set(r, c, g.get(r, c));
                        } else {
                            dz += g.get(r, c);
                        }
                    }
                }
                self.accumulate(grads, *s, ds);
                self.accumulate(grads, *z, Tensor::scalar(dz));
            }
            Op::GatherSum(a, cells) => {
                let x = self.value(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                let gv = g.item();
                for &(r, c) in cells {
                    dx.set(r, c, dx.get(r, c) + gv);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::BceSum { probs, labels, eps } => {
                let p = self.value(*probs);
                let mut dp = Tensor::zeros(p.rows(), p.cols());
                let gv = g.item();
                for (k, &y) in labels.iter().enumerate() {
                    let raw = p.get(k, 0);
                    if raw > *eps && raw < 1.0 - eps {
                        dp.set(k, 0, gv * (-y / raw + (1.0 - y) / (1.0 - raw)));
                    }
                }
                self.accumulate(grads, *probs, dp);
            }
            Op::Sinkhorn { z, log_mu, log_nu, u, v } => {
                let zv = self.value(*z);
                let (rows, cols) = (zv.rows(), zv.cols());
                let mut dz = g.clone();
                let mut gu: Vec<f64> = (0..rows).map(|i| g.row(i).iter().sum()).collect();
                let mut gv = vec![0.0; cols];
                for i in 0..rows {
                    for (acc, gij) in gv.iter_mut().zip(g.row(i)) {
                        *acc += gij;
                    }
                }
                if u.is_empty() {
                    self.accumulate(grads, *z, dz);
                    return Ok(());
                }
                let mut gv_prev = vec![0.0; cols];
                for t in (0..u.len()).rev() {
                    // v_t = log_nu - lse_i(z + u_t); u_t = log_mu - lse_j(z + v_{t-1})
                    let (ut, vt, vp) = (&u[t], &v[t + 1], &v[t]);
                    let extra = t + 1 == u.len();
                    gv_prev.fill(0.0);
                    for i in 0..rows {
                        let zr = zv.row(i);
                        let dr = dz.row_mut(i);
                        let mut gui = if extra { gu[i] } else { 0.0 };
                        for j in 0..cols {
                            let q = (zr[j] + ut[i] + vt[j] - log_nu[j]).exp();
                            dr[j] -= gv[j] * q;
                            gui -= gv[j] * q;
                        }
                        for j in 0..cols {
                            let r = (zr[j] + ut[i] + vp[j] - log_mu[i]).exp();
                            dr[j] -= gui * r;
                            gv_prev[j] -= gui * r;
                        }
                        gu[i] = gui;
                    }
                    std::mem::swap(&mut gv, &mut gv_prev);
                }
                self.accumulate(grads, *z, dz);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Reduces a tensor output to a scalar through fixed random weights.
    fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(out).shape();
        let w = Tensor::randn(shape[0], shape[1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }

    fn eval(build: &Build, inputs: &[Tensor]) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = weighted(&mut tape, out, 99).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = vars.iter().zip(inputs).map(|(&v, t)| g.get_or_zeros(v, t)).collect();
        (tape.value(loss).item(), grads)
    }

    fn check(build: &Build, inputs: &[Tensor]) {
        let (_, analytic) = eval(build, inputs);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let numeric = (eval(build, &plus).0 - eval(build, &minus).0) / (2.0 * h);
                let a = analytic[k].data()[e];
                let scale = a.abs().max(numeric.abs()).max(1e-3);
                assert!((a - numeric).abs() / scale < 1e-6, "input {k} elem {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn square_has_gradient_six() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_row_sums_have_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(rand(3, 5, 1));
        let s = tape.softmax_rows(x).unwrap();
        let total = tape.sum(s).unwrap();
        assert!((tape.value(total).item() - 3.0).abs() < 1e-12);
        let g = tape.backward(total).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1e200));
        assert_eq!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn counters_track_score_products() {
        let mut tape = Tape::new();
        let a = tape.param(rand(2, 3, 1));
        let _ = tape.matmul_nt(a, a).unwrap();
        let t = tape.transpose(a).unwrap();
        let _ = tape.matmul(a, t).unwrap();
        assert_eq!(tape.counters(), OpCounters { matmuls: 2, score_products: 1 });
    }

    #[test]
    fn backward_is_deterministic() {
        let build: &Build = &|t, v| {
            let p = t.matmul_nt(v[0], v[1])?;
            t.softmax_rows(p)
        };
        let inputs = [rand(4, 3, 1), rand(5, 3, 2)];
        assert_eq!(eval(build, &inputs), eval(build, &inputs));
    }

    #[test]
    fn fd_products() {
        check(&|t, v| t.matmul(v[0], v[1]), &[rand(3, 4, 1), rand(4, 2, 2)]);
        check(&|t, v| t.matmul_nt(v[0], v[1]), &[rand(3, 4, 3), rand(5, 4, 4)]);
        check(&|t, v| t.transpose(v[0]), &[rand(3, 4, 5)]);
    }

    #[test]
    fn fd_elementwise() {
        check(&|t, v| t.add(v[0], v[1]), &[rand(2, 3, 1), rand(2, 3, 2)]);
        check(&|t, v| t.add_row(v[0], v[1]), &[rand(3, 4, 1), rand(1, 4, 2)]);
        check(&|t, v| t.add_col(v[0], v[1]), &[rand(3, 4, 1), rand(3, 1, 2)]);
        check(&|t, v| t.mul(v[0], v[1]), &[rand(2, 3, 3), rand(2, 3, 4)]);
        check(&|t, v| t.scale(v[0], -1.7), &[rand(2, 3, 5)]);
        check(&|t, v| t.const_sub(&rand(2, 2, 9), v[0]), &[rand(2, 2, 6)]);
        check(&|t, v| t.gelu(v[0]), &[rand(3, 3, 7)]);
        check(&|t, v| t.cos(v[0]), &[rand(3, 3, 8)]);
        check(&|t, v| t.sin(v[0]), &[rand(3, 3, 9)]);
    }

    #[test]
    fn fd_reductions() {
        check(&|t, v| t.softmax_rows(v[0]), &[rand(3, 5, 1)]);
        check(&|t, v| t.logsumexp_rows(v[0]), &[rand(4, 3, 2)]);
        check(&|t, v| t.logsumexp_cols(v[0]), &[rand(4, 3, 3)]);
        check(&|t, v| t.layer_norm(v[0], v[1], v[2]), &[rand(3, 6, 4), rand(1, 6, 5), rand(1, 6, 6)]);
        check(&|t, v| t.sum(v[0]), &[rand(2, 2, 7)]);
    }

    #[test]
    fn fd_structural() {
        check(&|t, v| t.concat_cols(v[0], v[1]), &[rand(3, 2, 1), rand(3, 4, 2)]);
        check(&|t, v| t.concat_rows(v[0], v[1]), &[rand(2, 3, 3), rand(1, 3, 4)]);
        check(&|t, v| t.slice_rows(v[0], 1, 3), &[rand(4, 3, 5)]);
        check(&|t, v| t.slice_cols(v[0], 1, 4), &[rand(2, 5, 6)]);
        check(&|t, v| t.dustbin_augment(v[0], v[1]), &[rand(3, 2, 7), rand(1, 1, 8)]);
        check(&|t, v| t.gather_sum(v[0], vec![(0, 1), (2, 0), (0, 1)]), &[rand(3, 2, 9)]);
    }

    /// The same iterations built from elementary ops.
    fn composed_sinkhorn(t: &mut Tape, z: Var, mu: &[f64], nu: &[f64], iters: usize, offset: f64) -> Result<Var> {
        let (m, n) = (mu.len(), nu.len());
        let mu_t = Tensor::from_vec(m, 1, mu.to_vec())?;
        let nu_t = Tensor::from_vec(1, n, nu.to_vec())?;
        let mut v = t.constant(Tensor::zeros(1, n));
        let mut u = t.constant(Tensor::zeros(m, 1));
        for _ in 0..iters {
            let zv = t.add_row(z, v)?;
            let l = t.logsumexp_rows(zv)?;
            u = t.const_sub(&mu_t, l)?;
            let zu = t.add_col(z, u)?;
            let l = t.logsumexp_cols(zu)?;
            v = t.const_sub(&nu_t, l)?;
        }
        let out = t.add_col(z, u)?;
        let out = t.add_row(out, v)?;
        let shift = t.constant(Tensor::filled(m, n, offset));
        t.add(out, shift)
    }

    #[test]
    fn fd_sinkhorn() {
        let mu = vec![-1.2, -1.2, -0.4];
        let nu = vec![-1.2, -1.2, -1.2, -0.9];
        for iters in [0, 1, 3, 20] {
            let (a, b) = (mu.clone(), nu.clone());
            check(&move |t, v| t.sinkhorn(v[0], a.clone(), b.clone(), iters, 0.7), &[rand(3, 4, 11)]);
        }
    }

    #[test]
    fn sinkhorn_matches_composed_ops() {
        let (mu, nu) = (vec![-1.5, -1.5, -1.5, -0.8], vec![-1.5, -1.5, -1.1]);
        let z0 = rand(4, 3, 12);
        let (a, b) = (mu.clone(), nu.clone());
        let fused: &Build = &move |t, v| t.sinkhorn(v[0], a.clone(), b.clone(), 15, 1.1);
        let (a, b) = (mu.clone(), nu.clone());
        let composed: &Build = &move |t, v| composed_sinkhorn(t, v[0], &a, &b, 15, 1.1);
        let (lf, gf) = eval(fused, &[z0.clone()]);
        let (lc, gc) = eval(composed, &[z0]);
        assert!((lf - lc).abs() < 1e-10);
        for (a, b) in gf[0].data().iter().zip(gc[0].data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let mut tape = Tape::new();
        let z = tape.param(rand(4, 3, 13));
        assert!(matches!(tape.sinkhorn(z, mu.clone(), vec![0.0; 2], 5, 0.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fd_bce() {
        let probs = Tensor::from_rows(&[[0.3, 0.7], [0.9, 0.1], [0.55, 0.45]]);
        check(&|t, v| t.bce_sum(v[0], vec![1.0, 0.0, 1.0], 1e-7), &[probs]);
    }

    #[test]
    fn bce_clamp_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_rows(&[[0.0, 1.0]]));
        let l = tape.bce_sum(p, vec![1.0], 1e-7).unwrap();
        assert!((tape.value(l).item() + (1e-7f64).ln()).abs() < 1e-9);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.param(rand(2, 3, 1));
        let b = tape.param(rand(2, 3, 2));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.backward(a), Err(Error::Dimension { .. })));
        assert!(matches!(tape.slice_rows(a, 1, 5), Err(Error::Dimension { .. })));
    }
}
