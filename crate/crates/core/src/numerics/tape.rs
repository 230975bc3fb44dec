//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node. Node
//! indices grow monotonically, so reverse index order is a valid
//! topological order for the backward sweep.

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{GlnError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training or inference behaviour for dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Per-batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Running mean/variance used by batch norm at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Matrix,
    pub var: Matrix,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: Matrix::zeros(1, features),
            var: Matrix::filled(1, features, 1.0),
        }
    }

    /// Exponential moving average update; the variance estimate is unbiased.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = Self::MOMENTUM;
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.as_mut_slice().iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.as_mut_slice().iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Mask(Var, Matrix),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Propagate {
        input: Var,
        adjacency: Matrix,
    },
    Attention {
        input: Var,
        attention: Var,
        neighbors: Vec<Vec<usize>>,
        slope: f64,
        scores: AttentionScores,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Pre-activation logits and normalized weights of graph attention, one entry
/// per directed edge, ordered by (block, node, neighbor position).
#[derive(Debug, Clone)]
pub struct AttentionScores {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Computes attention weights for every block of `neighbors.len()` rows of `z`.
///
/// For node `i` with neighbor `j`, the logit is `leaky_relu(a[..F]·z_i + a[F..]·z_j)`
/// and weights are the softmax of the logits over `j ∈ N(i)`.
pub fn attention_scores(
    z: &Matrix,
    attention: &Matrix,
    neighbors: &[Vec<usize>],
    slope: f64,
) -> Result<AttentionScores> {
    let n = neighbors.len();
    let f = z.cols();
    if attention.shape() != (2 * f, 1) {
        return Err(GlnError::Dimension {
            op: "attention",
            left: z.shape(),
            right: attention.shape(),
        });
    }
    if n == 0 || !z.rows().is_multiple_of(n) {
        return Err(GlnError::Dimension {
            op: "attention",
            left: z.shape(),
            right: (n, n),
        });
    }
    let (a_src, a_dst) = attention.as_slice().split_at(f);
    let proj = |r: usize, a: &[f64]| -> f64 { z.row(r).iter().zip(a).map(|(x, w)| x * w).sum() };
    let src: Vec<f64> = (0..z.rows()).map(|r| proj(r, a_src)).collect();
    let dst: Vec<f64> = (0..z.rows()).map(|r| proj(r, a_dst)).collect();

    let edges: usize = neighbors.iter().map(Vec::len).sum();
    let blocks = z.rows() / n;
    let mut logits = Vec::with_capacity(blocks * edges);
    let mut weights = Vec::with_capacity(blocks * edges);
    for b in 0..blocks {
        for (i, nbrs) in neighbors.iter().enumerate() {
            let start = logits.len();
            for &j in nbrs {
                let u = src[b * n + i] + dst[b * n + j];
                logits.push(if u > 0.0 { u } else { slope * u });
            }
            let row = &logits[start..];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|e| (e - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            weights.extend(exps.into_iter().map(|e| e / total));
        }
    }
    Ok(AttentionScores { logits, weights })
}

/// Records operations and propagates gradients backwards through them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf; receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v`, or zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GlnError::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds the `1×n` row `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs != (1, xs.1) {
            return Err(GlnError::Dimension {
                op: "add_row_bias",
                left: xs,
                right: bs,
            });
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..xs.0 {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.needs(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshaped(rows, cols)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Horizontal concatenation `[a, b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(GlnError::Dimension {
                op: "concat_cols",
                left: sa,
                right: sb,
            });
        }
        let mut value = Matrix::zeros(sa.0, sa.1 + sb.1);
        for r in 0..sa.0 {
            let row = value.row_mut(r);
            row[..sa.1].copy_from_slice(self.nodes[a.0].value.row(r));
            row[sa.1..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.needs(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    /// Inverted dropout. Identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(GlnError::Parameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask_data = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Matrix::from_vec(rows, cols, mask_data)?;
        Ok(self.masked(x, mask))
    }

    /// Elementwise product with a fixed (non-differentiable) mask.
    pub fn masked(&mut self, x: Var, mask: Matrix) -> Var {
        let mut value = self.value(x).clone();
        for (v, m) in value.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= m;
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::Mask(x, mask), rg)
    }

    /// Batch normalization over rows, with `1×n` affine `gamma`/`beta`.
    ///
    /// In [`Mode::Train`] batch statistics are used and returned so the
    /// caller can fold them into its [`RunningStats`]; in [`Mode::Eval`]
    /// `running` is used and no statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (m, n) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, n) {
                return Err(GlnError::Dimension {
                    op: "batch_norm",
                    left: (m, n),
                    right: self.shape(p),
                });
            }
        }
        if running.mean.shape() != (1, n) || running.var.shape() != (1, n) {
            return Err(GlnError::Dimension {
                op: "batch_norm",
                left: (m, n),
                right: running.mean.shape(),
            });
        }
        let xv = self.value(x);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if m == 0 {
                    return Err(GlnError::Parameter("batch norm on an empty batch".into()));
                }
                let mut mean = vec![0.0; n];
                for r in 0..m {
                    for (acc, v) in mean.iter_mut().zip(xv.row(r)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for r in 0..m {
                    for ((acc, v), mu) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (
                running.mean.as_slice().to_vec(),
                running.var.as_slice().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut normalized = Matrix::zeros(m, n);
        for r in 0..m {
            let src = xv.row(r);
            let dst = normalized.row_mut(r);
            for c in 0..n {
                dst[c] = (src[c] - mean[c]) * inv_std[c];
            }
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut value = normalized.clone();
        for r in 0..m {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            input: x,
            gamma,
            beta,
            normalized,
            inv_std,
            batch: mode == Mode::Train,
        };
        Ok((self.push(value, op, rg), stats))
    }

    /// Block-diagonal propagation: for each consecutive block of
    /// `adjacency.rows()` rows of `x`, computes `adjacency · block`.
    pub fn propagate(&mut self, x: Var, adjacency: &Matrix) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let n = adjacency.rows();
        if adjacency.cols() != n || n == 0 || rows % n != 0 {
            return Err(GlnError::Dimension {
                op: "propagate",
                left: (rows, cols),
                right: adjacency.shape(),
            });
        }
        let xv = self.value(x);
        let mut value = Matrix::zeros(rows, cols);
        for b in 0..rows / n {
            for i in 0..n {
                for j in 0..n {
                    let w = adjacency[(i, j)];
                    if w == 0.0 {
                        continue;
                    }
                    let src = xv.row(b * n + j).to_vec();
                    for (o, s) in value.row_mut(b * n + i).iter_mut().zip(&src) {
                        *o += w * s;
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        let op = Op::Propagate {
            input: x,
            adjacency: adjacency.clone(),
        };
        Ok(self.push(value, op, rg))
    }

    /// Attention-weighted aggregation `out_i = Σ_{j∈N(i)} α_ij z_j` over each
    /// block of `neighbors.len()` rows; see [`attention_scores`].
    pub fn graph_attention(
        &mut self,
        z: Var,
        attention: Var,
        neighbors: &[Vec<usize>],
        slope: f64,
    ) -> Result<Var> {
        let scores = attention_scores(self.value(z), self.value(attention), neighbors, slope)?;
        let zv = self.value(z);
        let n = neighbors.len();
        let mut value = Matrix::zeros(zv.rows(), zv.cols());
        let mut e = 0;
        for b in 0..zv.rows() / n {
            for (i, nbrs) in neighbors.iter().enumerate() {
                for &j in nbrs {
                    let w = scores.weights[e];
                    e += 1;
                    let src = zv.row(b * n + j).to_vec();
                    for (o, s) in value.row_mut(b * n + i).iter_mut().zip(&src) {
                        *o += w * s;
                    }
                }
            }
        }
        let rg = self.needs(&[z, attention]);
        let op = Op::Attention {
            input: z,
            attention,
            neighbors: neighbors.to_vec(),
            slope,
            scores,
        };
        Ok(self.push(value, op, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.needs(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Mean negative log-likelihood `−(1/m) Σ ln p[row, label]` of probability rows.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        check_labels(pv, labels)?;
        let m = pv.rows() as f64;
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &l)| pv[(r, l)].ln())
            .sum::<f64>()
            / m;
        let rg = self.needs(&[probs]);
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Matrix::filled(1, 1, loss), op, rg))
    }

    /// `cross_entropy(softmax_rows(logits))` evaluated through log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_labels(lv, labels)?;
        let m = lv.rows() as f64;
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let probs = softmax_rows(lv);
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Matrix::filled(1, 1, loss / m), op, rg))
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient.
    ///
    /// Intermediate gradients are recomputed on each call; leaf gradients
    /// accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(GlnError::Dimension {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.nodes[loss.0].grad = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, cg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn local_grads(&self, i: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.matmul_t(val(*b))?));
                }
                if wants(*b) {
                    out.push((*b, val(*a).t_matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRowBias(x, bias) => {
                out.push((*x, g.clone()));
                if wants(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                out.push((*x, Matrix::filled(r, c, g[(0, 0)])));
            }
            Op::Transpose(x) => out.push((*x, g.transpose())),
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                out.push((*x, g.clone().reshaped(r, c)?));
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = val(*a).shape();
                let cb = val(*b).cols();
                let mut ga = Matrix::zeros(rows, ca);
                let mut gb = Matrix::zeros(rows, cb);
                for r in 0..rows {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, v) in dx.as_mut_slice().iter_mut().zip(val(*x).as_slice()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                out.push((*x, dx));
            }
            Op::LeakyRelu(x, slope) => {
                let mut dx = g.clone();
                for (d, v) in dx.as_mut_slice().iter_mut().zip(val(*x).as_slice()) {
                    if *v <= 0.0 {
                        *d *= slope;
                    }
                }
                out.push((*x, dx));
            }
            Op::Mask(x, mask) => {
                let mut dx = g.clone();
                for (d, m) in dx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *d *= m;
                }
                out.push((*x, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch,
            } => {
                let (m, n) = g.shape();
                let gam = val(*gamma).as_slice();
                let mut dgamma = Matrix::zeros(1, n);
                let mut dbeta = Matrix::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        dgamma.as_mut_slice()[c] += g[(r, c)] * normalized[(r, c)];
                        dbeta.as_mut_slice()[c] += g[(r, c)];
                    }
                }
                if wants(*input) {
                    let mut dx = Matrix::zeros(m, n);
                    if *batch {
                        let mf = m as f64;
                        for c in 0..n {
                            // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                            let sum_dy = dbeta.as_slice()[c];
                            let sum_dy_xhat = dgamma.as_slice()[c];
                            for r in 0..m {
                                dx[(r, c)] = gam[c] * inv_std[c]
                                    * (g[(r, c)]
                                        - sum_dy / mf
                                        - normalized[(r, c)] * sum_dy_xhat / mf);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..n {
                                dx[(r, c)] = g[(r, c)] * gam[c] * inv_std[c];
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Propagate { input, adjacency } => {
                let n = adjacency.rows();
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for b in 0..g.rows() / n {
                    for i in 0..n {
                        for j in 0..n {
                            let w = adjacency[(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            let src = g.row(b * n + i).to_vec();
                            for (d, s) in dx.row_mut(b * n + j).iter_mut().zip(&src) {
                                *d += w * s;
                            }
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Attention {
                input,
                attention,
                neighbors,
                slope,
                scores,
            } => {
                let z = val(*input);
                let a = val(*attention).as_slice();
                let f = z.cols();
                let n = neighbors.len();
                let mut dz = Matrix::zeros(z.rows(), f);
                let mut d_src = vec![0.0; z.rows()];
                let mut d_dst = vec![0.0; z.rows()];
                let mut e = 0;
                for b in 0..z.rows() / n {
                    for (i, nbrs) in neighbors.iter().enumerate() {
                        let gi = g.row(b * n + i);
                        let start = e;
                        let mut d_alpha = Vec::with_capacity(nbrs.len());
                        for &j in nbrs {
                            let zj = z.row(b * n + j);
                            d_alpha.push(gi.iter().zip(zj).map(|(x, y)| x * y).sum::<f64>());
                            let w = scores.weights[e];
                            for (d, gv) in dz.row_mut(b * n + j).iter_mut().zip(gi) {
                                *d += w * gv;
                            }
                            e += 1;
                        }
                        let weights = &scores.weights[start..e];
                        let mean: f64 = weights.iter().zip(&d_alpha).map(|(w, d)| w * d).sum();
                        for (k, &j) in nbrs.iter().enumerate() {
                            let de = weights[k] * (d_alpha[k] - mean);
                            let du = if scores.logits[start + k] > 0.0 {
                                de
                            } else {
                                de * slope
                            };
                            d_src[b * n + i] += du;
                            d_dst[b * n + j] += du;
                        }
                    }
                }
                let (a_src, a_dst) = a.split_at(f);
                let mut da = Matrix::zeros(2 * f, 1);
                for r in 0..z.rows() {
                    let zr = z.row(r);
                    let (s, t) = (d_src[r], d_dst[r]);
                    for c in 0..f {
                        da.as_mut_slice()[c] += s * zr[c];
                        da.as_mut_slice()[f + c] += t * zr[c];
                    }
                    for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                        *d += s * a_src[c] + t * a_dst[c];
                    }
                }
                out.push((*input, dz));
                out.push((*attention, da));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { probs, labels } => {
                let p = val(*probs);
                let m = p.rows() as f64;
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                for (r, &l) in labels.iter().enumerate() {
                    dp[(r, l)] = -g[(0, 0)] / (m * p[(r, l)]);
                }
                out.push((*probs, dp));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = probs.rows() as f64;
                let scale = g[(0, 0)] / m;
                let mut dl = probs.map(|v| v * scale);
                for (r, &l) in labels.iter().enumerate() {
                    dl[(r, l)] -= scale;
                }
                out.push((*logits, dl));
            }
        }
        Ok(out)
    }
}

fn check_labels(m: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != m.rows() {
        return Err(GlnError::Dimension {
            op: "cross_entropy",
            left: m.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m.cols()) {
        return Err(GlnError::Index {
            what: "class label",
            index: bad,
            len: m.cols(),
        });
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
