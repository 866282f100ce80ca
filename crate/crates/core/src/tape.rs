//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node whose inputs already exist on the tape, so
//! insertion order is a topological order and backward is a single reverse
//! sweep. Parameter leaves carry the registry id of the slot they were read
//! from; [`Gradients::params`] hands their gradients back to the owner.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics participate in the derivative; fixed statistics do not.
        batch_stats: bool,
    },
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Mul(Var, Var),
    Add(Var, Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Statistics observed by a batch-statistics normalization, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// `(slot id, gradient)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(node, slot)| self.grads[node].as_deref().map(|g| (slot, g)))
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

fn softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, dst) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax(values: &[f64], cols: usize) -> Vec<f64> {
    softmax_rows(values, cols)
}

fn log_softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, dst) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = z - lse;
        }
    }
    out
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op_name, &values)?;
        let value = Tensor::new(shape, values)?;
        Ok(self.push(value, op))
    }

    /// Records a constant; gradients still flow to it but nobody reads them.
    pub fn input(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Input)
    }

    /// Records a trainable leaf bound to registry slot `slot`.
    pub fn param(&mut self, slot: usize, value: &Tensor) -> Var {
        let mut value = value.clone();
        value.clear_grad();
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let (av, bv) = (ta.values(), tb.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = av[i * k + p];
                for (d, &b_pj) in dst.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *d += a_ip * b_pj;
                }
            }
        }
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `x[i, j] + bias[j]`; the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = dims2("add_bias", tx)?;
        if tb.len() != n {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.values()) {
                *o += b;
            }
        }
        self.push_checked("add_bias", vec![m, n], out, Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.values().iter().map(|&v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        self.push_checked("relu", shape, out, Op::Relu(x))
    }

    /// Normalizes each column with the current batch's mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let (m, n) = dims2("batch_norm", tx)?;
        if m < 2 {
            return Err(Error::BatchTooSmall(m));
        }
        let xv = tx.values();
        let mut mean = vec![0.0; n];
        for row in xv.chunks(n) {
            for (mu, v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; n];
        for row in xv.chunks(n) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let stats = BatchStats { mean, var };
        let var = self.normalize(x, gamma, beta, &stats, true)?;
        Ok((var, stats))
    }

    /// Normalizes with externally supplied (running) statistics.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let stats = BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        self.normalize(x, gamma, beta, &stats, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchStats, batch_stats: bool) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = dims2("batch_norm", tx)?;
        if tg.len() != n || stats.mean.len() != n || stats.var.len() != n {
            return Err(mismatch("batch_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(mismatch("batch_norm", tx, tb));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for (i, row) in tx.values().chunks(n).enumerate() {
            for j in 0..n {
                let h = (row[j] - stats.mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                out[i * n + j] = tg.values()[j] * h + tb.values()[j];
            }
        }
        self.push_checked(
            "batch_norm",
            vec![m, n],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.values().iter().map(|v| v * factor).collect();
        let shape = tx.shape().to_vec();
        self.push_checked("scale", shape, out, Op::Scale(x, factor))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2("softmax", tx)?;
        let out = softmax_rows(tx.values(), n);
        self.push_checked("softmax", vec![m, n], out, Op::Softmax(x))
    }

    /// Fused `log(softmax(x))` via log-sum-exp; finite even where softmax underflows.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2("log_softmax", tx)?;
        let out = log_softmax_rows(tx.values(), n);
        self.push_checked("log_softmax", vec![m, n], out, Op::LogSoftmax(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.values().iter().map(|v| v.ln()).collect();
        let shape = tx.shape().to_vec();
        self.push_checked("log", shape, out, Op::Log(x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push_checked("mul", shape, out, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push_checked("add", shape, out, Op::Add(a, b))
    }

    /// `(m, n) -> (m, 1)`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2("sum_rows", tx)?;
        let out = tx.values().chunks(n).map(|r| r.iter().sum()).collect();
        self.push_checked("sum_rows", vec![m, 1], out, Op::SumRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).values().iter().sum();
        self.push_checked("sum", vec![1], vec![total], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mean = tx.values().iter().sum::<f64>() / tx.len() as f64;
        self.push_checked("mean", vec![1], vec![mean], Op::Mean(x))
    }

    /// Propagates `d root / d node` to every node that `root` depends on.
    ///
    /// Each call starts from fresh buffers; accumulation into parameters is the
    /// caller's job (see `Network::backward`).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2().unwrap();
                    let n = tb.dims2().unwrap().1;
                    let (av, bv) = (ta.values(), tb.values());
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let dy_row = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = dy_row.iter().zip(b_row).map(|(g, b)| g * b).sum();
                            let a_ip = av[i * k + p];
                            for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(dy_row) {
                                *d += a_ip * g;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, &dy);
                    accumulate(&mut grads, *bias, &db);
                }
                Op::Relu(x) => {
                    let dx: Vec<f64> = self
                        .value(*x)
                        .values()
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let n = inv_std.len();
                    let m = dy.len() / n;
                    let gv = self.value(*gamma).values();
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            dbeta[j] += g;
                            dgamma[j] += g * xhat[i * n + j];
                        }
                    }
                    let mut dx = vec![0.0; m * n];
                    if *batch_stats {
                        // dxhat = dy * gamma; column sums of dxhat are gamma * dbeta
                        // and of dxhat * xhat are gamma * dgamma.
                        let mf = m as f64;
                        for i in 0..m {
                            for j in 0..n {
                                let k = i * n + j;
                                let dxhat = dy[k] * gv[j];
                                dx[k] = inv_std[j] / mf
                                    * (mf * dxhat - gv[j] * dbeta[j] - xhat[k] * gv[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = dy[i * n + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gamma, &dgamma);
                    accumulate(&mut grads, *beta, &dbeta);
                }
                Op::Scale(x, factor) => {
                    let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Softmax(x) => {
                    let y = node.value.values();
                    let n = node.value.dims2().unwrap().1;
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LogSoftmax(x) => {
                    let n = node.value.dims2().unwrap().1;
                    let p = softmax_rows(self.value(*x).values(), n);
                    let mut dx = vec![0.0; p.len()];
                    for ((pr, gr), dr) in p.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, &pv), &g) in dr.iter_mut().zip(pr).zip(gr) {
                            *d = g - pv * total;
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Log(x) => {
                    let dx: Vec<f64> = self.value(*x).values().iter().zip(&dy).map(|(v, g)| g / v).collect();
                    check_finite("log backward", &dx)?;
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                    let da: Vec<f64> = dy.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = dy.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &dy);
                    accumulate(&mut grads, *b, &dy);
                }
                Op::SumRows(x) => {
                    let n = self.value(*x).dims2().unwrap().1;
                    let dx: Vec<f64> = dy.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sum(x) => {
                    let dx = vec![dy[0]; self.value(*x).len()];
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    let dx = vec![dy[0] / len as f64; len];
                    accumulate(&mut grads, *x, &dx);
                }
            }
            grads[idx] = Some(dy);
        }

        let params = self.nodes[..=root.0]
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(slot) => Some((i, slot)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}
