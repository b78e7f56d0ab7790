//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every op appends one node whose inputs were
//! created earlier, so the node vector is already in topological order and
//! [`Graph::backward`] is a single reverse sweep. Only the ops the
//! domain-adversarial network needs are provided, including the gradient
//! reversal pseudo-op [`Graph::grl`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Probability clamp used inside the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature statistics of one batch, produced by train-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

/// Running statistics of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// How a batchnorm node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'a> {
    Batch,
    Running(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Dropout {
        x: Var,
        mask: Matrix,
    },
    Grl {
        x: Var,
        lambda: f64,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    Ce {
        probs: Var,
        classes: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        c: Matrix,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, graph: &Graph) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = graph.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes are fixed by the forward pass"),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x·W + b` with `x: n×d`, `W: d×m`, `b: 1×m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::Dimension {
                op: "linear bias",
                left: wv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.matmul(wv).map_err(|_| Error::Dimension {
            op: "linear",
            left: xv.shape(),
            right: wv.shape(),
        })?;
        let bias = bv.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    /// Batch normalization over rows. With [`Normalization::Batch`] the
    /// batch statistics are returned so the caller can fold them into its
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != (1, m) {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    left: (n, m),
                    right: s,
                });
            }
        }
        let (mean, var, stats) = match norm {
            Normalization::Batch => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mean = xv.col_means();
                let mut var = vec![0.0; m];
                for row in xv.iter_rows() {
                    for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - mu) * (x - mu);
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
                let unbiased: Vec<f64> = var.iter().map(|v| v / (n - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, biased, Some(stats))
            }
            Normalization::Running(rs) => {
                if rs.mean.len() != m || rs.var.len() != m {
                    return Err(Error::Dimension {
                        op: "batch_norm running stats",
                        left: (n, m),
                        right: (1, rs.mean.len()),
                    });
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let normalized = Matrix::from_fn(n, m, |i, j| (xv[(i, j)] - mean[j]) * inv_std[j]);
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let out = Matrix::from_fn(n, m, |i, j| g[j] * normalized[(i, j)] + b[j]);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch: matches!(norm, Normalization::Batch),
            },
            needs,
        );
        Ok((var, stats))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, the input node is
    /// returned unchanged and no randomness is consumed.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Var {
        if mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = self.value(x).shape();
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep });
        let out = self.value(x).zip_map(&mask, |a, m| a * m).expect("mask has input shape");
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    /// Gradient reversal: identity forward, `-lambda · g` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        let needs = self.needs(x);
        self.push(out, Op::Grl { x, lambda }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows { x }, needs)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce_loss(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(Error::Dimension {
                op: "bce_loss",
                left: pv.shape(),
                right: (targets.len(), 1),
            });
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Label(format!("binary target {bad} is not 0 or 1")));
        }
        let loss = pv
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / targets.len() as f64;
        let needs = self.needs(p);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Mean categorical cross-entropy of row-stochastic `probs`.
    pub fn ce_loss(&mut self, probs: Var, classes: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.rows() != classes.len() {
            return Err(Error::Dimension {
                op: "ce_loss",
                left: pv.shape(),
                right: (classes.len(), 1),
            });
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= pv.cols()) {
            return Err(Error::Label(format!(
                "class index {bad} out of range for {} classes",
                pv.cols()
            )));
        }
        for (i, row) in pv.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("row {i} of ce_loss input sums to {s}")));
            }
        }
        let loss = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| -pv[(i, c)].max(PROB_EPS).ln())
            .sum::<f64>()
            / classes.len() as f64;
        let needs = self.needs(probs);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::Ce {
                probs,
                classes: classes.to_vec(),
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| Error::Dimension {
                op: "add",
                left: self.value(a).shape(),
                right: self.value(b).shape(),
            })?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |a, b| a * b).map_err(|_| Error::Dimension {
            op: "mul_const",
            left: self.value(x).shape(),
            right: c.shape(),
        })?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MulConst { x, c }, needs))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Matrix::filled(1, 1, s), Op::Sum { x }, needs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed_shape = self.value(loss).shape();
        if seed_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {seed_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if self.needs(*x) {
                    let dx = g.matmul_t(self.value(*w)).expect("linear backward");
                    accumulate(&mut grads[x.0], dx);
                }
                if self.needs(*w) {
                    let dw = self.value(*x).t_matmul(g).expect("linear backward");
                    accumulate(&mut grads[w.0], dw);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], Matrix::row_vector(&column_sums(g)));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv > 0.0 { gv } else { slope * gv })
                    .expect("leaky_relu backward");
                accumulate(&mut grads[x.0], dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch,
            } => {
                let (n, m) = g.shape();
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], Matrix::row_vector(&column_sums(g)));
                }
                if self.needs(*gamma) {
                    let mut dgamma = vec![0.0; m];
                    for i in 0..n {
                        for (j, dg) in dgamma.iter_mut().enumerate() {
                            *dg += g[(i, j)] * normalized[(i, j)];
                        }
                    }
                    accumulate(&mut grads[gamma.0], Matrix::row_vector(&dgamma));
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).row(0);
                    let dx = if *batch {
                        let nf = n as f64;
                        let mut sum_dxhat = vec![0.0; m];
                        let mut sum_dxhat_xhat = vec![0.0; m];
                        for i in 0..n {
                            for j in 0..m {
                                let dxhat = g[(i, j)] * gam[j];
                                sum_dxhat[j] += dxhat;
                                sum_dxhat_xhat[j] += dxhat * normalized[(i, j)];
                            }
                        }
                        Matrix::from_fn(n, m, |i, j| {
                            let dxhat = g[(i, j)] * gam[j];
                            inv_std[j] / nf
                                * (nf * dxhat - sum_dxhat[j] - normalized[(i, j)] * sum_dxhat_xhat[j])
                        })
                    } else {
                        Matrix::from_fn(n, m, |i, j| g[(i, j)] * gam[j] * inv_std[j])
                    };
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = g.zip_map(mask, |a, b| a * b).expect("dropout backward");
                accumulate(&mut grads[x.0], dx);
            }
            Op::Grl { x, lambda } => {
                accumulate(&mut grads[x.0], g.scale(-lambda));
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .zip_map(g, |p, gv| gv * p * (1.0 - p))
                    .expect("sigmoid backward");
                accumulate(&mut grads[x.0], dx);
            }
            Op::SoftmaxRows { x } => {
                let p = &node.value;
                let (n, m) = p.shape();
                let mut dx = Matrix::zeros(n, m);
                for i in 0..n {
                    let dotp: f64 = (0..m).map(|j| g[(i, j)] * p[(i, j)]).sum();
                    for j in 0..m {
                        dx[(i, j)] = p[(i, j)] * (g[(i, j)] - dotp);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Bce { p, targets } => {
                let seed = g[(0, 0)];
                let pv = self.value(*p);
                let n = targets.len() as f64;
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                for ((d, &pr), &y) in dp.as_mut_slice().iter_mut().zip(pv.as_slice()).zip(targets) {
                    if pr > PROB_EPS && pr < 1.0 - PROB_EPS {
                        *d = seed * (pr - y) / (pr * (1.0 - pr)) / n;
                    }
                }
                accumulate(&mut grads[p.0], dp);
            }
            Op::Ce { probs, classes } => {
                let seed = g[(0, 0)];
                let pv = self.value(*probs);
                let n = classes.len() as f64;
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                for (i, &c) in classes.iter().enumerate() {
                    let pr = pv[(i, c)];
                    if pr > PROB_EPS {
                        dp[(i, c)] = -seed / (pr * n);
                    }
                }
                accumulate(&mut grads[probs.0], dp);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::MulConst { x, c } => {
                accumulate(&mut grads[x.0], g.zip_map(c, |a, b| a * b).expect("mul_const backward"));
            }
            Op::Sum { x } => {
                let (r, c) = self.value(*x).shape();
                accumulate(&mut grads[x.0], Matrix::filled(r, c, g[(0, 0)]));
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; g.cols()];
    for row in g.iter_rows() {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
    }
    out
}
