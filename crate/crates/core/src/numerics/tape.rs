//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] walks the recorded
//! nodes once, in reverse order, and accumulates gradients into the leaves.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    SumSquares(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
    },
}

/// Identifies a primitive, used by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sum,
    SumSquares,
    BatchNorm,
    CrossEntropy,
    KlDiv,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sum,
        OpKind::SumSquares,
        OpKind::BatchNorm,
        OpKind::CrossEntropy,
        OpKind::KlDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::SumSquares => "sum_squares",
            OpKind::BatchNorm => "batch_norm",
            OpKind::CrossEntropy => "softmax_cross_entropy",
            OpKind::KlDiv => "kl_divergence",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Zeroes every leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn finite(value: Tensor<T>, what: &'static str) -> Result<Tensor<T>> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let out = Self::finite(out, "matmul")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x[B×C] + b[C]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let bias = self.value(b);
        if bias.numel() != cols {
            return Err(Error::Shape(format!(
                "bias of length {} for {cols} columns",
                bias.numel()
            )));
        }
        let xd = self.value(x).data();
        let bd = bias.data();
        let data = (0..rows * cols).map(|i| xd[i] + bd[i % cols]).collect();
        let out = Self::finite(Tensor::new(vec![rows, cols], data)?, "add_bias")?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Self::finite(self.zip_same(a, b, "add", |x, y| x + y)?, "add")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Self::finite(self.zip_same(a, b, "sub", |x, y| x - y)?, "sub")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Self::finite(self.zip_same(a, b, "mul", |x, y| x * y)?, "mul")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = Self::finite(self.value(a).map(|x| x * s), "scale")?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Relu(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Self::finite(Tensor::scalar(self.value(x).sum()), "sum")?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Sum(x), ng))
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let out = Self::finite(Tensor::scalar(s), "sum_squares")?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SumSquares(x), ng))
    }

    /// Batch normalization over the rows of `x[B×C]`, output `γ·x̂ + β`.
    ///
    /// In [`BnMode::Train`] the batch mean and biased variance normalize the
    /// input, and `stats` moves toward the batch mean and unbiased variance
    /// with momentum 0.1. In [`BnMode::Eval`], `stats` normalizes the input
    /// and is left untouched.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let (b, c) = self.value(x).dims2()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm affine parameters must have {c} channels"
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm running stats must have {c} channels"
            )));
        }
        if mode == BnMode::Train && b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        let eps = T::lit(BN_EPS);
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                let bn = T::from_count(b);
                let mut mean = vec![T::zero(); c];
                for i in 0..b {
                    for j in 0..c {
                        mean[j] = mean[j] + xd[i * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / bn);
                let mut var = vec![T::zero(); c];
                for i in 0..b {
                    for j in 0..c {
                        let d = xd[i * c + j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / bn);
                (mean, var)
            }
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); b * c];
        let mut out = vec![T::zero(); b * c];
        for i in 0..b {
            for j in 0..c {
                let k = i * c + j;
                xhat[k] = (xd[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + be[j];
            }
        }
        let out = Self::finite(Tensor::new(vec![b, c], out)?, "batch_norm")?;
        if mode == BnMode::Train {
            let m = T::lit(BN_MOMENTUM);
            let unbias = T::from_count(b) / T::from_count(b - 1);
            for j in 0..c {
                stats.mean[j] = (T::one() - m) * stats.mean[j] + m * mean[j];
                stats.var[j] = (T::one() - m) * stats.var[j] + m * var[j] * unbias;
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
            ng,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{} labels for {b} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let z = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss = loss + (lse - row[y]);
        }
        let loss = loss / T::from_count(b);
        let out = Self::finite(Tensor::scalar(loss), "softmax_cross_entropy")?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over the batch of `KL(softmax(teacher) ‖ softmax(student))`.
    ///
    /// The teacher side never receives a gradient.
    pub fn kl_divergence(&mut self, teacher_logits: Var, student_logits: Var) -> Result<Var> {
        let (tp, tq) = (self.value(teacher_logits), self.value(student_logits));
        if !tp.same_shape(tq) {
            return Err(Error::Shape(format!(
                "kl_divergence: shapes {:?} and {:?} differ",
                tp.shape(),
                tq.shape()
            )));
        }
        let (b, c) = tp.dims2()?;
        let mut p = vec![T::zero(); b * c];
        let mut q = vec![T::zero(); b * c];
        let mut kl = T::zero();
        for i in 0..b {
            let (rp, rq) = (tp.row(i), tq.row(i));
            let (lp, lq) = (log_sum_exp(rp), log_sum_exp(rq));
            for j in 0..c {
                let log_p = rp[j] - lp;
                let log_q = rq[j] - lq;
                let pj = log_p.exp();
                p[i * c + j] = pj;
                q[i * c + j] = log_q.exp();
                if pj > T::zero() {
                    kl = kl + pj * (log_p - log_q);
                }
            }
        }
        let kl = kl / T::from_count(b);
        let out = Self::finite(Tensor::scalar(kl), "kl_divergence")?;
        let ng = self.ng(&[student_logits]);
        Ok(self.push(
            out,
            Op::KlDiv {
                student: student_logits,
                teacher_probs: p,
                student_probs: q,
            },
            ng,
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss` into every leaf that
    /// requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, nn) = tb.dims2()?;
                let gt = Tensor::new(vec![m, nn], g.to_vec())?;
                if want(*a) {
                    out.push((*a, gt.matmul(&tb.transpose()?)?.into_data()));
                }
                if want(*b) {
                    out.push((*b, ta.transpose()?.matmul(&gt)?.into_data()));
                }
                debug_assert_eq!(m * k, ta.numel());
            }
            Op::AddBias(x, b) => {
                let cols = self.value(*b).numel();
                if want(*x) {
                    out.push((*x, g.to_vec()));
                }
                if want(*b) {
                    let mut gb = vec![T::zero(); cols];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % cols] = gb[i % cols] + v;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(db).map(|(&u, &w)| u * w).collect()));
                out.push((*b, g.iter().zip(da).map(|(&u, &w)| u * w).collect()));
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::SumSquares(x) => {
                let two = T::lit(2.0);
                out.push((*x, self.value(*x).data().iter().map(|&v| two * v * g[0]).collect()));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c) = self.value(*x).dims2()?;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..b {
                    for j in 0..c {
                        let k = i * c + j;
                        dgamma[j] = dgamma[j] + g[k] * xhat[k];
                        dbeta[j] = dbeta[j] + g[k];
                    }
                }
                if want(*x) {
                    let mut dx = vec![T::zero(); b * c];
                    if *batch_stats {
                        // dx = γ·inv/B · (B·dy − Σdy − x̂·Σ(dy·x̂))
                        let bn = T::from_count(b);
                        for i in 0..b {
                            for j in 0..c {
                                let k = i * c + j;
                                dx[k] = gm[j] * inv_std[j] / bn
                                    * (bn * g[k] - dbeta[j] - xhat[k] * dgamma[j]);
                            }
                        }
                    } else {
                        for i in 0..b {
                            for j in 0..c {
                                let k = i * c + j;
                                dx[k] = g[k] * gm[j] * inv_std[j];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let (b, c) = self.value(*logits).dims2()?;
                let scale = g[0] / T::from_count(b);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] = d[i * c + y] - scale;
                }
                out.push((*logits, d));
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                let (b, _) = self.value(*student).dims2()?;
                let scale = g[0] / T::from_count(b);
                out.push((
                    *student,
                    student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(&q, &p)| (q - p) * scale)
                        .collect(),
                ));
            }
        }
        Ok(out)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    Tensor::new(vec![b, c], out)
}
