//! Operation tape: forward builders and the backward sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::{AdError, Tensor};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Matmul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    SoftmaxLast(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Gather { src: Var, idx: Vec<usize> },
    SelectCol { x: Var, col: usize },
    StopGrad,
    StRound(Var),
    ClampMin { x: Var, floor: f64 },
    /// Scalar whose gradient with respect to `x` was computed by the caller
    /// during the forward pass (used by the Monte Carlo fairness risk).
    WithGrad { x: Var, coeff: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
///
/// Rebuilt per forward pass; the backward sweep visits nodes in reverse
/// recording order, which is a reverse topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record a value that is treated as a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Record a leaf that participates in differentiation (parameters,
    /// or inputs whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise binary ops (equal shapes or scalar broadcast) ----

    fn check_binary(&self, op: &'static str, a: Var, b: Var) -> Result<(), AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || ta.is_scalar() || tb.is_scalar() {
            Ok(())
        } else {
            Err(AdError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn broadcast_apply(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.is_scalar() && !tb.is_scalar() {
            let s = ta.item();
            let data = tb.data().iter().map(|&y| f(s, y)).collect();
            Tensor::new(tb.shape().to_vec(), data).expect("broadcast shape")
        } else if tb.is_scalar() && !ta.is_scalar() {
            let s = tb.item();
            let data = ta.data().iter().map(|&x| f(x, s)).collect();
            Tensor::new(ta.shape().to_vec(), data).expect("broadcast shape")
        } else {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data).expect("broadcast shape")
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.check_binary("add", a, b)?;
        let value = self.broadcast_apply(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value, self.needs(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.check_binary("subtract", a, b)?;
        let value = self.broadcast_apply(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value, self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.check_binary("multiply", a, b)?;
        let value = self.broadcast_apply(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value, self.needs(&[a, b])))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.check_binary("divide", a, b)?;
        if let Some(index) = self.value(b).data().iter().position(|&y| y == 0.0) {
            return Err(AdError::Domain {
                op: "divide",
                index,
                value: 0.0,
            });
        }
        let value = self.broadcast_apply(a, b, |x, y| x / y);
        Ok(self.push(Op::Div(a, b), value, self.needs(&[a, b])))
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("unary shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), math::exp)
    }

    /// Natural log; rejects nonpositive operands instead of propagating
    /// non-finite values.
    pub fn ln(&mut self, x: Var) -> Result<Var, AdError> {
        if let Some(index) = self.value(x).data().iter().position(|&v| v <= 0.0) {
            return Err(AdError::Domain {
                op: "ln",
                index,
                value: self.value(x).data()[index],
            });
        }
        Ok(self.unary(x, Op::Ln(x), math::ln))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), math::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), math::tanh)
    }

    /// Elementwise maximum with zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), math::abs)
    }

    /// Elementwise maximum with a constant floor. Gradient passes through
    /// only where the input is above the floor.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin { x, floor }, |v| v.max(floor))
    }

    // ---- structured ops ----

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var, AdError> {
        let (ta, tb) = (self.value(lhs), self.value(rhs));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, value).expect("matmul shape");
        Ok(self.push(
            Op::Matmul { lhs, rhs, m, k, n },
            value,
            self.needs(&[lhs, rhs]),
        ))
    }

    /// `[rows, cols] + [cols]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AdError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let cols = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % cols])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("add_bias shape");
        Ok(self.push(Op::AddBias { x, bias }, value, self.needs(&[x, bias])))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.last_dim());
        let mut data = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = math::exp(v - max);
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("softmax shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::SoftmaxLast(x), value, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sum(x), Tensor::scalar(total), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total: f64 = t.data().iter().sum();
        let value = Tensor::scalar(total / t.len() as f64);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Mean(x), value, rg)
    }

    /// Sum over the last axis: `[rows, cols] -> [rows]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.last_dim());
        let data = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::RowSum(x), Tensor::vector(data), rg)
    }

    /// Concatenate along the last axis. All parts must agree on their
    /// leading extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let rows = self.value(parts[0]).rows();
        let lead_rank = self.value(parts[0]).shape().len().saturating_sub(1);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || t.shape().len().saturating_sub(1) != lead_rank {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        if shape.is_empty() {
            shape = vec![total];
        } else {
            *shape.last_mut().unwrap() = total;
        }
        let value = Tensor::new(shape, data).expect("concat shape");
        let rg = self.needs(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), value, rg))
    }

    /// `out[i] = src[idx[i]]` over a 1-D source; backward scatter-adds.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var, AdError> {
        let t = self.value(src);
        if t.shape().len() != 1 {
            return Err(AdError::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            Tensor::vector(data),
            rg,
        ))
    }

    /// Extract one column of a matrix: `[rows, cols] -> [rows]`.
    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var, AdError> {
        let t = self.value(x);
        if t.shape().len() != 2 || col >= t.shape()[1] {
            return Err(AdError::ShapeMismatch {
                op: "select_col",
                lhs: t.shape().to_vec(),
                rhs: vec![col],
            });
        }
        let cols = t.shape()[1];
        let data = (0..t.shape()[0]).map(|r| t.data()[r * cols + col]).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SelectCol { x, col }, Tensor::vector(data), rg))
    }

    /// Forward values identical to `x`; the backward pass propagates exactly
    /// zero through this node.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value, false)
    }

    /// Hard round at 0.5 (ties to 1) in the forward pass; identity in the
    /// backward pass.
    pub fn straight_through_round(&mut self, x: Var) -> Var {
        self.unary(x, Op::StRound(x), |v| if v >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Scalar with a caller-supplied gradient vector with respect to `x`.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, coeff: Vec<f64>) -> Result<Var, AdError> {
        if coeff.len() != self.value(x).len() {
            return Err(AdError::ShapeMismatch {
                op: "scalar_with_grad",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![coeff.len()],
            });
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::WithGrad { x, coeff }, Tensor::scalar(value), rg))
    }

    // ---- backward ----

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Accumulate into `v`, reducing a broadcast gradient when `v` is scalar.
    fn accumulate_broadcast(&mut self, v: Var, delta: &[f64]) {
        if self.value(v).is_scalar() && delta.len() > 1 {
            let s: f64 = delta.iter().sum();
            self.accumulate(v, &[s]);
        } else {
            self.accumulate(v, delta);
        }
    }

    /// Run the backward sweep from a scalar output seeded with 1.
    ///
    /// Every reachable differentiable node receives its gradient; nodes that
    /// are unreachable or severed by `stop_gradient` keep `None`, which reads
    /// back as exact zeros.
    pub fn backward(&mut self, output: Var) -> Result<(), AdError> {
        let out_value = self.value(output);
        if !out_value.is_scalar() {
            return Err(AdError::NonScalarOutput {
                shape: out_value.shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[id].clone() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.backward_op(Var(id), &op, &upstream);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                let da = self.expand_like(g, |_, _| 1.0, *a, *b);
                self.accumulate_broadcast(*a, &da);
                let db = self.expand_like(g, |_, _| 1.0, *a, *b);
                self.accumulate_broadcast(*b, &db);
            }
            Op::Sub(a, b) => {
                let da = self.expand_like(g, |_, _| 1.0, *a, *b);
                self.accumulate_broadcast(*a, &da);
                let db = self.expand_like(g, |_, _| -1.0, *a, *b);
                self.accumulate_broadcast(*b, &db);
            }
            Op::Mul(a, b) => {
                let da = self.expand_like(g, |_, y| y, *a, *b);
                self.accumulate_broadcast(*a, &da);
                let db = self.expand_like(g, |x, _| x, *a, *b);
                self.accumulate_broadcast(*b, &db);
            }
            Op::Div(a, b) => {
                let da = self.expand_like(g, |_, y| 1.0 / y, *a, *b);
                self.accumulate_broadcast(*a, &da);
                let db = self.expand_like(g, |x, y| -x / (y * y), *a, *b);
                self.accumulate_broadcast(*b, &db);
            }
            Op::Neg(x) => {
                let d: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(*x, &d);
            }
            Op::Exp(x) => {
                let out_vals = self.nodes[out.0].value.data().to_vec();
                let d: Vec<f64> = g.iter().zip(&out_vals).map(|(&gi, &o)| gi * o).collect();
                self.accumulate(*x, &d);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data().to_vec();
                let d: Vec<f64> = g.iter().zip(&xv).map(|(&gi, &v)| gi / v).collect();
                self.accumulate(*x, &d);
            }
            Op::Sigmoid(x) => {
                let out_vals = self.nodes[out.0].value.data().to_vec();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&out_vals)
                    .map(|(&gi, &s)| gi * s * (1.0 - s))
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::Tanh(x) => {
                let out_vals = self.nodes[out.0].value.data().to_vec();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&out_vals)
                    .map(|(&gi, &t)| gi * (1.0 - t * t))
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data().to_vec();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(&gi, &v)| gi * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::ClampMin { x, floor } => {
                let xv = self.value(*x).data().to_vec();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(&gi, &v)| if v >= *floor { gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::Matmul { lhs, rhs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = self.value(*lhs).data().to_vec();
                let b = self.value(*rhs).data().to_vec();
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += gij * b[l * n + j];
                        }
                    }
                }
                self.accumulate(*lhs, &da);
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = a[i * k + l];
                        for j in 0..n {
                            db[l * n + j] += ail * g[i * n + j];
                        }
                    }
                }
                self.accumulate(*rhs, &db);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, g);
                let cols = self.value(*bias).len();
                let mut db = vec![0.0; cols];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % cols] += gi;
                }
                self.accumulate(*bias, &db);
            }
            Op::SoftmaxLast(x) => {
                let out_vals = self.nodes[out.0].value.data().to_vec();
                let cols = self.nodes[out.0].value.last_dim();
                let rows = out_vals.len() / cols;
                let mut d = vec![0.0; out_vals.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[base + j] * out_vals[base + j]).sum();
                    for j in 0..cols {
                        d[base + j] = out_vals[base + j] * (g[base + j] - dot);
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0]; n];
                self.accumulate(*x, &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / n as f64; n];
                self.accumulate(*x, &d);
            }
            Op::RowSum(x) => {
                let t = self.value(*x);
                let (rows, cols) = (t.rows(), t.last_dim());
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = g[r];
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let rows = self.value(parts[0]).rows();
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(p, &d);
                    offset += w;
                }
            }
            Op::Gather { src, idx } => {
                let n = self.value(*src).len();
                let mut d = vec![0.0; n];
                for (i, &j) in idx.iter().enumerate() {
                    d[j] += g[i];
                }
                self.accumulate(*src, &d);
            }
            Op::SelectCol { x, col } => {
                let t = self.value(*x);
                let (rows, cols) = (t.shape()[0], t.shape()[1]);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + col] = g[r];
                }
                self.accumulate(*x, &d);
            }
            Op::StRound(x) => {
                self.accumulate(*x, g);
            }
            Op::WithGrad { x, coeff } => {
                let d: Vec<f64> = coeff.iter().map(|&c| c * g[0]).collect();
                self.accumulate(*x, &d);
            }
        }
    }

    /// Local derivative of a binary elementwise op with respect to one side,
    /// expanded to the broadcast output extent.
    fn expand_like(
        &self,
        g: &[f64],
        local: impl Fn(f64, f64) -> f64,
        a: Var,
        b: Var,
    ) -> Vec<f64> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = g.len();
        (0..n)
            .map(|i| {
                let x = if ta.is_scalar() { ta.item() } else { ta.data()[i] };
                let y = if tb.is_scalar() { tb.item() } else { tb.data()[i] };
                g[i] * local(x, y)
            })
            .collect()
    }

    /// Gradient accumulated at `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient at `v`, with exact zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Plain row-major matrix product used by the forward pass.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += ail * b[l * n + j];
            }
        }
    }
    out
}
