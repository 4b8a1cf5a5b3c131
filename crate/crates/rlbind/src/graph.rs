//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] records every primitive applied to its nodes in execution
//! order. [`Graph::backward`] replays the tape in exact reverse order and
//! accumulates gradients into every node that (transitively) depends on a
//! `requires_grad` leaf. Values are 64-bit floats throughout so gradient
//! checks and distribution identities hold at tight tolerances.
//!
//! Non-differentiable points use the usual projected-gradient conventions,
//! fixed here and relied on elsewhere:
//! - `sign(0) = 0`, and `sign` has zero gradient everywhere;
//! - `relu'(0) = 0`;
//! - `abs'(0) = 0`;
//! - `clamp` passes gradient through on the closed interval `[lo, hi]` and
//!   blocks it outside;
//! - the gradient of `l2norm` at the zero vector is zero.
//!
//! `softmax` subtracts the row max before exponentiating; `log_softmax` is
//! fused as `x - logsumexp(x)` so `log(softmax(x))` never touches `log(0)`.
//!
//! A graph is single-threaded; independent graphs may live on different
//! threads freely.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// x * c for a fixed constant c.
    Scale(NodeId, f64),
    /// x + c; the constant is folded into the forward value.
    Offset(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2Norm(NodeId),
    Abs(NodeId),
    /// x^p elementwise for a fixed exponent p.
    Pow(NodeId, f64),
    Concat(Vec<NodeId>),
    /// Contiguous range [start, start+len) of a vector.
    Slice(NodeId, usize, usize),
    Clamp(NodeId, f64, f64),
    /// sign(x); has zero derivative everywhere, so no input link is kept.
    Sign,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_ran: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf holding `value`. Gradients are accumulated for it only
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_member(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::DetachedNode { id: id.0 });
        }
        Ok(())
    }

    /// Record one op output, verifying finiteness.
    fn record(&mut self, op_name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Result<NodeId> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs = match &op {
            Op::Leaf | Op::Sign => false,
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2Norm(a)
            | Op::Abs(a)
            | Op::Pow(a, _)
            | Op::Slice(a, _, _)
            | Op::Clamp(a, _, _) => self.nodes[a.0].needs_grad,
        };
        let t = Tensor::new(shape, value).map_err(|_| Error::NonFinite { op: op_name })?;
        Ok(self.push(t, op, needs))
    }

    // ---- shape helpers -------------------------------------------------

    /// Elementwise binary shape rule: identical shapes, or one side scalar.
    fn ew_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        self.check_member(a)?;
        self.check_member(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if self.value(a).is_scalar() {
            return Ok(sb.to_vec());
        }
        if self.value(b).is_scalar() {
            return Ok(sa.to_vec());
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn want_vector(&self, op: &'static str, a: NodeId) -> Result<usize> {
        self.check_member(a)?;
        let s = self.value(a).shape();
        if s.len() == 1 {
            Ok(s[0])
        } else {
            Err(Error::UnsupportedShape {
                op,
                expected: "a 1-D vector",
                shape: s.to_vec(),
            })
        }
    }

    // ---- primitives ----------------------------------------------------

    /// Matrix product: (m,k)x(k,n) -> (m,n) or (m,k)x(k) -> (m).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        self.check_member(b)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        match sb.len() {
            1 => {
                if sb[0] != k {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &va[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(vb).map(|(x, y)| x * y).sum();
                }
                self.record("matmul", out, vec![m], Op::Matmul(a, b))
            }
            2 => {
                if sb[0] != k {
                    return Err(mismatch());
                }
                let n = sb[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = va[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &vb[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aip * brow[j];
                        }
                    }
                }
                self.record("matmul", out, vec![m, n], Op::Matmul(a, b))
            }
            _ => Err(mismatch()),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shape("add", a, b)?;
        let out = ew_apply(self.data(a), self.data(b), |x, y| x + y);
        self.record("add", out, shape, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shape("sub", a, b)?;
        let out = ew_apply(self.data(a), self.data(b), |x, y| x - y);
        self.record("sub", out, shape, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ew_shape("mul", a, b)?;
        let out = ew_apply(self.data(a), self.data(b), |x, y| x * y);
        self.record("mul", out, shape, Op::Mul(a, b))
    }

    /// x * c for constant c.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.record("scale", out, shape, Op::Scale(a, c))
    }

    /// x + c for constant c.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x + c).collect();
        self.record("offset", out, shape, Op::Offset(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x.max(0.0)).collect();
        self.record("relu", out, shape, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x.exp()).collect();
        self.record("exp", out, shape, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x.ln()).collect();
        self.record("log", out, shape, Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let s: f64 = self.data(a).iter().sum();
        self.record("sum", vec![s], vec![1], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.record("mean", vec![s / n], vec![1], Op::Mean(a))
    }

    /// Max-subtracted softmax of a vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.want_vector("softmax", a)?;
        let out = softmax_stable(self.data(a));
        self.record("softmax", out, vec![n], Op::Softmax(a))
    }

    /// `x - logsumexp(x)`, the numerically safe log of softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.want_vector("log_softmax", a)?;
        let x = self.data(a);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let out = x.iter().map(|v| v - lse).collect();
        self.record("log_softmax", out, vec![n], Op::LogSoftmax(a))
    }

    /// Euclidean norm of all elements, as a scalar node.
    pub fn l2norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let n = self.value(a).l2_norm();
        self.record("l2norm", vec![n], vec![1], Op::L2Norm(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x.abs()).collect();
        self.record("abs", out, shape, Op::Abs(a))
    }

    /// x^p elementwise for a fixed exponent.
    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x.powf(p)).collect();
        self.record("pow", out, shape, Op::Pow(a, p))
    }

    /// Concatenate vectors (and scalars) into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let mut total = 0;
        for &p in parts {
            total += self.want_vector("concat", p)?;
        }
        let mut out = Vec::with_capacity(total);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        self.record("concat", out, vec![total], Op::Concat(parts.to_vec()))
    }

    /// Elements [start, start+len) of a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.want_vector("slice", a)?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) out of bounds for vector of length {n}",
                start + len
            )));
        }
        let out = self.data(a)[start..start + len].to_vec();
        self.record("slice", out, vec![len], Op::Slice(a, start, len))
    }

    /// Clamp to [lo, hi]; gradient passes through on the closed interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.check_member(a)?;
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds inverted: [{lo}, {hi}]"
            )));
        }
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.record("clamp", out, shape, Op::Clamp(a, lo, hi))
    }

    /// sign(x) with sign(0) = 0; gradient is zero everywhere.
    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_member(a)?;
        let shape = self.value(a).shape().to_vec();
        let out = self.data(a).iter().map(|x| sign0(*x)).collect();
        self.record("sign", out, shape, Op::Sign)
    }

    // ---- composites ----------------------------------------------------

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    /// Elementwise maximum via `a + relu(b - a)`. Ties keep a's gradient.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(b, a)?;
        let r = self.relu(d)?;
        self.add(a, r)
    }

    /// Direction-preserving rescale to unit Euclidean norm.
    ///
    /// Fails on vectors with norm below 1e-12.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        const TOL: f64 = 1e-12;
        self.check_member(a)?;
        if self.value(a).l2_norm() <= TOL {
            return Err(Error::DegenerateVector {
                what: "l2_normalize",
                tol: TOL,
            });
        }
        let norm = self.l2norm(a)?;
        let inv = self.pow(norm, -1.0)?;
        self.mul(a, inv)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf ends up
    /// with a gradient buffer (zeros when the loss does not depend on it).
    /// Running backward twice on one graph is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_member(loss)?;
        if self.backward_ran {
            return Err(Error::BackwardAlreadyRan);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.backward_ran = true;

        // Leaves the caller marked requires_grad always expose a gradient.
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        self.nodes[loss.0]
            .grad
            .get_or_insert_with(|| vec![0.0; 1])[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("grad present");
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
        }
        Ok(())
    }

    /// True once backward has consumed this graph.
    pub fn backward_ran(&self) -> bool {
        self.backward_ran
    }

    /// Gradient of the loss w.r.t. `id`, available after [`Self::backward`].
    pub fn grad(&self, id: NodeId) -> Result<Tensor> {
        self.check_member(id)?;
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return Err(Error::InvalidArgument(format!(
                "node {} does not require grad",
                id.0
            )));
        }
        let data = match &node.grad {
            Some(g) => g.clone(),
            None => vec![0.0; node.value.len()],
        };
        Ok(Tensor::new(node.value.shape().to_vec(), data)
            .unwrap_or_else(|_| Tensor::zeros(node.value.shape())))
    }

    fn accumulate(&mut self, id: NodeId, contribution: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let buf = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.len()]);
        // Scalar nodes feeding broadcast ops collect the summed gradient.
        if buf.len() == 1 && contribution.len() > 1 {
            buf[0] += contribution.iter().sum::<f64>();
        } else {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf | Op::Sign => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = ew_apply(g, self.data(b), |gv, bv| gv * bv);
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ew_apply(g, self.data(a), |gv, av| gv * av);
                    self.accumulate(b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(a, &ga);
            }
            Op::Offset(a) => self.accumulate(a, g),
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Exp(a) => {
                let out = self.nodes[out_idx].value.data().to_vec();
                let ga: Vec<f64> = g.iter().zip(&out).map(|(gv, y)| gv * y).collect();
                self.accumulate(a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gv, x)| gv / x)
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.nodes[a.0].value.len()];
                self.accumulate(a, &ga);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let ga = vec![g[0] / n as f64; n];
                self.accumulate(a, &ga);
            }
            Op::Softmax(a) => {
                // dx = y * (g - <g, y>)
                let y = self.nodes[out_idx].value.data().to_vec();
                let gy: f64 = g.iter().zip(&y).map(|(gv, yv)| gv * yv).sum();
                let ga: Vec<f64> = g.iter().zip(&y).map(|(gv, yv)| yv * (gv - gy)).collect();
                self.accumulate(a, &ga);
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax(x) * sum(g)
                let sm: Vec<f64> = self.nodes[out_idx]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.exp())
                    .collect();
                let gs: f64 = g.iter().sum();
                let ga: Vec<f64> = g.iter().zip(&sm).map(|(gv, s)| gv - s * gs).collect();
                self.accumulate(a, &ga);
            }
            Op::L2Norm(a) => {
                let norm = self.nodes[out_idx].value.item();
                if norm > 0.0 {
                    let ga: Vec<f64> = self
                        .data(a)
                        .iter()
                        .map(|x| g[0] * x / norm)
                        .collect();
                    self.accumulate(a, &ga);
                }
                // subgradient 0 at the origin
            }
            Op::Abs(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gv, x)| gv * sign0(*x))
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Pow(a, p) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gv, x)| gv * p * x.powf(p - 1.0))
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let seg = g[offset..offset + n].to_vec();
                    self.accumulate(p, &seg);
                    offset += n;
                }
            }
            Op::Slice(a, start, len) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                ga[start..start + len].copy_from_slice(g);
                self.accumulate(a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gv, x)| if *x >= lo && *x <= hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (m, k) = (sa[0], sa[1]);
                if sb.len() == 1 {
                    // y = A x: dA = g (x)ᵀ outer, dx = Aᵀ g
                    if self.nodes[a.0].needs_grad {
                        let x = self.data(b).to_vec();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                da[i * k + p] = g[i] * x[p];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = self.data(a).to_vec();
                        let mut dx = vec![0.0; k];
                        for i in 0..m {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                dx[p] += av[i * k + p] * gi;
                            }
                        }
                        self.accumulate(b, &dx);
                    }
                } else {
                    let n = sb[1];
                    // Y = A B: dA = G Bᵀ, dB = Aᵀ G
                    if self.nodes[a.0].needs_grad {
                        let bv = self.data(b).to_vec();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] = acc;
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = self.data(a).to_vec();
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            for i in 0..m {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
            }
        }
    }
}

pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Apply a binary op under the scalar-broadcast rule used by add/sub/mul.
fn ew_apply(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (1, n) if n > 1 => b.iter().map(|y| f(a[0], *y)).collect(),
        (n, 1) if n > 1 => a.iter().map(|x| f(*x, b[0])).collect(),
        _ => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
    }
}

/// Max-subtracted softmax on a slice.
pub fn softmax_stable(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
