//! Reverse-mode differentiation over a small set of vector primitives.
//!
//! A [`Tape`] is recorded against one flat parameter vector. Leaves are either
//! constants or slices of that vector; interior nodes are affine maps, ReLU,
//! `exp`, a max-shifted `logsumexp`, and elementwise/scalar arithmetic. Every
//! node holds a dense vector (scalars are length one), so a whole MLP forward
//! pass is a handful of nodes rather than one node per multiply.
//!
//! [`Tape::backward`] never mutates the tape; the adjoints live in a buffer
//! owned by the call, so repeated calls return identical gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::network::Parameters;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param {
        offset: usize,
    },
    /// `W x + b` with `W` stored row-major (`rows x cols`) at `weight`, `b` right after it.
    Affine {
        input: usize,
        weight: usize,
        rows: usize,
        cols: usize,
    },
    Relu(usize),
    Exp(usize),
    LogSumExp(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `x - s` with the scalar node `s` broadcast over `x`.
    SubScalar {
        x: usize,
        s: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    /// `sum_i w_i x_i` with constant (detached) weights.
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
    Sum(usize),
    Concat(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Recorded computation over a parameter vector.
#[derive(Debug, Clone)]
pub struct Tape {
    id: u64,
    theta: Vec<f64>,
    nodes: Vec<Node>,
}

/// Partial derivatives of a scalar root with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &GradVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "gradient lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            *g *= factor;
        }
    }
}

/// Adjoints of every node plus the parameter gradient, for one root.
#[derive(Debug, Clone)]
pub struct Adjoints {
    tape: u64,
    nodes: Vec<Vec<f64>>,
    params: GradVector,
}

impl Adjoints {
    /// d(root)/d(node), elementwise.
    pub fn of(&self, node: NodeId) -> Result<&[f64]> {
        if node.tape != self.tape || node.index >= self.nodes.len() {
            return Err(Error::ForeignNode { index: node.index });
        }
        Ok(&self.nodes[node.index])
    }

    pub fn params(&self) -> &GradVector {
        &self.params
    }

    pub fn into_params(self) -> GradVector {
        self.params
    }
}

impl Tape {
    /// Starts an empty tape recorded against `theta`.
    pub fn new(theta: &[f64]) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            theta: theta.to_vec(),
            nodes: Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &[f64] {
        &self.nodes[self.check(node)].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, node: NodeId) -> Result<f64> {
        let idx = self.try_index(node)?;
        match self.nodes[idx].value.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::Shape(format!(
                "expected a scalar node, found length {}",
                other.len()
            ))),
        }
    }

    fn try_index(&self, node: NodeId) -> Result<usize> {
        if node.tape == self.id && node.index < self.nodes.len() {
            Ok(node.index)
        } else {
            Err(Error::ForeignNode { index: node.index })
        }
    }

    fn check(&self, node: NodeId) -> usize {
        assert!(
            node.tape == self.id && node.index < self.nodes.len(),
            "node {} is not on this tape",
            node.index
        );
        node.index
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        self.push(Op::Constant, values.to_vec())
    }

    /// Leaf holding `theta[offset..offset + len]`.
    pub fn param(&mut self, offset: usize, len: usize) -> Result<NodeId> {
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= self.theta.len())
            .ok_or_else(|| {
                Error::Shape(format!(
                    "parameter slice {offset}..{offset}+{len} exceeds {} parameters",
                    self.theta.len()
                ))
            })?;
        let value = self.theta[offset..end].to_vec();
        Ok(self.push(Op::Param { offset }, value))
    }

    /// `W x + b`; `W` is `rows x cols` row-major at `weight`, followed by `rows` biases.
    pub fn affine(&mut self, input: NodeId, weight: usize, rows: usize, cols: usize) -> Result<NodeId> {
        let x = self.check(input);
        if self.nodes[x].value.len() != cols {
            return Err(Error::Shape(format!(
                "affine layer expects input width {cols}, got {}",
                self.nodes[x].value.len()
            )));
        }
        if weight + rows * cols + rows > self.theta.len() {
            return Err(Error::Shape(format!(
                "affine layer at offset {weight} ({rows}x{cols}) exceeds {} parameters",
                self.theta.len()
            )));
        }
        let xs = &self.nodes[x].value;
        let w = &self.theta[weight..weight + rows * cols];
        let b = &self.theta[weight + rows * cols..weight + rows * cols + rows];
        let value = w
            .chunks_exact(cols)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(xs).map(|(a, v)| a * v).sum::<f64>() + bias)
            .collect();
        Ok(self.push(
            Op::Affine {
                input: x,
                weight,
                rows,
                cols,
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let i = self.check(x);
        let value = self.nodes[i].value.iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(i), value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let i = self.check(x);
        let value = self.nodes[i].value.iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(i), value)
    }

    /// Max-shifted `log(sum(exp(x)))`, a scalar node.
    pub fn logsumexp(&mut self, x: NodeId) -> NodeId {
        let i = self.check(x);
        let value = vec![logsumexp(&self.nodes[i].value)];
        self.push(Op::LogSumExp(i), value)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Vec<f64>) {
        let (ia, ib) = (self.check(a), self.check(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(va.len(), vb.len(), "elementwise operands differ in length");
        let value = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        (ia, ib, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ia, ib, value) = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(ia, ib), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ia, ib, value) = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(ia, ib), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ia, ib, value) = self.binary(a, b, |x, y| x * y);
        self.push(Op::Mul(ia, ib), value)
    }

    /// `x - s`, broadcasting the scalar node `s`.
    pub fn sub_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (ix, is) = (self.check(x), self.check(s));
        assert_eq!(self.nodes[is].value.len(), 1, "broadcast operand must be scalar");
        let sv = self.nodes[is].value[0];
        let value = self.nodes[ix].value.iter().map(|v| v - sv).collect();
        self.push(Op::SubScalar { x: ix, s: is }, value)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let i = self.check(x);
        let value = self.nodes[i].value.iter().map(|v| v * factor).collect();
        self.push(Op::Scale { x: i, factor }, value)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    /// `sum_i w_i x_i`; the weights are constants and receive no gradient.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> NodeId {
        let i = self.check(x);
        assert_eq!(self.nodes[i].value.len(), weights.len(), "weight count mismatch");
        let value = vec![self.nodes[i].value.iter().zip(weights).map(|(v, w)| v * w).sum()];
        self.push(
            Op::WeightedSum {
                x: i,
                weights: weights.to_vec(),
            },
            value,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let i = self.check(x);
        let value = vec![self.nodes[i].value.iter().sum()];
        self.push(Op::Sum(i), value)
    }

    /// Joins nodes end to end into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let value = idx.iter().flat_map(|&i| self.nodes[i].value.iter().copied()).collect();
        self.push(Op::Concat(idx), value)
    }

    /// Gradient of the scalar `root` with respect to the tape's parameters.
    pub fn backward(&self, root: NodeId) -> Result<GradVector> {
        self.adjoints(root).map(Adjoints::into_params)
    }

    /// Full reverse sweep from `root`, exposing per-node adjoints.
    pub fn adjoints(&self, root: NodeId) -> Result<Adjoints> {
        let r = self.try_index(root)?;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, found length {}",
                self.nodes[r].value.len()
            )));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        let mut grad = vec![0.0; self.theta.len()];
        adj[r][0] = 1.0;

        for i in (0..=r).rev() {
            if adj[i].iter().all(|&a| a == 0.0) {
                continue;
            }
            // Inputs always precede `i`, so splitting here gives disjoint borrows.
            let (before, rest) = adj.split_at_mut(i);
            let out = &rest[0];
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (g, a) in grad[*offset..*offset + out.len()].iter_mut().zip(out) {
                        *g += a;
                    }
                }
                Op::Affine {
                    input,
                    weight,
                    rows,
                    cols,
                } => {
                    let xs = &self.nodes[*input].value;
                    let w = &self.theta[*weight..*weight + rows * cols];
                    let dx = &mut before[*input];
                    for (r_i, &dy) in out.iter().enumerate() {
                        if dy == 0.0 {
                            continue;
                        }
                        let row = &w[r_i * cols..(r_i + 1) * cols];
                        let gw = &mut grad[*weight + r_i * cols..*weight + (r_i + 1) * cols];
                        for c in 0..*cols {
                            dx[c] += row[c] * dy;
                            gw[c] += dy * xs[c];
                        }
                    }
                    let bias = *weight + rows * cols;
                    for (g, dy) in grad[bias..bias + rows].iter_mut().zip(out) {
                        *g += dy;
                    }
                }
                Op::Relu(x) => {
                    let xs = &self.nodes[*x].value;
                    for ((d, a), v) in before[*x].iter_mut().zip(out).zip(xs) {
                        if *v > 0.0 {
                            *d += a;
                        }
                    }
                }
                Op::Exp(x) => {
                    for ((d, a), y) in before[*x].iter_mut().zip(out).zip(&node.value) {
                        *d += a * y;
                    }
                }
                Op::LogSumExp(x) => {
                    let lse = node.value[0];
                    for (d, v) in before[*x].iter_mut().zip(&self.nodes[*x].value) {
                        *d += out[0] * (v - lse).exp();
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut before[*a], out, 1.0);
                    accumulate(&mut before[*b], out, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut before[*a], out, 1.0);
                    accumulate(&mut before[*b], out, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for ((d, g), y) in before[*a].iter_mut().zip(out).zip(vb) {
                        *d += g * y;
                    }
                    for ((d, g), x) in before[*b].iter_mut().zip(out).zip(va) {
                        *d += g * x;
                    }
                }
                Op::SubScalar { x, s } => {
                    accumulate(&mut before[*x], out, 1.0);
                    before[*s][0] -= out.iter().sum::<f64>();
                }
                Op::Scale { x, factor } => accumulate(&mut before[*x], out, *factor),
                Op::WeightedSum { x, weights } => {
                    for (d, w) in before[*x].iter_mut().zip(weights) {
                        *d += out[0] * w;
                    }
                }
                Op::Sum(x) => {
                    for d in before[*x].iter_mut() {
                        *d += out[0];
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = before[p].len();
                        accumulate(&mut before[p], &out[start..start + n], 1.0);
                        start += n;
                    }
                }
            }
        }

        Ok(Adjoints {
            tape: self.id,
            nodes: adj,
            params: GradVector(grad),
        })
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// `log(sum(exp(x)))` shifted by `max(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Result of recording an MLP forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub tape: Tape,
    pub logits: NodeId,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        self.tape.value(self.logits)
    }
}

/// Records `params` applied to `input`: affine layers with ReLU between them.
pub fn forward_mlp(params: &Parameters, input: &[f64]) -> Result<Forward> {
    let widths = params.widths();
    if input.len() != widths[0] {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            input.len(),
            widths[0]
        )));
    }
    let mut tape = Tape::new(params.values());
    let mut h = tape.constant(input);
    let layers = params.layers();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        h = tape.affine(h, layer.weight_offset, layer.fan_out, layer.fan_in)?;
        if l != last {
            h = tape.relu(h);
        }
    }
    Ok(Forward { tape, logits: h })
}

/// Central differences `(f(θ + ε e_i) - f(θ - ε e_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut eval: F, params: &Parameters, eps: f64) -> Result<GradVector>
where
    F: FnMut(&Parameters) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.values_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.values_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(GradVector(grad))
}
