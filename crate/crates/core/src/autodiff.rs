//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive pushes a node holding its forward value and enough cached
//! state to replay its adjoint. Nodes are appended in evaluation order, so the
//! tape is already topologically sorted and `backward` is a single reverse sweep.
//! Leaf gradients accumulate additively; nothing is reset implicitly.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    ComplementNll {
        logits: Var,
        labels: Vec<usize>,
        /// Per-row gradient of the row loss w.r.t. the logits (zero rows where clamped).
        row_grads: Vec<S>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<S>,
    },
    GradReverse(Var, S),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

fn row_max<S: Scalar>(row: &[S], mask: Option<&[bool]>) -> S {
    row.iter()
        .enumerate()
        .filter(|(j, _)| mask.is_none_or(|m| m[*j]))
        .fold(S::neg_infinity(), |acc, (_, &v)| acc.max(v))
}

/// Row-wise softmax restricted to `mask`; excluded columns get exactly zero mass.
fn softmax_rows<S: Scalar>(values: &[S], cols: usize, mask: Option<&[bool]>) -> Vec<S> {
    let mut out = vec![S::zero(); values.len()];
    for (row, dst) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row_max(row, mask);
        let mut total = S::zero();
        for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if mask.is_none_or(|mk| mk[j]) {
                *d = (x - m).exp();
                total += *d;
            }
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

fn check_mask(mask: Option<&[bool]>, cols: usize) -> Result<(), TensorError> {
    if let Some(m) = mask {
        if m.len() != cols {
            return Err(TensorError::MaskLength {
                mask: m.len(),
                cols,
            });
        }
        if !m.iter().any(|&b| b) {
            return Err(TensorError::EmptyMask);
        }
    }
    Ok(())
}

fn check_labels(
    labels: &[usize],
    rows: usize,
    cols: usize,
    mask: Option<&[bool]>,
    op: &'static str,
) -> Result<(), TensorError> {
    if labels.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![rows],
            rhs: vec![labels.len()],
        });
    }
    for (row, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(TensorError::IndexOutOfRange {
                op,
                index: y,
                len: cols,
            });
        }
        if mask.is_some_and(|m| !m[y]) {
            return Err(TensorError::LabelOutsideMask { row, label: y });
        }
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf; it receives gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<S>) -> Var {
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.values()[0]
    }

    /// Gradient stored on a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let src = self.value(a);
        let vals = src.values().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), vals).expect("same shape");
        self.push(t, op, &[a])
    }

    fn zip_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                for (d, &bpj) in dst.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *d += aip * bpj;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Broadcast-add a row vector (`[n]` or `[1, n]`) to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let rv = self.value(row);
        if rv.len() != n || !(rv.shape() == [n] || rv.shape() == [1, n]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: rv.shape().to_vec(),
            });
        }
        let rvals = rv.values();
        let vals = self
            .value(a)
            .values()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rvals).map(|(&x, &b)| x + b))
            .collect();
        let t = Tensor::new(vec![m, n], vals)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.values().iter().copied().sum();
        let m = s / S::of(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Column means of `a: [m, n]`, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("mean_rows")?;
        let mut out = vec![S::zero(); n];
        for r in self.value(a).values().chunks(n) {
            out.iter_mut().zip(r).for_each(|(o, &x)| *o += x);
        }
        let inv = S::one() / S::of(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    /// Selects rows of `a: [m, n]` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: m,
            });
        }
        let src = self.value(a);
        let vals = index.iter().flat_map(|&i| src.row(i).to_vec()).collect();
        let t = Tensor::new(vec![index.len(), n], vals)?;
        Ok(self.push(t, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Row-wise softmax with max subtraction. With `mask`, the support is
    /// restricted to columns where the mask is set.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("softmax")?;
        check_mask(mask, n)?;
        let p = softmax_rows(self.value(a).values(), n, mask);
        let t = Tensor::new(vec![m, n], p)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Mean softmax cross-entropy, fused so no probability is ever logged at zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.value(logits).dims2("cross_entropy")?;
        check_mask(mask, n)?;
        check_labels(labels, m, n, mask, "cross_entropy")?;
        let x = self.value(logits).values();
        let probs = softmax_rows(x, n, mask);
        let mut total = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * n..(i + 1) * n];
            let mx = row_max(row, mask);
            let lse = row
                .iter()
                .enumerate()
                .filter(|(j, _)| mask.is_none_or(|mk| mk[*j]))
                .map(|(_, &v)| (v - mx).exp())
                .sum::<S>()
                .ln()
                + mx;
            total += lse - row[y];
        }
        let loss = total / S::of(m as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean of `-log(max(1 - p_y, floor))` over rows, where `p` is the
    /// (optionally masked) softmax of `logits`. Computed as a difference of
    /// log-sum-exps so it stays finite as `p_y -> 1`. Clamped rows carry no
    /// gradient.
    pub fn complement_nll(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
        floor: S,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.value(logits).dims2("complement_nll")?;
        check_mask(mask, n)?;
        check_labels(labels, m, n, mask, "complement_nll")?;
        let x = self.value(logits).values();
        let p = softmax_rows(x, n, mask);
        let log_floor = floor.ln();
        let mut row_grads = vec![S::zero(); m * n];
        let mut total = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * n..(i + 1) * n];
            let others: Vec<bool> = (0..n)
                .map(|j| j != y && mask.is_none_or(|mk| mk[j]))
                .collect();
            let log_rest = if others.iter().any(|&b| b) {
                let mx = row_max(row, Some(&others));
                let lse_rest = row
                    .iter()
                    .zip(&others)
                    .filter(|(_, &o)| o)
                    .map(|(&v, _)| (v - mx).exp())
                    .sum::<S>()
                    .ln()
                    + mx;
                let ma = row_max(row, mask);
                let lse_all = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| mask.is_none_or(|mk| mk[*j]))
                    .map(|(_, &v)| (v - ma).exp())
                    .sum::<S>()
                    .ln()
                    + ma;
                lse_rest - lse_all
            } else {
                S::neg_infinity()
            };
            if log_rest > log_floor {
                total -= log_rest;
                let q = softmax_rows(row, n, Some(&others));
                let g = &mut row_grads[i * n..(i + 1) * n];
                for j in 0..n {
                    g[j] = p[i * n + j] - q[j];
                }
            } else {
                total -= log_floor;
            }
        }
        let loss = total / S::of(m as f64);
        let op = Op::ComplementNll {
            logits,
            labels: labels.to_vec(),
            row_grads,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean binary cross-entropy on logits `[m, 1]` or `[m]` against targets in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.len() != targets.len() || !(t.shape() == [targets.len()] || t.shape() == [targets.len(), 1])
        {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), 1],
            });
        }
        let total: S = t
            .values()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(S::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / S::of(targets.len() as f64);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Identity on the forward pass; multiplies the upstream gradient by
    /// `-lambda` on the backward pass.
    pub fn gradient_reversal(&mut self, a: Var, lambda: S) -> Result<Var, TensorError> {
        if !(lambda >= S::zero()) {
            return Err(TensorError::NegativeReversal(lambda.as_f64()));
        }
        let t = self.value(a).clone();
        let t = Tensor::new(t.shape().to_vec(), t.into_values())?;
        Ok(self.push(t, Op::GradReverse(a, lambda), &[a]))
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient,
    /// adding into any gradient already present. The tape is then consumed.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::Consumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            for (v, contrib) in self.local_adjoints(idx, g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.consumed = true;
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_adjoints(&self, idx: usize, g: Vec<S>) -> Result<Vec<(Var, Vec<S>)>, TensorError> {
        let node = &self.nodes[idx];
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2("matmul")?;
                let n = val(b).dims2("matmul")?.1;
                let (av, bv) = (val(a).values(), val(b).values());
                // dA = G B^T, dB = A^T G
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        da[i * k + p] = gi.iter().zip(&bv[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum();
                    }
                }
                let mut db = vec![S::zero(); k * n];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for (d, &gij) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *d += aip * gij;
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => {
                let neg = g.iter().map(|&x| -x).collect();
                vec![(*a, g), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(b).values()).map(|(&x, &y)| x * y).collect();
                let db = g.iter().zip(val(a).values()).map(|(&x, &y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, row) => {
                let n = val(row).len();
                let mut dr = vec![S::zero(); n];
                for r in g.chunks(n) {
                    dr.iter_mut().zip(r).for_each(|(d, &x)| *d += x);
                }
                vec![(*a, g), (*row, dr)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(a).values())
                    .map(|(&x, &v)| if v > S::zero() { x } else { S::zero() })
                    .collect();
                vec![(*a, d)]
            }
            Op::Exp(a) => {
                let d = g.iter().zip(node.value.values()).map(|(&x, &y)| x * y).collect();
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let d = g.iter().zip(val(a).values()).map(|(&x, &v)| x / v).collect();
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(a).len()])],
            Op::Mean(a) => {
                let n = val(a).len();
                vec![(*a, vec![g[0] / S::of(n as f64); n])]
            }
            Op::MeanRows(a) => {
                let (m, _) = val(a).dims2("mean_rows")?;
                let inv = S::one() / S::of(m as f64);
                let d = (0..m).flat_map(|_| g.iter().map(move |&x| x * inv)).collect();
                vec![(*a, d)]
            }
            Op::GatherRows(a, index) => {
                let (m, n) = val(a).dims2("gather_rows")?;
                let mut d = vec![S::zero(); m * n];
                for (r, &i) in index.iter().enumerate() {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(x, &y)| *x += y);
                }
                vec![(*a, d)]
            }
            Op::Softmax(a) => {
                let n = node.value.shape()[1];
                let p = node.value.values();
                let mut d = vec![S::zero(); p.len()];
                for ((pr, gr), dr) in p.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: S = pr.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let n = probs.len() / m;
                let scale = g[0] / S::of(m as f64);
                let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * n + y] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::ComplementNll {
                logits,
                labels,
                row_grads,
            } => {
                let scale = g[0] / S::of(labels.len() as f64);
                vec![(*logits, row_grads.iter().map(|&x| x * scale).collect())]
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g[0] / S::of(targets.len() as f64);
                let d = val(logits)
                    .values()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (S::one() / (S::one() + (-x).exp()) - y) * scale)
                    .collect();
                vec![(*logits, d)]
            }
            Op::GradReverse(a, lambda) => {
                vec![(*a, g.iter().map(|&x| -(x * *lambda)).collect())]
            }
        })
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let p = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(p).values(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let a = [1.5, -2.0, 0.25, 3.0, 4.0, -5.0, 0.0, 7.0, 8.5];
        let mut tape = Tape::new();
        let i = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let av = tape.constant(t(&[3, 3], &a));
        let p = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(p).values(), &a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] vs [2, 3]");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_at_uniform_logits() {
        let c = 4;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![1, c]).with_grad());
        let loss = tape.cross_entropy(x, &[2], None).unwrap();
        assert!((tape.scalar_value(loss) - (c as f64).ln()).abs() < 1e-15);
        tape.backward(loss).unwrap();
        let expected = [0.25, 0.25, -0.75, 0.25];
        for (g, e) in tape.grad(x).unwrap().iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn reversal_is_identity_forward_and_negates_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]).with_grad());
        let r = tape.gradient_reversal(x, 0.05).unwrap();
        assert_eq!(tape.value(r).values(), &[3.0, -1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, 0.1, -2.0]).with_grad());
        let r = tape.gradient_reversal(x, 1.0).unwrap();
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn reversal_with_zero_lambda_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]).with_grad());
        let r = tape.gradient_reversal(x, 0.0).unwrap();
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0]).with_grad());
        assert!(tape.gradient_reversal(x, -0.1).is_err());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::Consumed));
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 5.0, -2.0, 0.0, 0.0, 0.0]));
        let mask = [true, false, true];
        let p = tape.softmax(x, Some(&mask)).unwrap();
        let pv = tape.value(p).values();
        for r in pv.chunks(3) {
            assert_eq!(r[1], 0.0);
            assert!((r[0] + r[2] - 1.0).abs() < 1e-15);
        }
        assert!(tape.softmax(x, Some(&[false; 3])).is_err());
    }

    #[test]
    fn complement_nll_hand_value() {
        // p_y = 0.5 -> -ln(0.5)
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.complement_nll(x, &[0], None, 1e-15).unwrap();
        assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn complement_nll_clamps_single_class_support() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[0.0, 1.0, 2.0]).with_grad());
        let l = tape
            .complement_nll(x, &[1], Some(&[false, true, false]), 1e-15)
            .unwrap();
        assert!((tape.scalar_value(l) + 1e-15f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(vec![4, 1]));
        let l = tape.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn leaf_gradient_accumulates_across_uses() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]).with_grad());
        let g = tape.gather_rows(x, &[0, 0, 0]).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0f32, 4.0]);
    }
}
