//! Operation tape and reverse-mode gradient propagation.
//!
//! A [`Tape`] records every operation whose inputs include a tracked tensor.
//! Calling [`Tape::backward`] on a scalar result walks the recorded nodes in
//! reverse insertion order exactly once and accumulates gradients with a fixed
//! left-to-right order, so results are bitwise reproducible. Operations on
//! untracked tensors record nothing and behave as plain arithmetic.
//!
//! Tapes are rebuilt per forward pass; there is no graph reuse.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::grad::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    fn index(self) -> usize {
        self.0
    }
}

/// One operation input: the originating node (if tracked) plus a snapshot of
/// the value, which the backward rules read.
struct Arg {
    node: Option<NodeId>,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Arg {
    fn of(t: &Tensor) -> Self {
        Self {
            node: t.node_id(),
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }
}

enum Rule {
    Leaf,
    MatMul { a: Arg, b: Arg },
    Add { a: Arg, b: Arg },
    Sub { a: Arg, b: Arg },
    Mul { a: Arg, b: Arg },
    Tanh { a: Arg, out: Vec<f64> },
    Scale { a: Arg, k: f64 },
    Row { a: Arg, index: usize },
    Transpose { a: Arg },
    ConcatRows { a: Arg, b: Arg },
    Sum { a: Arg },
    LogSoftmaxPick { a: Arg, probs: Vec<f64>, index: usize },
    LogSigmoid { a: Arg, z: f64 },
}

struct Node {
    rule: Rule,
    out_rows: usize,
    out_cols: usize,
}

/// Gradients produced by one backward pass, keyed by node id.
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient of the loss with respect to the given node's output.
    /// Nodes the loss does not depend on map to `None`.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }
}

/// Records operations for one forward pass. Single-threaded by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, rule: Rule, out_rows: usize, out_cols: usize) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rule,
            out_rows,
            out_cols,
        });
        NodeId(nodes.len() - 1)
    }

    /// Registers a tensor as a differentiable leaf and returns the tracked copy.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Rule::Leaf, t.rows(), t.cols());
        let mut out = t.detach();
        out.node = Some(id);
        out
    }

    fn finish(
        &self,
        tracked: bool,
        rule: impl FnOnce() -> Rule,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite forward result");
        let mut out = Tensor::new(rows, cols, data).expect("op produced consistent shape");
        if tracked {
            out.node = Some(self.push(rule(), rows, cols));
        }
        out
    }

    /// Matrix product. Requires `a.cols == b.rows`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(i, p) * b.get(p, j);
                }
                data[i * n + j] = acc;
            }
        }
        let tracked = a.node_id().is_some() || b.node_id().is_some();
        Ok(self.finish(
            tracked,
            || Rule::MatMul {
                a: Arg::of(a),
                b: Arg::of(b),
            },
            m,
            n,
            data,
        ))
    }

    /// Elementwise sum. Shapes must match.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Rule::Add { a, b })
    }

    /// Elementwise difference. Shapes must match.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("sub", a, b, |x, y| x - y, |a, b| Rule::Sub { a, b })
    }

    /// Elementwise (Hadamard) product. Shapes must match.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Rule::Mul { a, b })
    }

    fn zip(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        rule: impl FnOnce(Arg, Arg) -> Rule,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err(op, a, b));
        }
        let data = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = a.node_id().is_some() || b.node_id().is_some();
        Ok(self.finish(tracked, || rule(Arg::of(a), Arg::of(b)), a.rows(), a.cols(), data))
    }

    /// Elementwise tanh, clamped strictly inside (-1, 1).
    pub fn tanh(&self, a: &Tensor) -> Tensor {
        const LIMIT: f64 = 1.0 - f64::EPSILON;
        let data: Vec<f64> = a.iter().map(|&x| x.tanh().clamp(-LIMIT, LIMIT)).collect();
        let out_copy = data.clone();
        self.finish(
            a.node_id().is_some(),
            || Rule::Tanh {
                a: Arg::of(a),
                out: out_copy,
            },
            a.rows(),
            a.cols(),
            data,
        )
    }

    /// Multiplication by a constant.
    pub fn scale(&self, a: &Tensor, k: f64) -> Tensor {
        let data = a.iter().map(|&x| x * k).collect();
        self.finish(
            a.node_id().is_some(),
            || Rule::Scale { a: Arg::of(a), k },
            a.rows(),
            a.cols(),
            data,
        )
    }

    /// Extracts row `index` as a `1 x cols` tensor.
    pub fn row(&self, a: &Tensor, index: usize) -> Result<Tensor> {
        if index >= a.rows() {
            return Err(Error::Index {
                op: "row",
                index,
                limit: a.rows(),
            });
        }
        let data: Vec<f64> = (0..a.cols()).map(|c| a.get(index, c)).collect();
        Ok(self.finish(
            a.node_id().is_some(),
            || Rule::Row {
                a: Arg::of(a),
                index,
            },
            1,
            a.cols(),
            data,
        ))
    }

    pub fn transpose(&self, a: &Tensor) -> Tensor {
        let (r, c) = a.shape();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.get(i, j);
            }
        }
        self.finish(
            a.node_id().is_some(),
            || Rule::Transpose { a: Arg::of(a) },
            c,
            r,
            data,
        )
    }

    /// Stacks `a` on top of `b`; both must have the same column count.
    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.cols() {
            return Err(shape_err("concat_rows", a, b));
        }
        let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let tracked = a.node_id().is_some() || b.node_id().is_some();
        Ok(self.finish(
            tracked,
            || Rule::ConcatRows {
                a: Arg::of(a),
                b: Arg::of(b),
            },
            a.rows() + b.rows(),
            a.cols(),
            data,
        ))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self, a: &Tensor) -> Tensor {
        let mut acc = 0.0;
        for &x in a.iter() {
            acc += x;
        }
        self.finish(
            a.node_id().is_some(),
            || Rule::Sum { a: Arg::of(a) },
            1,
            1,
            vec![acc],
        )
    }

    /// `logits[index] - logsumexp(logits)` for a vector of logits, computed
    /// with max subtraction. Accepts a row or column vector.
    pub fn log_softmax_pick(&self, logits: &Tensor, index: usize) -> Result<Tensor> {
        if !logits.is_vector() {
            return Err(shape_err("log_softmax_pick", logits, logits));
        }
        let v = logits.data();
        if index >= v.len() {
            return Err(Error::Index {
                op: "log_softmax_pick",
                index,
                limit: v.len(),
            });
        }
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &x in v {
            total += (x - max).exp();
        }
        let lse = max + total.ln();
        let probs: Vec<f64> = v.iter().map(|&x| (x - max).exp() / total).collect();
        Ok(self.finish(
            logits.node_id().is_some(),
            || Rule::LogSoftmaxPick {
                a: Arg::of(logits),
                probs,
                index,
            },
            1,
            1,
            vec![v[index] - lse],
        ))
    }

    /// `log(sigmoid(z))` for scalar z, via the stable `-softplus(-z)` form.
    pub fn log_sigmoid(&self, z: &Tensor) -> Result<Tensor> {
        if !z.is_scalar() {
            return Err(shape_err("log_sigmoid", z, z));
        }
        let x = z.value();
        let out = -(((-x).max(0.0)) + (-x.abs()).exp().ln_1p());
        Ok(self.finish(
            z.node_id().is_some(),
            || Rule::LogSigmoid { a: Arg::of(z), z: x },
            1,
            1,
            vec![out],
        ))
    }

    /// Propagates gradients from a tracked 1x1 loss back to every tracked
    /// node, visiting nodes once in reverse insertion order.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        if !loss.is_scalar() {
            return Err(shape_err("backward", loss, loss));
        }
        let root = loss.node_id().ok_or_else(|| {
            Error::Input("backward requires a tracked loss tensor".to_string())
        })?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.index()] = Some(vec![1.0]);

        for idx in (0..=root.index()).rev() {
            let Some(go) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            apply_rule(&node.rule, &go, &mut grads);
            grads[idx] = Some(go);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(nodes[i].out_rows, nodes[i].out_cols, data)
                        .expect("gradient shape follows node shape")
                })
            })
            .collect();
        Ok(GradientMap { grads: out })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs_rows: a.rows(),
        lhs_cols: a.cols(),
        rhs_rows: b.rows(),
        rhs_cols: b.cols(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], arg: &Arg, delta: impl Iterator<Item = f64>) {
    let Some(id) = arg.node else {
        return;
    };
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; arg.rows * arg.cols]);
    for (g, d) in slot.iter_mut().zip(delta) {
        *g += d;
    }
}

fn apply_rule(rule: &Rule, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match rule {
        Rule::Leaf => {}
        Rule::MatMul { a, b } => {
            let (m, k, n) = (a.rows, a.cols, b.cols);
            if a.node.is_some() {
                // dA = dC * B^T
                let delta = (0..m * k).map(|idx| {
                    let (i, p) = (idx / k, idx % k);
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += go[i * n + j] * b.data[p * n + j];
                    }
                    acc
                });
                accumulate(grads, a, delta);
            }
            if b.node.is_some() {
                // dB = A^T * dC
                let delta = (0..k * n).map(|idx| {
                    let (p, j) = (idx / n, idx % n);
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a.data[i * k + p] * go[i * n + j];
                    }
                    acc
                });
                accumulate(grads, b, delta);
            }
        }
        Rule::Add { a, b } => {
            accumulate(grads, a, go.iter().copied());
            accumulate(grads, b, go.iter().copied());
        }
        Rule::Sub { a, b } => {
            accumulate(grads, a, go.iter().copied());
            accumulate(grads, b, go.iter().map(|g| -g));
        }
        Rule::Mul { a, b } => {
            accumulate(grads, a, go.iter().zip(&b.data).map(|(g, y)| g * y));
            accumulate(grads, b, go.iter().zip(&a.data).map(|(g, x)| g * x));
        }
        Rule::Tanh { a, out } => {
            accumulate(grads, a, go.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)));
        }
        Rule::Scale { a, k } => {
            accumulate(grads, a, go.iter().map(|g| g * k));
        }
        Rule::Row { a, index } => {
            let cols = a.cols;
            let start = index * cols;
            let delta = (0..a.rows * a.cols).map(|i| {
                if i >= start && i < start + cols {
                    go[i - start]
                } else {
                    0.0
                }
            });
            accumulate(grads, a, delta);
        }
        Rule::Transpose { a } => {
            let (r, c) = (a.rows, a.cols);
            // go has shape c x r; route entry (j, i) back to (i, j).
            let delta = (0..r * c).map(|idx| {
                let (i, j) = (idx / c, idx % c);
                go[j * r + i]
            });
            accumulate(grads, a, delta);
        }
        Rule::ConcatRows { a, b } => {
            let split = a.rows * a.cols;
            accumulate(grads, a, go[..split].iter().copied());
            accumulate(grads, b, go[split..].iter().copied());
        }
        Rule::Sum { a } => {
            let g = go[0];
            accumulate(grads, a, std::iter::repeat_n(g, a.rows * a.cols));
        }
        Rule::LogSoftmaxPick { a, probs, index } => {
            let g = go[0];
            let delta = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| g * (if i == *index { 1.0 - p } else { -p }));
            accumulate(grads, a, delta);
        }
        Rule::LogSigmoid { a, z } => {
            // d/dz log(sigmoid(z)) = sigmoid(-z)
            let s = if *z >= 0.0 {
                let e = (-z).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + z.exp())
            };
            accumulate(grads, a, std::iter::once(go[0] * s));
        }
    }
}
