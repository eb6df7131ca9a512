//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a valid
//! topological order and `backward` is a single reverse sweep. Parameters
//! enter the tape through [`Graph::param`] (copied once per graph) or
//! [`Graph::embedding`] (columns gathered straight from the store).

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative-side slope of `leaky_relu`.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Axis selector for reductions and softmax.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along axis 0: one result per column.
    Rows,
    /// Along axis 1: one result per row.
    Cols,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Embedding { table: ParamId, table_shape: [usize; 2], ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { src: NodeId, start: usize },
    SliceCols { src: NodeId, start: usize },
    GatherRows { src: NodeId, index: Vec<usize> },
    Reshape(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Reciprocal(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId, Axis),
    Mean(NodeId, Axis),
    Sum(NodeId),
    CausalConv { input: NodeId, kernel: NodeId, width: usize, lanes: usize },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    SoftmaxNll(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    kink_signature: u64,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `id`, if it was reached.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    /// Hash of the sign pattern seen by every `abs`, `relu` and `leaky_relu`
    /// input on this tape. Two evaluations with equal signatures lie on the
    /// same smooth piece of the loss.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn record_kinks(&mut self, t: &Tensor) {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = self.kink_signature ^ 0xcbf2_9ce4_8422_2325;
        for &x in t.data() {
            let s = if x > 0.0 {
                2
            } else if x < 0.0 {
                1
            } else {
                0
            };
            h = (h ^ s).wrapping_mul(PRIME);
        }
        self.kink_signature = h;
    }

    // ---- leaves -------------------------------------------------------

    /// Constant input; receives a gradient but belongs to no parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, node);
        node
    }

    /// Gathers columns `ids` of the `d × n` table `table`, giving `d × ids.len()`.
    pub fn embedding(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let t = store.get(table);
        let (d, n) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(d, ids.len());
        for (j, &id) in ids.iter().enumerate() {
            if id >= n {
                return Err(Error::InvalidArgument {
                    op: "embedding",
                    reason: format!("index {id} out of range for table with {n} columns"),
                });
            }
            for r in 0..d {
                out.set(r, j, t.get(r, id));
            }
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                table_shape: [d, n],
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- linear algebra and structure --------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).matmul(self.v(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Concatenates along the last axis (columns).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.check_nonempty(parts, "concat_cols")?.rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: s,
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.v(p).row_slice(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks along axis 0 (rows).
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.check_nonempty(parts, "concat_rows")?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.v(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    fn check_nonempty(&self, parts: &[NodeId], op: &'static str) -> Result<&Tensor> {
        parts.first().map(|&p| self.v(p)).ok_or(Error::InvalidArgument {
            op,
            reason: "no inputs".into(),
        })
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.v(src);
        if start + len > t.rows() {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                reason: format!("rows {start}..{} out of {}", start + len, t.rows()),
            });
        }
        let c = t.cols();
        let out = Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { src, start }))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.v(src);
        if start + len > t.cols() {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                reason: format!("cols {start}..{} out of {}", start + len, t.cols()),
            });
        }
        let out = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        Ok(self.push(out, Op::SliceCols { src, start }))
    }

    /// Row `i` of the output is row `index[i]` of `src`.
    pub fn gather_rows(&mut self, src: NodeId, index: &[usize]) -> Result<NodeId> {
        let t = self.v(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of {}", t.rows()),
            });
        }
        let mut data = Vec::with_capacity(index.len() * t.cols());
        for &i in index {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_vec(index.len(), t.cols(), data)?;
        Ok(self.push(out, Op::GatherRows { src, index: index.to_vec() }))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, src: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let out = self.v(src).clone().reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape(src)))
    }

    /// Repeats a `1 × m` row `n` times.
    pub fn broadcast_rows(&mut self, src: NodeId, n: usize) -> Result<NodeId> {
        let t = self.v(src);
        if t.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: t.shape(),
                rhs: [1, t.cols()],
            });
        }
        let out = Tensor::from_fn(n, t.cols(), |_, c| t.get(0, c));
        Ok(self.push(out, Op::BroadcastRows(src)))
    }

    /// Repeats an `n × 1` column `m` times.
    pub fn broadcast_cols(&mut self, src: NodeId, m: usize) -> Result<NodeId> {
        let t = self.v(src);
        if t.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                lhs: t.shape(),
                rhs: [t.rows(), 1],
            });
        }
        let out = Tensor::from_fn(t.rows(), m, |r, _| t.get(r, 0));
        Ok(self.push(out, Op::BroadcastCols(src)))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).zip_map(self.v(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).zip_map(self.v(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).zip_map(self.v(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.v(b).data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let out = self.v(a).zip_map(self.v(b), "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.v(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        let out = self.v(a).map(|x| x + value);
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> NodeId {
        let input = self.v(a).clone();
        self.record_kinks(&input);
        let out = input.map(|x| if x >= 0.0 { x } else { LEAKY_SLOPE * x });
        self.push(out, Op::LeakyRelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let input = self.v(a).clone();
        self.record_kinks(&input);
        let out = input.map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let input = self.v(a).clone();
        self.record_kinks(&input);
        let out = input.map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn reciprocal(&mut self, a: NodeId) -> Result<NodeId> {
        if self.v(a).data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "reciprocal" });
        }
        let out = self.v(a).map(|x| 1.0 / x);
        Ok(self.push(out, Op::Reciprocal(a)))
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.v(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "sqrt",
                reason: "input must be strictly positive".into(),
            });
        }
        let out = self.v(a).map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    // ---- reductions --------------------------------------------------

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let out = softmax(self.v(a), axis);
        self.push(out, Op::Softmax(a, axis))
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let t = self.v(a);
        let out = match axis {
            Axis::Rows => {
                if t.rows() == 0 {
                    return Err(Error::DivisionByZero { op: "mean" });
                }
                let n = t.rows() as f64;
                Tensor::from_fn(1, t.cols(), |_, c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / n)
            }
            Axis::Cols => {
                if t.cols() == 0 {
                    return Err(Error::DivisionByZero { op: "mean" });
                }
                let n = t.cols() as f64;
                Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().sum::<f64>() / n)
            }
        };
        Ok(self.push(out, Op::Mean(a, axis)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.v(a).sum());
        self.push(out, Op::Sum(a))
    }

    // ---- model-specific primitives -----------------------------------

    /// Causal 1-D convolution over position-major rows.
    ///
    /// `input` is `(T·lanes) × d_in` with row `l·lanes + c` holding position
    /// `l` of independent sequence `c`. `kernel` is `d_out × (width·d_in)`;
    /// entry `[n, j·d_in + i]` weights feature `i` at position `l − width + 1 + j`.
    /// Positions before the start of a sequence read as zero. No activation.
    pub fn causal_conv(&mut self, input: NodeId, kernel: NodeId, width: usize, lanes: usize) -> Result<NodeId> {
        let x = self.v(input);
        let w = self.v(kernel);
        if width == 0 || lanes == 0 || !x.rows().is_multiple_of(lanes) || w.cols() != width * x.cols() {
            return Err(Error::ShapeMismatch {
                op: "causal_conv",
                lhs: x.shape(),
                rhs: w.shape(),
            });
        }
        let unfolded = im2col(x, width, lanes);
        let out = unfolded.matmul_t(w)?;
        Ok(self.push(
            out,
            Op::CausalConv {
                input,
                kernel,
                width,
                lanes,
            },
        ))
    }

    /// Batch normalisation over rows using the batch's own statistics.
    pub fn batch_norm_train(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchStats)> {
        let x = self.v(input);
        let (n, f) = (x.rows(), x.cols());
        self.check_affine(gamma, beta, f)?;
        if n == 0 {
            return Err(Error::DivisionByZero { op: "batch_norm" });
        }
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(n, f, |r, c| (x.get(r, c) - mean[c]) * inv_std[c]);
        let out = self.affine(&xhat, gamma, beta);
        let id = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
        );
        Ok((id, BatchStats { mean, var }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_infer(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, mean: &[f64], var: &[f64], eps: f64) -> Result<NodeId> {
        let x = self.v(input);
        let f = x.cols();
        self.check_affine(gamma, beta, f)?;
        if mean.len() != f || var.len() != f {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                reason: format!("running statistics have {} features, input has {f}", mean.len()),
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(x.rows(), f, |r, c| (x.get(r, c) - mean[c]) * inv_std[c]);
        let out = self.affine(&xhat, gamma, beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
        ))
    }

    fn check_affine(&self, gamma: NodeId, beta: NodeId, f: usize) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [1, f] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: [1, f],
                    rhs: self.shape(p),
                });
            }
        }
        Ok(())
    }

    fn affine(&self, xhat: &Tensor, gamma: NodeId, beta: NodeId) -> Tensor {
        let g = self.v(gamma);
        let b = self.v(beta);
        Tensor::from_fn(xhat.rows(), xhat.cols(), |r, c| g.get(0, c) * xhat.get(r, c) + b.get(0, c))
    }

    /// Row-wise `−log softmax(x_i)[0]`, giving an `m × 1` column.
    ///
    /// Column 0 of every row is the positive; the log-sum-exp is max-shifted.
    pub fn softmax_nll(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.v(a);
        if t.cols() == 0 {
            return Err(Error::InvalidArgument {
                op: "softmax_nll",
                reason: "no candidates".into(),
            });
        }
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let loss = log_sum_exp(row) - row[0];
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("softmax_nll row {r}: {row:?}")));
            }
            out.push(loss);
        }
        Ok(self.push(Tensor::column(out), Op::SoftmaxNll(a)))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            let grads = lower;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => accumulate_param(&mut params, *pid, g)?,
                Op::Embedding { table, table_shape, ids } => {
                    let slot = params
                        .entry(*table)
                        .or_insert_with(|| Tensor::zeros(table_shape[0], table_shape[1]));
                    for (j, &id) in ids.iter().enumerate() {
                        for r in 0..table_shape[0] {
                            let cur = slot.get(r, id);
                            slot.set(r, id, cur + g.get(r, j));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.v(*b))?;
                    let gb = self.v(*a).t_matmul(g)?;
                    acc(grads, *a, ga)?;
                    acc(grads, *b, gb)?;
                }
                Op::Transpose(a) => acc(grads, *a, g.transpose())?,
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        let piece = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(grads, p, piece)?;
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p)[0];
                        let piece = Tensor::from_vec(h, cols, g.data()[offset * cols..(offset + h) * cols].to_vec())?;
                        acc(grads, p, piece)?;
                        offset += h;
                    }
                }
                Op::SliceRows { src, start } => {
                    let [r, c] = self.shape(*src);
                    let mut full = Tensor::zeros(r, c);
                    full.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    acc(grads, *src, full)?;
                }
                Op::SliceCols { src, start } => {
                    let [r, c] = self.shape(*src);
                    let mut full = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..g.cols() {
                            full.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(grads, *src, full)?;
                }
                Op::GatherRows { src, index } => {
                    let [r, c] = self.shape(*src);
                    let mut full = Tensor::zeros(r, c);
                    for (i, &row) in index.iter().enumerate() {
                        let dst = &mut full.data_mut()[row * c..(row + 1) * c];
                        for (d, v) in dst.iter_mut().zip(g.row_slice(i)) {
                            *d += v;
                        }
                    }
                    acc(grads, *src, full)?;
                }
                Op::Reshape(src) => {
                    let [r, c] = self.shape(*src);
                    acc(grads, *src, g.clone().reshaped(r, c)?)?;
                }
                Op::BroadcastRows(src) => {
                    let col_sums = Tensor::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    acc(grads, *src, col_sums)?;
                }
                Op::BroadcastCols(src) => {
                    let row_sums = Tensor::from_fn(g.rows(), 1, |r, _| g.row_slice(r).iter().sum());
                    acc(grads, *src, row_sums)?;
                }
                Op::Add(a, b) => {
                    acc(grads, *b, g.clone())?;
                    acc(grads, *a, g.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(grads, *b, g.map(|x| -x))?;
                    acc(grads, *a, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.v(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.v(*a), "mul", |x, y| x * y)?;
                    acc(grads, *a, ga)?;
                    acc(grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    let bv = self.v(*b);
                    let ga = g.zip_map(bv, "div", |x, y| x / y)?;
                    let q = node.value.zip_map(bv, "div", |o, y| -o / y)?;
                    let gb = g.zip_map(&q, "div", |x, y| x * y)?;
                    acc(grads, *a, ga)?;
                    acc(grads, *b, gb)?;
                }
                Op::Scale(a, f) => acc(grads, *a, g.map(|x| x * f))?,
                Op::AddScalar(a) => acc(grads, *a, g.clone())?,
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, "tanh", |x, y| x * (1.0 - y * y))?;
                    acc(grads, *a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, "sigmoid", |x, y| x * y * (1.0 - y))?;
                    acc(grads, *a, d)?;
                }
                Op::LeakyRelu(a) => {
                    // Slope 1 at exactly zero.
                    let d = g.zip_map(self.v(*a), "leaky_relu", |x, y| if y >= 0.0 { x } else { LEAKY_SLOPE * x })?;
                    acc(grads, *a, d)?;
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.v(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?;
                    acc(grads, *a, d)?;
                }
                Op::Abs(a) => {
                    // Subgradient 0 at exactly zero.
                    let d = g.zip_map(self.v(*a), "abs", |x, y| x * sign(y))?;
                    acc(grads, *a, d)?;
                }
                Op::Reciprocal(a) => {
                    let d = g.zip_map(&node.value, "reciprocal", |x, y| -x * y * y)?;
                    acc(grads, *a, d)?;
                }
                Op::Sqrt(a) => {
                    let d = g.zip_map(&node.value, "sqrt", |x, y| 0.5 * x / y)?;
                    acc(grads, *a, d)?;
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    match axis {
                        Axis::Rows => {
                            for c in 0..y.cols() {
                                let dot: f64 = (0..y.rows()).map(|r| g.get(r, c) * y.get(r, c)).sum();
                                for r in 0..y.rows() {
                                    d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                                }
                            }
                        }
                        Axis::Cols => {
                            for r in 0..y.rows() {
                                let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                                for c in 0..y.cols() {
                                    d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                                }
                            }
                        }
                    }
                    acc(grads, *a, d)?;
                }
                Op::Mean(a, axis) => {
                    let [r, c] = self.shape(*a);
                    let d = match axis {
                        Axis::Rows => Tensor::from_fn(r, c, |_, j| g.get(0, j) / r as f64),
                        Axis::Cols => Tensor::from_fn(r, c, |i, _| g.get(i, 0) / c as f64),
                    };
                    acc(grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    acc(grads, *a, Tensor::filled(r, c, g.get(0, 0)))?;
                }
                Op::CausalConv {
                    input,
                    kernel,
                    width,
                    lanes,
                } => {
                    let x = self.v(*input);
                    let unfolded = im2col(x, *width, *lanes);
                    let gw = g.t_matmul(&unfolded)?;
                    let gu = g.matmul(self.v(*kernel))?;
                    let gx = col2im(&gu, x.rows(), x.cols(), *width, *lanes);
                    acc(grads, *kernel, gw)?;
                    acc(grads, *input, gx)?;
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (n, f) = (xhat.rows(), xhat.cols());
                    let gam = self.v(*gamma);
                    let mut ggamma = Tensor::zeros(1, f);
                    let mut gbeta = Tensor::zeros(1, f);
                    for r in 0..n {
                        for c in 0..f {
                            ggamma.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gbeta.data_mut()[c] += g.get(r, c);
                        }
                    }
                    let gx = if *train {
                        let nf = n as f64;
                        Tensor::from_fn(n, f, |r, c| {
                            let s = gam.get(0, c) * inv_std[c] / nf;
                            s * (nf * g.get(r, c) - gbeta.get(0, c) - xhat.get(r, c) * ggamma.get(0, c))
                        })
                    } else {
                        Tensor::from_fn(n, f, |r, c| g.get(r, c) * gam.get(0, c) * inv_std[c])
                    };
                    acc(grads, *gamma, ggamma)?;
                    acc(grads, *beta, gbeta)?;
                    acc(grads, *input, gx)?;
                }
                Op::SoftmaxNll(a) => {
                    let x = self.v(*a);
                    let mut d = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row_slice(r);
                        let lse = log_sum_exp(row);
                        let gr = g.get(r, 0);
                        for (c, &v) in row.iter().enumerate() {
                            let p = (v - lse).exp();
                            let onehot = if c == 0 { 1.0 } else { 0.0 };
                            d.set(r, c, gr * (p - onehot));
                        }
                    }
                    acc(grads, *a, d)?;
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn accumulate_param(params: &mut BTreeMap<ParamId, Tensor>, id: ParamId, g: &Tensor) -> Result<()> {
    match params.get_mut(&id) {
        Some(existing) => existing.add_assign(g),
        None => {
            params.insert(id, g.clone());
            Ok(())
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(t: &Tensor, axis: Axis) -> Tensor {
    let mut out = t.clone();
    match axis {
        Axis::Rows => {
            for c in 0..t.cols() {
                let m = (0..t.rows()).map(|r| t.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..t.rows()).map(|r| (t.get(r, c) - m).exp()).sum();
                for r in 0..t.rows() {
                    out.set(r, c, (t.get(r, c) - m).exp() / z);
                }
            }
        }
        Axis::Cols => {
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                for c in 0..t.cols() {
                    out.set(r, c, (t.get(r, c) - m).exp() / z);
                }
            }
        }
    }
    out
}

/// Unfolds causal windows: row `r` holds the `width` input rows ending at `r`
/// within its lane, oldest first, zero-filled before the sequence start.
fn im2col(x: &Tensor, width: usize, lanes: usize) -> Tensor {
    let (rows, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(rows, width * d);
    let stride = width * d;
    for r in 0..rows {
        let pos = r / lanes;
        let lane = r % lanes;
        for j in 0..width {
            let back = width - 1 - j;
            if back > pos {
                continue;
            }
            let src = (pos - back) * lanes + lane;
            out.data_mut()[r * stride + j * d..r * stride + (j + 1) * d].copy_from_slice(x.row_slice(src));
        }
    }
    out
}

fn col2im(gu: &Tensor, rows: usize, d: usize, width: usize, lanes: usize) -> Tensor {
    let mut gx = Tensor::zeros(rows, d);
    let stride = width * d;
    for r in 0..rows {
        let pos = r / lanes;
        let lane = r % lanes;
        for j in 0..width {
            let back = width - 1 - j;
            if back > pos {
                continue;
            }
            let src = (pos - back) * lanes + lane;
            for i in 0..d {
                let v = gu.data()[r * stride + j * d + i];
                gx.data_mut()[src * d + i] += v;
            }
        }
    }
    gx
}
