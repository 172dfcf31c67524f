//! Dense 2-D tensor core with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs are tracked; calling
//! [`Tape::backward`] on a scalar loss walks the record in reverse and
//! accumulates gradients into the leaf slots. Tensors that never touch a
//! tape behave as plain matrices, so the same forward code serves both
//! training and inference.

mod adam;
mod fd;
mod params;

pub use adam::{adam_step, AdamState};
pub use fd::finite_difference_check;
pub use params::ParamSet;

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};

/// Canonical SELU constants for self-normalizing networks.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

/// Floor applied inside `log_clamped` and similar guarded kernels.
pub const LOG_FLOOR: f64 = 1e-12;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Dense row-major matrix of f64 values, optionally tracked on a tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    /// (tape id, node id) when the tensor participates in a recording.
    node: Option<(u64, usize)>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(CoreError::invalid(format!(
                "tensor of shape {rows}x{cols} requires {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data, requires_grad: false, node: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], requires_grad: false, node: None }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols], requires_grad: false, node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value], requires_grad: false, node: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(CoreError::invalid("from_rows: empty input"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CoreError::invalid("from_rows: ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        // Mutating a tracked tensor would desynchronize the tape record.
        debug_assert!(self.node.is_none(), "mutating a tape-tracked tensor");
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(self.node.is_none(), "mutating a tape-tracked tensor");
        self.data[r * self.cols + c] = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|(_, id)| id)
    }

    /// The scalar value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(CoreError::invalid(format!(
                "item() on a {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    /// A copy with no tape affiliation.
    pub fn detached(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// What backward needs to know about one operand.
#[derive(Debug, Clone)]
struct Src {
    node: Option<usize>,
    rows: usize,
    cols: usize,
    /// Input values, kept only when the VJP rule reads them.
    data: Vec<f64>,
}

impl Src {
    fn of(t: &Tensor, keep_data: bool) -> Src {
        Src {
            node: t.node_id(),
            rows: t.rows,
            cols: t.cols,
            data: if keep_data { t.data.clone() } else { Vec::new() },
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Src, b: Src },
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    ElemMul { a: Src, b: Src },
    AddRow { a: Src, b: Src },
    ConcatRows { a: Src, b: Src },
    ConcatCols { a: Src, b: Src },
    Transpose { a: Src },
    SliceRows { a: Src, start: usize },
    SliceCols { a: Src, start: usize },
    RowSoftmax { a: Src, out: Vec<f64> },
    Selu { a: Src },
    Tanh { a: Src, out: Vec<f64> },
    Sigmoid { a: Src, out: Vec<f64> },
    Exp { a: Src, out: Vec<f64> },
    LogClamped { a: Src },
    Abs { a: Src },
    MeanAll { a: Src },
    SumAll { a: Src },
    L2RowNorms { a: Src, out: Vec<f64> },
    Scale { a: Src, k: f64 },
    CosineSim { a: Src, b: Src },
    LayerNorm { x: Src, gamma: Src, beta: Src, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out_rows: usize,
    out_cols: usize,
}

/// Recorded computation; one backward pass per tape.
#[derive(Debug, Default)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct GradMap {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl GradMap {
    /// Gradient with respect to a tracked tensor. Leaves that the loss never
    /// reaches get an explicit zero gradient.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let (tape_id, node_id) = t
            .node
            .ok_or_else(|| CoreError::invalid("gradient requested for an untracked tensor"))?;
        if tape_id != self.tape_id {
            return Err(CoreError::invalid("gradient requested from a different tape"));
        }
        let (rows, cols) = self.shapes[node_id];
        match &self.grads[node_id] {
            Some(g) => Tensor::new(rows, cols, g.clone()),
            None => Ok(Tensor::zeros(rows, cols)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Register a tensor as a gradient sink. Returns the tracked copy.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node { op: Op::Leaf, out_rows: t.rows, out_cols: t.cols });
        Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.clone(),
            requires_grad: true,
            node: Some((self.id, id)),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn check_membership(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if let Some((tape_id, _)) = t.node {
            if tape_id != self.id {
                return Err(CoreError::invalid(format!(
                    "{op}: input tensor belongs to a different tape"
                )));
            }
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if let Some(index) = t.first_non_finite() {
            return Err(CoreError::NonFinite { op, index });
        }
        Ok(())
    }

    /// Wrap `data` as the output of `op`, recording a node when any input is tracked.
    fn emit(
        &self,
        tracked: bool,
        op: Op,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        let node = if tracked {
            let id = self.push(Node { op, out_rows: rows, out_cols: cols });
            Some((self.id, id))
        } else {
            None
        };
        Tensor { rows, cols, data, requires_grad: tracked, node }
    }

    fn prep2(&self, op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
        self.check_membership(op, a)?;
        self.check_membership(op, b)?;
        self.check_finite(op, a)?;
        self.check_finite(op, b)?;
        Ok(a.node.is_some() || b.node.is_some())
    }

    fn prep1(&self, op: &'static str, a: &Tensor) -> Result<bool> {
        self.check_membership(op, a)?;
        self.check_finite(op, a)?;
        Ok(a.node.is_some())
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.prep2("matmul", a, b)?;
        if a.cols != b.rows {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let op = Op::MatMul { a: Src::of(a, true), b: Src::of(b, true) };
        Ok(self.emit(tracked, op, m, n, out))
    }

    fn zip_same_shape(
        &self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(bool, Vec<f64>)> {
        let tracked = self.prep2(name, a, b)?;
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch {
                op: name,
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((tracked, out))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (tracked, out) = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        let op = Op::Add { a: Src::of(a, false), b: Src::of(b, false) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (tracked, out) = self.zip_same_shape("sub", a, b, |x, y| x - y)?;
        let op = Op::Sub { a: Src::of(a, false), b: Src::of(b, false) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn elemwise_mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (tracked, out) = self.zip_same_shape("elemwise_mul", a, b, |x, y| x * y)?;
        let op = Op::ElemMul { a: Src::of(a, true), b: Src::of(b, true) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    /// Broadcast-add a 1xC row vector to every row of a RxC matrix.
    pub fn add_row(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.prep2("add_row", a, b)?;
        if b.rows != 1 || a.cols != b.cols {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let mut out = a.data.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                out[r * a.cols + c] += b.data[c];
            }
        }
        let op = Op::AddRow { a: Src::of(a, false), b: Src::of(b, false) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.prep2("concat_rows", a, b)?;
        if a.cols != b.cols {
            return Err(CoreError::ShapeMismatch {
                op: "concat_rows",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let mut out = Vec::with_capacity((a.rows + b.rows) * a.cols);
        out.extend_from_slice(&a.data);
        out.extend_from_slice(&b.data);
        let op = Op::ConcatRows { a: Src::of(a, false), b: Src::of(b, false) };
        Ok(self.emit(tracked, op, a.rows + b.rows, a.cols, out))
    }

    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.prep2("concat_cols", a, b)?;
        if a.rows != b.rows {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let cols = a.cols + b.cols;
        let mut out = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            out.extend_from_slice(&a.data[r * a.cols..(r + 1) * a.cols]);
            out.extend_from_slice(&b.data[r * b.cols..(r + 1) * b.cols]);
        }
        let op = Op::ConcatCols { a: Src::of(a, false), b: Src::of(b, false) };
        Ok(self.emit(tracked, op, a.rows, cols, out))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("transpose", a)?;
        let mut out = vec![0.0; a.data.len()];
        for r in 0..a.rows {
            for c in 0..a.cols {
                out[c * a.rows + r] = a.data[r * a.cols + c];
            }
        }
        let op = Op::Transpose { a: Src::of(a, false) };
        Ok(self.emit(tracked, op, a.cols, a.rows, out))
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        let tracked = self.prep1("slice_rows", a)?;
        if count == 0 || start + count > a.rows {
            return Err(CoreError::invalid(format!(
                "slice_rows: rows {start}..{} out of 0..{}",
                start + count,
                a.rows
            )));
        }
        let out = a.data[start * a.cols..(start + count) * a.cols].to_vec();
        let op = Op::SliceRows { a: Src::of(a, false), start };
        Ok(self.emit(tracked, op, count, a.cols, out))
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        let tracked = self.prep1("slice_cols", a)?;
        if count == 0 || start + count > a.cols {
            return Err(CoreError::invalid(format!(
                "slice_cols: cols {start}..{} out of 0..{}",
                start + count,
                a.cols
            )));
        }
        let mut out = Vec::with_capacity(a.rows * count);
        for r in 0..a.rows {
            out.extend_from_slice(&a.data[r * a.cols + start..r * a.cols + start + count]);
        }
        let op = Op::SliceCols { a: Src::of(a, false), start };
        Ok(self.emit(tracked, op, a.rows, count, out))
    }

    /// Numerically stable softmax along each row (row-max subtracted).
    pub fn row_softmax(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("row_softmax", a)?;
        let mut out = vec![0.0; a.data.len()];
        for r in 0..a.rows {
            let row = &a.data[r * a.cols..(r + 1) * a.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * a.cols + c] = e;
                sum += e;
            }
            for c in 0..a.cols {
                out[r * a.cols + c] /= sum;
            }
        }
        let op = Op::RowSoftmax { a: Src::of(a, false), out: out.clone() };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn selu(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("selu", a)?;
        let out = a
            .data
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            })
            .collect();
        let op = Op::Selu { a: Src::of(a, true) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("tanh", a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| x.tanh()).collect();
        let op = Op::Tanh { a: Src::of(a, false), out: out.clone() };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("sigmoid", a)?;
        let out: Vec<f64> = a
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let op = Op::Sigmoid { a: Src::of(a, false), out: out.clone() };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("exp", a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| x.exp()).collect();
        let op = Op::Exp { a: Src::of(a, false), out: out.clone() };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    /// log(max(x, 1e-12)); the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("log_clamped", a)?;
        let out = a.data.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
        let op = Op::LogClamped { a: Src::of(a, true) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("abs", a)?;
        let out = a.data.iter().map(|&x| x.abs()).collect();
        let op = Op::Abs { a: Src::of(a, true) };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("mean_all", a)?;
        let m = a.data.iter().sum::<f64>() / a.data.len() as f64;
        let op = Op::MeanAll { a: Src::of(a, false) };
        Ok(self.emit(tracked, op, 1, 1, vec![m]))
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("sum_all", a)?;
        let s = a.data.iter().sum::<f64>();
        let op = Op::SumAll { a: Src::of(a, false) };
        Ok(self.emit(tracked, op, 1, 1, vec![s]))
    }

    /// Euclidean norm of each row: RxC -> Rx1.
    pub fn l2_row_norms(&self, a: &Tensor) -> Result<Tensor> {
        let tracked = self.prep1("l2_row_norms", a)?;
        let out: Vec<f64> = (0..a.rows)
            .map(|r| {
                a.data[r * a.cols..(r + 1) * a.cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let op = Op::L2RowNorms { a: Src::of(a, true), out: out.clone() };
        Ok(self.emit(tracked, op, a.rows, 1, out))
    }

    pub fn scale(&self, a: &Tensor, k: f64) -> Result<Tensor> {
        let tracked = self.prep1("scale", a)?;
        if !k.is_finite() {
            return Err(CoreError::NonFinite { op: "scale", index: 0 });
        }
        let out = a.data.iter().map(|&x| k * x).collect();
        let op = Op::Scale { a: Src::of(a, false), k };
        Ok(self.emit(tracked, op, a.rows, a.cols, out))
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    /// Rows with zero norm yield similarity 0 (and propagate no gradient).
    pub fn cosine_sim(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let tracked = self.prep2("cosine_sim", a, b)?;
        if a.cols != b.cols {
            return Err(CoreError::ShapeMismatch {
                op: "cosine_sim",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let out = cosine_sim_values(&a.data, a.rows, &b.data, b.rows, a.cols);
        let op = Op::CosineSim { a: Src::of(a, true), b: Src::of(b, true) };
        Ok(self.emit(tracked, op, a.rows, b.rows, out))
    }

    /// Per-row layer normalization with learned 1xC gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let tracked =
            self.prep1("layer_norm", x)? | self.prep2("layer_norm", gamma, beta)?;
        if gamma.rows != 1 || beta.rows != 1 || gamma.cols != x.cols || beta.cols != x.cols {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs_rows: x.rows,
                lhs_cols: x.cols,
                rhs_rows: gamma.rows,
                rhs_cols: gamma.cols,
            });
        }
        let d = x.cols;
        let mut out = vec![0.0; x.data.len()];
        for r in 0..x.rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out[r * d + c] = gamma.data[c] * (row[c] - mean) * inv + beta.data[c];
            }
        }
        let op = Op::LayerNorm {
            x: Src::of(x, true),
            gamma: Src::of(gamma, true),
            beta: Src::of(beta, false),
            eps,
        };
        Ok(self.emit(tracked, op, x.rows, x.cols, out))
    }

    /// Reverse pass from a scalar loss. Consumes the tape's single backward budget.
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap> {
        if self.consumed.get() {
            return Err(CoreError::invalid("backward already called on this tape"));
        }
        let (tape_id, loss_node) = loss
            .node
            .ok_or_else(|| CoreError::invalid("backward: loss is not on the tape"))?;
        if tape_id != self.id {
            return Err(CoreError::invalid("backward: loss belongs to a different tape"));
        }
        if loss.rows != 1 || loss.cols != 1 {
            return Err(CoreError::invalid(format!(
                "backward: loss must be 1x1, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut shapes: Vec<(usize, usize)> = Vec::with_capacity(n);
        for node in nodes.iter() {
            shapes.push((node.out_rows, node.out_cols));
        }
        grads[loss_node] = Some(vec![1.0]);

        // Nodes are recorded in topological order, so a single reverse sweep works.
        for id in (0..=loss_node).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        Ok(GradMap { tape_id: self.id, grads, shapes })
    }
}

pub(crate) fn cosine_sim_values(
    a: &[f64],
    a_rows: usize,
    b: &[f64],
    b_rows: usize,
    d: usize,
) -> Vec<f64> {
    let norm = |data: &[f64], r: usize| -> f64 {
        data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let a_norms: Vec<f64> = (0..a_rows).map(|r| norm(a, r)).collect();
    let b_norms: Vec<f64> = (0..b_rows).map(|r| norm(b, r)).collect();
    let mut out = vec![0.0; a_rows * b_rows];
    for m in 0..a_rows {
        if a_norms[m] == 0.0 {
            continue;
        }
        for n in 0..b_rows {
            if b_norms[n] == 0.0 {
                continue;
            }
            let dot: f64 = (0..d).map(|c| a[m * d + c] * b[n * d + c]).sum();
            out[m * b_rows + n] = dot / (a_norms[m] * b_norms[n]);
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], src: &Src, contribution: Vec<f64>) {
    let Some(id) = src.node else { return };
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node(node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (or, oc) = (node.out_rows, node.out_cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            // dA = G B^T, dB = A^T G
            if a.node.is_some() {
                let (m, k, n) = (a.rows, a.cols, b.cols);
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gv * b.data[p * n + j];
                        }
                    }
                }
                accumulate(grads, a, da);
            }
            if b.node.is_some() {
                let (m, k, n) = (a.rows, a.cols, b.cols);
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                accumulate(grads, b, db);
            }
        }
        Op::Add { a, b } => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.iter().map(|v| -v).collect());
        }
        Op::ElemMul { a, b } => {
            if a.node.is_some() {
                accumulate(grads, a, g.iter().zip(&b.data).map(|(gv, bv)| gv * bv).collect());
            }
            if b.node.is_some() {
                accumulate(grads, b, g.iter().zip(&a.data).map(|(gv, av)| gv * av).collect());
            }
        }
        Op::AddRow { a, b } => {
            accumulate(grads, a, g.to_vec());
            if b.node.is_some() {
                let mut db = vec![0.0; oc];
                for r in 0..or {
                    for c in 0..oc {
                        db[c] += g[r * oc + c];
                    }
                }
                accumulate(grads, b, db);
            }
        }
        Op::ConcatRows { a, b } => {
            let split = a.rows * a.cols;
            accumulate(grads, a, g[..split].to_vec());
            accumulate(grads, b, g[split..].to_vec());
        }
        Op::ConcatCols { a, b } => {
            if a.node.is_some() {
                let mut da = Vec::with_capacity(a.rows * a.cols);
                for r in 0..or {
                    da.extend_from_slice(&g[r * oc..r * oc + a.cols]);
                }
                accumulate(grads, a, da);
            }
            if b.node.is_some() {
                let mut db = Vec::with_capacity(b.rows * b.cols);
                for r in 0..or {
                    db.extend_from_slice(&g[r * oc + a.cols..(r + 1) * oc]);
                }
                accumulate(grads, b, db);
            }
        }
        Op::Transpose { a } => {
            let mut da = vec![0.0; a.rows * a.cols];
            for r in 0..or {
                for c in 0..oc {
                    da[c * a.cols + r] = g[r * oc + c];
                }
            }
            accumulate(grads, a, da);
        }
        Op::SliceRows { a, start } => {
            let mut da = vec![0.0; a.rows * a.cols];
            da[start * a.cols..start * a.cols + g.len()].copy_from_slice(g);
            accumulate(grads, a, da);
        }
        Op::SliceCols { a, start } => {
            let mut da = vec![0.0; a.rows * a.cols];
            for r in 0..or {
                for c in 0..oc {
                    da[r * a.cols + start + c] = g[r * oc + c];
                }
            }
            accumulate(grads, a, da);
        }
        Op::RowSoftmax { a, out } => {
            let mut da = vec![0.0; out.len()];
            for r in 0..or {
                let y = &out[r * oc..(r + 1) * oc];
                let gr = &g[r * oc..(r + 1) * oc];
                let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                for c in 0..oc {
                    da[r * oc + c] = y[c] * (gr[c] - dot);
                }
            }
            accumulate(grads, a, da);
        }
        Op::Selu { a } => {
            let da = g
                .iter()
                .zip(&a.data)
                .map(|(gv, &x)| {
                    gv * if x > 0.0 { SELU_LAMBDA } else { SELU_LAMBDA * SELU_ALPHA * x.exp() }
                })
                .collect();
            accumulate(grads, a, da);
        }
        Op::Tanh { a, out } => {
            accumulate(grads, a, g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect());
        }
        Op::Sigmoid { a, out } => {
            accumulate(grads, a, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect());
        }
        Op::Exp { a, out } => {
            accumulate(grads, a, g.iter().zip(out).map(|(gv, y)| gv * y).collect());
        }
        Op::LogClamped { a } => {
            let da = g
                .iter()
                .zip(&a.data)
                .map(|(gv, &x)| if x > LOG_FLOOR { gv / x } else { 0.0 })
                .collect();
            accumulate(grads, a, da);
        }
        Op::Abs { a } => {
            let da = g
                .iter()
                .zip(&a.data)
                .map(|(gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                .collect();
            accumulate(grads, a, da);
        }
        Op::MeanAll { a } => {
            let scale = g[0] / (a.rows * a.cols) as f64;
            accumulate(grads, a, vec![scale; a.rows * a.cols]);
        }
        Op::SumAll { a } => {
            accumulate(grads, a, vec![g[0]; a.rows * a.cols]);
        }
        Op::L2RowNorms { a, out } => {
            let d = a.cols;
            let mut da = vec![0.0; a.rows * d];
            for r in 0..a.rows {
                let norm = out[r];
                if norm <= LOG_FLOOR {
                    continue;
                }
                let s = g[r] / norm;
                for c in 0..d {
                    da[r * d + c] = s * a.data[r * d + c];
                }
            }
            accumulate(grads, a, da);
        }
        Op::Scale { a, k } => {
            accumulate(grads, a, g.iter().map(|gv| gv * k).collect());
        }
        Op::CosineSim { a, b } => {
            let d = a.cols;
            let norm = |data: &[f64], r: usize| -> f64 {
                data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            let a_norms: Vec<f64> = (0..a.rows).map(|r| norm(&a.data, r)).collect();
            let b_norms: Vec<f64> = (0..b.rows).map(|r| norm(&b.data, r)).collect();
            let mut da = vec![0.0; a.rows * d];
            let mut db = vec![0.0; b.rows * d];
            for m in 0..a.rows {
                if a_norms[m] == 0.0 {
                    continue;
                }
                for n in 0..b.rows {
                    if b_norms[n] == 0.0 {
                        continue;
                    }
                    let gv = g[m * b.rows + n];
                    if gv == 0.0 {
                        continue;
                    }
                    let inv = 1.0 / (a_norms[m] * b_norms[n]);
                    let dot: f64 = (0..d).map(|c| a.data[m * d + c] * b.data[n * d + c]).sum();
                    let s = dot * inv;
                    for c in 0..d {
                        let av = a.data[m * d + c];
                        let bv = b.data[n * d + c];
                        da[m * d + c] += gv * (bv * inv - s * av / (a_norms[m] * a_norms[m]));
                        db[n * d + c] += gv * (av * inv - s * bv / (b_norms[n] * b_norms[n]));
                    }
                }
            }
            if a.node.is_some() {
                accumulate(grads, a, da);
            }
            if b.node.is_some() {
                accumulate(grads, b, db);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = x.cols;
            let mut dx = vec![0.0; x.rows * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..x.rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let gr = &g[r * d..(r + 1) * d];
                let dxhat: Vec<f64> = gr.iter().zip(&gamma.data).map(|(gv, gm)| gv * gm).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(dv, xv)| dv * xv).sum::<f64>() / d as f64;
                for c in 0..d {
                    dx[r * d + c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    dgamma[c] += gr[c] * xhat[c];
                    dbeta[c] += gr[c];
                }
            }
            if x.node.is_some() {
                accumulate(grads, x, dx);
            }
            if gamma.node.is_some() {
                accumulate(grads, gamma, dgamma);
            }
            if beta.node.is_some() {
                accumulate(grads, beta, dbeta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 1, &[1.0, 1.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_carries_dims() {
        let tape = Tape::new();
        let a = t(2, 3, &[0.0; 6]);
        let b = t(2, 2, &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn non_finite_input_rejected_with_index() {
        let tape = Tape::new();
        let a = t(1, 3, &[1.0, f64::NAN, 2.0]);
        match tape.exp(&a) {
            Err(CoreError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn row_softmax_rows_sum_to_one_and_shift_invariant() {
        let tape = Tape::new();
        let a = t(2, 3, &[0.3, -1.2, 4.0, 100.0, 100.5, 99.0]);
        let s = tape.row_softmax(&a).unwrap();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = t(2, 3, &[0.3 + 7.0, -1.2 + 7.0, 4.0 + 7.0, 100.0 - 3.0, 100.5 - 3.0, 99.0 - 3.0]);
        let s2 = tape.row_softmax(&shifted).unwrap();
        for (x, y) in s.data().iter().zip(s2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selu_fixture_values() {
        let tape = Tape::new();
        let x = t(1, 3, &[0.0, -30.0, 1.0]);
        let y = tape.selu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        // deep-negative limit is -lambda*alpha
        assert!((y.data()[1] - (-SELU_LAMBDA * SELU_ALPHA)).abs() < 1e-9);
        assert!((y.data()[2] - SELU_LAMBDA).abs() < 1e-12);
    }

    #[test]
    fn backward_mean_all_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.mean_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.wrt(&x).unwrap();
        assert_eq!(gx.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn backward_sum_of_squares_gradient() {
        let tape = Tape::new();
        let vals = [0.5, -1.5, 2.0, 0.25];
        let x = tape.leaf(&t(2, 2, &vals));
        let sq = tape.elemwise_mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.wrt(&x).unwrap();
        for (g, v) in gx.data().iter().zip(&vals) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(&t(1, 1, &[2.0]));
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(&t(2, 1, &[1.0, 2.0]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(1, 2, &[1.0, 2.0]));
        let unused = tape.leaf(&t(1, 2, &[5.0, 6.0]));
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let _ = tape.add(&a, &b).unwrap();
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let tape1 = Tape::new();
        let tape2 = Tape::new();
        let x = tape1.leaf(&t(1, 1, &[1.0]));
        assert!(tape2.sum_all(&x).is_err());
    }

    #[test]
    fn cosine_sim_zero_norm_row_is_zero() {
        let tape = Tape::new();
        let a = t(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = tape.cosine_sim(&a, &b).unwrap();
        assert_eq!(&s.data()[..2], &[0.0, 0.0]);
        assert!((s.at(1, 0) - 1.0).abs() < 1e-12);
        assert!(s.at(1, 1).abs() < 1e-12);
    }
}
