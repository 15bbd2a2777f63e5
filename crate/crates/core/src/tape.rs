//! Reverse-mode computation tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state for the backward sweep. Handles are plain indices ([`Var`]), so a
//! tape is cheap to rebuild each training step. Tensors of rank 1 and 2 are
//! supported; rank-1 inputs to row-wise ops are treated as a single row.
//!
//! NaN is never silently propagated: each op scans its output and fails with
//! [`CoreError::NonFinite`]. `-inf` is legal only as an additive attention
//! bias on the way into `softmax_rows`, which maps it to an exact zero weight.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowfConst(Var, f64),
    Neg(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var },
    BatchNormCols { x: Var, gamma: Var, beta: Var },
    GatherEntries(Var, Vec<(usize, usize)>),
    Detach,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Op-specific buffers for backward (e.g. normalized activations).
    saved: Vec<f64>,
}

/// Batch statistics reported by `batch_norm_cols`, used to maintain running
/// estimates outside the tape.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the batch size).
    pub var: Vec<f64>,
}

/// Reverse-mode tape. Build it fresh per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// (rows, cols) view of a rank-1 or rank-2 shape.
fn as2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(CoreError::InvalidShape { detail: format!("expected rank 1 or 2, got {shape:?}") }),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if no gradient flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool, saved: Vec<f64>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        saved: Vec<f64>,
    ) -> Result<Var> {
        if value.iter().any(|v| v.is_nan()) {
            return Err(CoreError::NonFinite { op: op_name });
        }
        Ok(self.push(shape, value, op, requires_grad, saved))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Inputs ──────────────────────────────────────────────────────────

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad, vec![])
    }

    /// Non-differentiable constant. NaN and +inf are rejected; -inf is allowed
    /// so additive attention masks can be expressed.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(CoreError::InvalidShape {
                detail: format!("constant: shape {:?} vs {} values", shape, data.len()),
            });
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(CoreError::NonFinite { op: "constant" });
        }
        Ok(self.push(shape, data, Op::Constant, false, vec![]))
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(vec![1], vec![v])
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add", self.nodes[a.0].shape.clone(), value, Op::Add(a, b), rg, vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("sub", self.nodes[a.0].shape.clone(), value, Op::Sub(a, b), rg, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("mul", self.nodes[a.0].shape.clone(), value, Op::Mul(a, b), rg, vec![])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x / y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("div", self.nodes[a.0].shape.clone(), value, Op::Div(a, b), rg, vec![])
    }

    // ── Broadcasting binary ─────────────────────────────────────────────

    /// `m[r,c] + row[c]` for every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[m.0].shape)?;
        if self.nodes[row.0].shape != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix {:?} vs row {:?}", self.nodes[m.0].shape, self.nodes[row.0].shape),
            });
        }
        let mut value = self.nodes[m.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += self.nodes[row.0].value[j];
            }
        }
        let rg = self.rg(m) || self.rg(row);
        self.push_checked("add_row", self.nodes[m.0].shape.clone(), value, Op::AddRow(m, row), rg, vec![])
    }

    /// `m[r,c] * row[c]` for every row.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[m.0].shape)?;
        if self.nodes[row.0].shape != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "mul_row",
                detail: format!("matrix {:?} vs row {:?}", self.nodes[m.0].shape, self.nodes[row.0].shape),
            });
        }
        let mut value = self.nodes[m.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] *= self.nodes[row.0].value[j];
            }
        }
        let rg = self.rg(m) || self.rg(row);
        self.push_checked("mul_row", self.nodes[m.0].shape.clone(), value, Op::MulRow(m, row), rg, vec![])
    }

    /// `m[r,c] + col[r]` for every column.
    pub fn add_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[m.0].shape)?;
        if self.nodes[col.0].shape != [r] {
            return Err(CoreError::ShapeMismatch {
                op: "add_col",
                detail: format!("matrix {:?} vs col {:?}", self.nodes[m.0].shape, self.nodes[col.0].shape),
            });
        }
        let mut value = self.nodes[m.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += self.nodes[col.0].value[i];
            }
        }
        let rg = self.rg(m) || self.rg(col);
        self.push_checked("add_col", self.nodes[m.0].shape.clone(), value, Op::AddCol(m, col), rg, vec![])
    }

    /// `m[r,c] / col[r]` — each row divided by its own scalar.
    pub fn div_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[m.0].shape)?;
        if self.nodes[col.0].shape != [r] {
            return Err(CoreError::ShapeMismatch {
                op: "div_col",
                detail: format!("matrix {:?} vs col {:?}", self.nodes[m.0].shape, self.nodes[col.0].shape),
            });
        }
        let mut value = self.nodes[m.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] /= self.nodes[col.0].value[i];
            }
        }
        let rg = self.rg(m) || self.rg(col);
        self.push_checked("div_col", self.nodes[m.0].shape.clone(), value, Op::DivCol(m, col), rg, vec![])
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    fn unary(
        &mut self,
        op_name: &'static str,
        a: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push_checked(op_name, self.nodes[a.0].shape.clone(), value, op, rg, vec![])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + k)
    }

    pub fn powf_const(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("powf_const", a, Op::PowfConst(a, k), |x| x.powf(k))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, Op::Neg(a), |x| -x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, Op::Ln(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Value copy with gradient flow severed.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.clone();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Detach, false, vec![]))
    }

    // ── Linear algebra and shape ────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch { op: "matmul", detail: format!("{sa:?} x {sb:?}") });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let out = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += aip * row[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", vec![m, n], value, Op::MatMul(a, b), rg, vec![])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(CoreError::InvalidShape { detail: format!("transpose expects rank 2, got {s:?}") });
        }
        let (r, c) = (s[0], s[1]);
        let d = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push_checked("transpose", vec![c, r], value, Op::Transpose(a), rg, vec![])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[a.0].value.len() {
            return Err(CoreError::InvalidShape {
                detail: format!("reshape {:?} -> {:?}", self.nodes[a.0].shape, shape),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg, vec![]))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[a.0].shape)?;
        if r0 >= r1 || r1 > r {
            return Err(CoreError::InvalidShape { detail: format!("slice_rows {r0}..{r1} of {r}") });
        }
        let value = self.nodes[a.0].value[r0 * c..r1 * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![r1 - r0, c], value, Op::SliceRows(a, r0, r1), rg, vec![]))
    }

    /// Single row of a matrix as a rank-1 vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let sliced = self.slice_rows(a, i, i + 1)?;
        let c = self.nodes[sliced.0].shape[1];
        self.reshape(sliced, vec![c])
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[a.0].shape)?;
        if c0 >= c1 || c1 > c {
            return Err(CoreError::InvalidShape { detail: format!("slice_cols {c0}..{c1} of {c}") });
        }
        let d = &self.nodes[a.0].value;
        let w = c1 - c0;
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&d[i * c + c0..i * c + c1]);
        }
        let out_shape = if self.nodes[a.0].shape.len() == 1 { vec![w] } else { vec![r, w] };
        let rg = self.rg(a);
        Ok(self.push(out_shape, value, Op::SliceCols(a, c0, c1), rg, vec![]))
    }

    /// Stacks matrices (or rank-1 rows) along axis 0; all must share the
    /// column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::InvalidShape { detail: "concat_rows of nothing".into() });
        }
        let (_, c) = as2d(&self.nodes[parts[0].0].shape)?;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, pc) = as2d(&self.nodes[p.0].shape)?;
            if pc != c {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column count {pc} vs {c}"),
                });
            }
            rows += r;
            value.extend_from_slice(&self.nodes[p.0].value);
            rg |= self.rg(p);
        }
        Ok(self.push(vec![rows, c], value, Op::ConcatRows(parts.to_vec()), rg, vec![]))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum_all", vec![1], vec![s], Op::SumAll(a), rg, vec![])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push_checked("mean_all", vec![1], vec![s / n], Op::MeanAll(a), rg, vec![])
    }

    /// Per-row sums of a matrix, as a rank-1 vector of length `rows`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[a.0].shape)?;
        let d = &self.nodes[a.0].value;
        let value: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push_checked("row_sums", vec![r], value, Op::RowSums(a), rg, vec![])
    }

    // ── Row-wise nonlinearities ─────────────────────────────────────────

    /// Row-wise softmax with max subtraction. `-inf` logits produce exact
    /// zeros; a row of only `-inf` is an error.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[a.0].shape)?;
        let d = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(CoreError::DegenerateSoftmaxRow { row: i });
            }
            let out = &mut value[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                let e = if row[j] == f64::NEG_INFINITY { 0.0 } else { (row[j] - m).exp() };
                out[j] = e;
                sum += e;
            }
            for x in out.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        self.push_checked("softmax_rows", self.nodes[a.0].shape.clone(), value, Op::SoftmaxRows(a), rg, vec![])
    }

    /// Row-wise log-softmax; inputs must be finite.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[a.0].shape)?;
        let d = &self.nodes[a.0].value;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "log_softmax_rows" });
        }
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                value[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        self.push_checked(
            "log_softmax_rows",
            self.nodes[a.0].shape.clone(),
            value,
            Op::LogSoftmaxRows(a),
            rg,
            vec![],
        )
    }

    /// Row-wise layer normalization with affine gain/bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[x.0].shape)?;
        if self.nodes[gain.0].shape != [c] || self.nodes[bias.0].shape != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm_rows",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.nodes[x.0].shape, self.nodes[gain.0].shape, self.nodes[bias.0].shape
                ),
            });
        }
        let d = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut value = vec![0.0; r * c];
        // saved: xhat (r*c) followed by inv_std per row (r)
        let mut saved = vec![0.0; r * c + r];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            saved[r * c + i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                saved[i * c + j] = xh;
                value[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push_checked(
            "layer_norm_rows",
            self.nodes[x.0].shape.clone(),
            value,
            Op::LayerNormRows { x, gain, bias },
            rg,
            saved,
        )
    }

    /// Column-wise (per-feature) batch normalization over the row dimension.
    /// Returns the normalized output and the batch statistics.
    pub fn batch_norm_cols(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(CoreError::InvalidShape { detail: format!("batch_norm_cols expects rank 2, got {s:?}") });
        }
        let (r, c) = (s[0], s[1]);
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "batch_norm_cols",
                detail: format!("x {:?}, gamma {:?}", s, self.nodes[gamma.0].shape),
            });
        }
        let d = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += d[i * c + j];
            }
            mean[j] = s / r as f64;
            let mut v = 0.0;
            for i in 0..r {
                let dvi = d[i * c + j] - mean[j];
                v += dvi * dvi;
            }
            var[j] = v / r as f64;
        }
        let mut value = vec![0.0; r * c];
        let mut saved = vec![0.0; r * c + c];
        for j in 0..c {
            let istd = 1.0 / (var[j] + eps).sqrt();
            saved[r * c + j] = istd;
            for i in 0..r {
                let xh = (d[i * c + j] - mean[j]) * istd;
                saved[i * c + j] = xh;
                value[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push_checked(
            "batch_norm_cols",
            vec![r, c],
            value,
            Op::BatchNormCols { x, gamma, beta },
            rg,
            saved,
        )?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Picks named `(row, col)` entries of a matrix into a rank-1 vector.
    pub fn gather_entries(&mut self, m: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = as2d(&self.nodes[m.0].shape)?;
        let d = &self.nodes[m.0].value;
        let mut value = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(CoreError::InvalidShape { detail: format!("gather ({i},{j}) of {r}x{c}") });
            }
            value.push(d[i * c + j]);
        }
        let rg = self.rg(m);
        self.push_checked("gather_entries", vec![idx.len()], value, Op::GatherEntries(m, idx.to_vec()), rg, vec![])
    }

    // ── Composites ──────────────────────────────────────────────────────

    /// Dot product of two rank-1 vectors, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum_all(prod)
    }

    /// Cosine similarity of two rank-1 vectors with a 1e-12 denominator
    /// stabilizer.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let num = self.dot(a, b)?;
        let aa = self.dot(a, a)?;
        let bb = self.dot(b, b)?;
        let na = self.sqrt(aa)?;
        let nb = self.sqrt(bb)?;
        let denom = self.mul(na, nb)?;
        let denom = self.add_scalar(denom, 1e-12)?;
        self.div(num, denom)
    }

    /// Mean of scalar nodes.
    pub fn mean_of_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        self.scale(acc, 1.0 / terms.len() as f64)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate for every node
    /// on a `requires_grad` path and are read back via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::NonScalarLoss { numel: self.nodes[loss.0].value.len() });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc_into(&mut self, v: Var, contrib: impl IntoIterator<Item = f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = self.ensure_grad(v);
        for (slot, c) in g.iter_mut().zip(contrib) {
            *slot += c;
        }
    }

    fn propagate(&mut self, node: usize, op: &Op, dy: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::Add(a, b) => {
                self.acc_into(a, dy.iter().cloned());
                self.acc_into(b, dy.iter().cloned());
            }
            Op::Sub(a, b) => {
                self.acc_into(a, dy.iter().cloned());
                self.acc_into(b, dy.iter().map(|&g| -g));
            }
            Op::Mul(a, b) => {
                let bv: Vec<f64> = self.nodes[b.0].value.clone();
                let av: Vec<f64> = self.nodes[a.0].value.clone();
                self.acc_into(a, dy.iter().zip(&bv).map(|(&g, &y)| g * y));
                self.acc_into(b, dy.iter().zip(&av).map(|(&g, &x)| g * x));
            }
            Op::Div(a, b) => {
                let bv: Vec<f64> = self.nodes[b.0].value.clone();
                let av: Vec<f64> = self.nodes[a.0].value.clone();
                self.acc_into(a, dy.iter().zip(&bv).map(|(&g, &y)| g / y));
                self.acc_into(
                    b,
                    dy.iter().zip(av.iter().zip(&bv)).map(|(&g, (&x, &y))| -g * x / (y * y)),
                );
            }
            Op::AddRow(m, row) => {
                let (r, c) = as2d(&self.nodes[m.0].shape).unwrap();
                self.acc_into(m, dy.iter().cloned());
                let mut drow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] += dy[i * c + j];
                    }
                }
                self.acc_into(row, drow);
            }
            Op::MulRow(m, row) => {
                let (r, c) = as2d(&self.nodes[m.0].shape).unwrap();
                let rowv = self.nodes[row.0].value.clone();
                let mv = self.nodes[m.0].value.clone();
                self.acc_into(m, dy.iter().enumerate().map(|(k, &g)| g * rowv[k % c]));
                let mut drow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] += dy[i * c + j] * mv[i * c + j];
                    }
                }
                self.acc_into(row, drow);
            }
            Op::AddCol(m, col) => {
                let (r, c) = as2d(&self.nodes[m.0].shape).unwrap();
                self.acc_into(m, dy.iter().cloned());
                let mut dcol = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dcol[i] += dy[i * c + j];
                    }
                }
                self.acc_into(col, dcol);
            }
            Op::DivCol(m, col) => {
                let (r, c) = as2d(&self.nodes[m.0].shape).unwrap();
                let colv = self.nodes[col.0].value.clone();
                let mv = self.nodes[m.0].value.clone();
                self.acc_into(m, dy.iter().enumerate().map(|(k, &g)| g / colv[k / c]));
                let mut dcol = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dcol[i] -= dy[i * c + j] * mv[i * c + j] / (colv[i] * colv[i]);
                    }
                }
                self.acc_into(col, dcol);
            }
            Op::Scale(a, k) => self.acc_into(a, dy.iter().map(|&g| g * k)),
            Op::AddScalar(a) => self.acc_into(a, dy.iter().cloned()),
            Op::PowfConst(a, k) => {
                let av = self.nodes[a.0].value.clone();
                self.acc_into(a, dy.iter().zip(&av).map(|(&g, &x)| g * k * x.powf(k - 1.0)));
            }
            Op::Neg(a) => self.acc_into(a, dy.iter().map(|&g| -g)),
            Op::Sqrt(a) => {
                let yv = self.nodes[node].value.clone();
                self.acc_into(a, dy.iter().zip(&yv).map(|(&g, &y)| g * 0.5 / y));
            }
            Op::Ln(a) => {
                let av = self.nodes[a.0].value.clone();
                self.acc_into(a, dy.iter().zip(&av).map(|(&g, &x)| g / x));
            }
            Op::Exp(a) => {
                let yv = self.nodes[node].value.clone();
                self.acc_into(a, dy.iter().zip(&yv).map(|(&g, &y)| g * y));
            }
            Op::Gelu(a) => {
                let av = self.nodes[a.0].value.clone();
                self.acc_into(
                    a,
                    dy.iter().zip(&av).map(|(&g, &x)| {
                        let u = GELU_C0 * (x + GELU_C1 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    }),
                );
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.clone();
                self.acc_into(a, dy.iter().zip(&av).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[node].value.clone();
                self.acc_into(a, dy.iter().zip(&yv).map(|(&g, &y)| g * y * (1.0 - y)));
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.nodes[a.0].value.clone();
                self.acc_into(
                    a,
                    dy.iter().zip(&av).map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 }),
                );
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.nodes[a.0].requires_grad {
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.acc_into(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * dy[i * n + j];
                            }
                        }
                    }
                    self.acc_into(b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[j * r + i];
                    }
                }
                self.acc_into(a, da);
            }
            Op::Reshape(a) => self.acc_into(a, dy.iter().cloned()),
            Op::SliceRows(a, r0, _r1) => {
                let (_, c) = as2d(&self.nodes[a.0].shape).unwrap();
                if self.nodes[a.0].requires_grad {
                    let g = self.ensure_grad(a);
                    for (k, &v) in dy.iter().enumerate() {
                        g[r0 * c + k] += v;
                    }
                }
            }
            Op::SliceCols(a, c0, _c1) => {
                let (r, c) = as2d(&self.nodes[a.0].shape).unwrap();
                let w = dy.len() / r;
                if self.nodes[a.0].requires_grad {
                    let g = self.ensure_grad(a);
                    for i in 0..r {
                        for j in 0..w {
                            g[i * c + c0 + j] += dy[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let chunk: Vec<f64> = dy[offset..offset + n].to_vec();
                    self.acc_into(p, chunk);
                    offset += n;
                }
            }
            Op::SumAll(a) => {
                let g = dy[0];
                let n = self.nodes[a.0].value.len();
                self.acc_into(a, std::iter::repeat(g).take(n));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                let g = dy[0] / n as f64;
                self.acc_into(a, std::iter::repeat(g).take(n));
            }
            Op::RowSums(a) => {
                let (r, c) = as2d(&self.nodes[a.0].shape).unwrap();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[i];
                    }
                }
                self.acc_into(a, da);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = as2d(&self.nodes[node].shape).unwrap();
                let y = self.nodes[node].value.clone();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let s: f64 = yr.iter().zip(dr).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (dr[j] - s);
                    }
                }
                self.acc_into(a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = as2d(&self.nodes[node].shape).unwrap();
                let y = self.nodes[node].value.clone();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let dr = &dy[i * c..(i + 1) * c];
                    let s: f64 = dr.iter().sum();
                    for j in 0..c {
                        da[i * c + j] = dr[j] - y[i * c + j].exp() * s;
                    }
                }
                self.acc_into(a, da);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let (r, c) = as2d(&self.nodes[x.0].shape).unwrap();
                let saved = self.nodes[node].saved.clone();
                let (xhat, istd) = saved.split_at(r * c);
                let g = self.nodes[gain.0].value.clone();
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let xh = &xhat[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let mut m1 = 0.0; // mean of g.dy
                    let mut m2 = 0.0; // mean of g.dy.xhat
                    for j in 0..c {
                        let gd = g[j] * dr[j];
                        m1 += gd;
                        m2 += gd * xh[j];
                        dgain[j] += dr[j] * xh[j];
                        dbias[j] += dr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx[i * c + j] = istd[i] * (g[j] * dr[j] - m1 - xh[j] * m2);
                    }
                }
                self.acc_into(x, dx);
                self.acc_into(gain, dgain);
                self.acc_into(bias, dbias);
            }
            Op::BatchNormCols { x, gamma, beta } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let saved = self.nodes[node].saved.clone();
                let (xhat, istd) = saved.split_at(r * c);
                let g = self.nodes[gamma.0].value.clone();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for j in 0..c {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..r {
                        let gd = g[j] * dy[i * c + j];
                        m1 += gd;
                        m2 += gd * xhat[i * c + j];
                        dgamma[j] += dy[i * c + j] * xhat[i * c + j];
                        dbeta[j] += dy[i * c + j];
                    }
                    m1 /= r as f64;
                    m2 /= r as f64;
                    for i in 0..r {
                        dx[i * c + j] =
                            istd[j] * (g[j] * dy[i * c + j] - m1 - xhat[i * c + j] * m2);
                    }
                }
                self.acc_into(x, dx);
                self.acc_into(gamma, dgamma);
                self.acc_into(beta, dbeta);
            }
            Op::GatherEntries(m, ref idx) => {
                let (_, c) = as2d(&self.nodes[m.0].shape).unwrap();
                if self.nodes[m.0].requires_grad {
                    let g = self.ensure_grad(m);
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        g[i * c + j] += dy[k];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let t = Tensor::new(shape, data).unwrap().with_requires_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut tape = Tape::new();
        let sel = leaf(&mut tape, vec![1, 2], vec![1.0, 0.0]);
        let col = leaf(&mut tape, vec![2, 1], vec![7.5, -3.0]);
        let out = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(out), &[7.5]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(tape.matmul(a, b), Err(CoreError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_mask() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let m = tape.constant(vec![2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        let y = tape.softmax_rows(m).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_scalar_reevaluation() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        let y = tape.softmax_rows(x).unwrap();
        // independent high-precision evaluation
        let z: f64 = (1f64.exp()) + (2f64.exp()) + (3f64.exp());
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, e) in tape.value(y).iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        let s: f64 = tape.value(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let mut tape = Tape::new();
        let m = tape.constant(vec![2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(tape.softmax_rows(m), Err(CoreError::DegenerateSoftmaxRow { row: 0 })));
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![4.2, 4.2, 4.2]);
        let g = leaf(&mut tape, vec![3], vec![1.0, 1.0, 1.0]);
        let b = leaf(&mut tape, vec![3], vec![0.0, 0.0, 0.0]);
        let y = tape.layer_norm_rows(x, g, b, 1e-6).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, -1.0]);
        let g = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let b = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.layer_norm_rows(x, g, b, 1e-6).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-5);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn cosine_self_antipodal_orthogonal() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![3], vec![0.3, -1.2, 2.0]);
        let nv = tape.neg(v).unwrap();
        let c_self = tape.cosine_similarity(v, v).unwrap();
        assert!((tape.scalar_value(c_self) - 1.0).abs() < 1e-9);
        let c_anti = tape.cosine_similarity(v, nv).unwrap();
        assert!((tape.scalar_value(c_anti) + 1.0).abs() < 1e-9);

        let e1 = leaf(&mut tape, vec![2], vec![1.0, 0.0]);
        let e2 = leaf(&mut tape, vec![2], vec![0.0, 1.0]);
        let c_orth = tape.cosine_similarity(e1, e2).unwrap();
        assert!(tape.scalar_value(c_orth).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![1.0, -2.0, 0.5, 3.0]);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(CoreError::NonScalarLoss { numel: 2 })));
    }

    #[test]
    fn cosine_gradient_orthogonal_at_equal_args() {
        // loss = cos(x, c) at x == c: gradient is orthogonal to x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.6, -0.8, 0.4]);
        let c = tape.constant(vec![3], vec![0.6, -0.8, 0.4]).unwrap();
        let cos = tape.cosine_similarity(x, c).unwrap();
        tape.backward(cos).unwrap();
        let g = tape.grad(x).unwrap();
        let dot: f64 = g.iter().zip([0.6, -0.8, 0.4]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-8, "grad not orthogonal: {dot}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let d = tape.detach(x).unwrap();
        let prod = tape.mul(d, d).unwrap();
        let s = tape.sum_all(prod).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn nan_is_rejected_not_propagated() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![-1.0]);
        assert!(matches!(tape.sqrt(x), Err(CoreError::NonFinite { .. })));
    }
}
