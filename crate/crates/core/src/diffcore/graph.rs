//! Eager computation graph with reverse-mode differentiation.
//!
//! Every operation computes its forward value immediately and records enough
//! of its inputs to replay the adjoint later. Parameter leaves borrow their
//! values from a [`ParameterRegistry`]; frozen parameters and constants are
//! excluded from the backward pass, so no adjoint is ever materialised for
//! them.

use std::collections::HashMap;

use super::tensor::{dot, mm_acc, mm_nt_acc, mm_tn_acc, norm};
use super::{DiffError, Gradients, ParamId, ParameterRegistry, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    CosineRows(Var, Var),
    NormalizeRows(Var),
    RowNorm(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowMask(Var, Vec<f64>),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward trace. Build it, read values, then call
/// [`Graph::backward`].
pub struct Graph<'p> {
    params: &'p ParameterRegistry,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterRegistry) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterRegistry {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op });
        }
        self.nodes.push(Node {
            value: Some(value),
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<&Tensor, DiffError> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(DiffError::NotMatrix {
                op,
                shape: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a registry entry. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: !self.params.is_frozen(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.matrix("matmul", a)?, self.matrix("matmul", b)?);
        let ((m, k), (k2, n)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.matrix("matmul_nt", a)?, self.matrix("matmul_nt", b)?);
        let ((m, k), (n, k2)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.matrix("transpose", a)?;
        let (m, n) = t.dims();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node_op: Op) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op, out, node_op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (ta, tr) = (self.matrix("add_row", a)?, self.matrix("add_row", row)?);
        let (m, n) = ta.dims();
        if tr.dims() != (1, n) {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push("add_row", Tensor::matrix(m, n, out)?, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    /// Row-wise softmax. Masked entries (`mask[i] == false`) get probability
    /// zero; every row must keep at least one entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, DiffError> {
        let t = self.matrix("softmax", x)?;
        let (m, n) = t.dims();
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(DiffError::ShapeMismatch {
                    op: "softmax",
                    left: vec![m, n],
                    right: vec![mask.len()],
                });
            }
        }
        let keep = |idx: usize| mask.is_none_or(|mk| mk[idx]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(i * n + j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(DiffError::Invalid(format!("softmax row {i} is fully masked")));
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(i * n + j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    total += e;
                }
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::matrix(m, n, out)?, Op::Softmax(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.matrix("log_softmax", x)?;
        let (m, n) = t.dims();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push("log_softmax", Tensor::matrix(m, n, out)?, Op::LogSoftmax(x), rg)
    }

    /// Cosine similarity between corresponding rows, giving `m × 1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.matrix("cosine", a)?, self.matrix("cosine", b)?);
        if ta.dims() != tb.dims() {
            return Err(mismatch("cosine", ta, tb));
        }
        let m = ta.rows();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let (ra, rb) = (ta.row_slice(i), tb.row_slice(i));
            let (na, nb) = (norm(ra), norm(rb));
            if na == 0.0 || nb == 0.0 {
                return Err(DiffError::ZeroNorm { op: "cosine" });
            }
            out.push(dot(ra, rb) / (na * nb));
        }
        let rg = self.rg(&[a, b]);
        self.push("cosine", Tensor::matrix(m, 1, out)?, Op::CosineRows(a, b), rg)
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.matrix("normalize_rows", x)?;
        let (m, n) = t.dims();
        let mut out = t.data().to_vec();
        for i in 0..m {
            let r = &mut out[i * n..(i + 1) * n];
            let nr = norm(r);
            if nr == 0.0 {
                return Err(DiffError::ZeroNorm { op: "normalize_rows" });
            }
            r.iter_mut().for_each(|v| *v /= nr);
        }
        let rg = self.rg(&[x]);
        self.push("normalize_rows", Tensor::matrix(m, n, out)?, Op::NormalizeRows(x), rg)
    }

    /// Euclidean norm of each row, giving `m × 1`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.matrix("row_norm", x)?;
        let m = t.rows();
        let out: Vec<f64> = (0..m).map(|i| norm(t.row_slice(i))).collect();
        if out.iter().any(|&v| v == 0.0) && self.nodes[x.0].requires_grad {
            return Err(DiffError::ZeroNorm { op: "row_norm" });
        }
        let rg = self.rg(&[x]);
        self.push("row_norm", Tensor::matrix(m, 1, out)?, Op::RowNorm(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = self.matrix("concat_rows", parts[0])?;
        let n = first.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.matrix("concat_rows", p)?;
            if t.cols() != n {
                return Err(mismatch("concat_rows", first, t));
            }
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = self.matrix("concat_cols", parts[0])?;
        let m = first.rows();
        let mut n = 0;
        for &p in parts {
            let t = self.matrix("concat_cols", p)?;
            if t.rows() != m {
                return Err(mismatch("concat_cols", first, t));
            }
            n += t.cols();
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let t = self.matrix("slice_rows", x)?;
        let (m, n) = t.dims();
        if start >= end || end > m {
            return Err(DiffError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: m,
            });
        }
        let out = t.data()[start * n..end * n].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", Tensor::matrix(end - start, n, out)?, Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let t = self.matrix("slice_cols", x)?;
        let (m, n) = t.dims();
        if start >= end || end > n {
            return Err(DiffError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::matrix(m, end - start, out)?, Op::SliceCols(x, start), rg)
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let t = self.matrix("gather_rows", x)?;
        let (m, n) = t.dims();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::matrix(indices.len(), n, out)?,
            Op::GatherRows(x, indices.to_vec()),
            rg,
        )
    }

    /// Multiplies row `i` by the constant `mask[i]`.
    pub fn row_mask(&mut self, x: Var, mask: &[f64]) -> Result<Var, DiffError> {
        let t = self.matrix("row_mask", x)?;
        let (m, n) = t.dims();
        if mask.len() != m {
            return Err(DiffError::ShapeMismatch {
                op: "row_mask",
                left: vec![m, n],
                right: vec![mask.len()],
            });
        }
        let mut out = t.data().to_vec();
        for (i, &w) in mask.iter().enumerate() {
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= w);
        }
        let rg = self.rg(&[x]);
        self.push("row_mask", Tensor::matrix(m, n, out)?, Op::RowMask(x, mask.to_vec()), rg)
    }

    fn map(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, node_op: Op) -> Result<Var, DiffError> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(op, out, node_op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(DiffError::Invalid("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column sums, giving `1 × n`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.matrix("sum_rows", x)?;
        let (m, n) = t.dims();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push("sum_rows", Tensor::matrix(1, n, out)?, Op::SumRows(x), rg)
    }

    /// Column means, giving `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let m = self.matrix("mean_rows", x)?.rows();
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / m as f64)
    }

    /// Token-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let t = self.matrix("layer_norm", x)?;
        let (m, n) = t.dims();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.dims() != (1, n) || tb.dims() != (1, n) {
            return Err(mismatch("layer_norm", t, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let r = t.row_slice(i);
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (r[j] - mu) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Forward identity whose adjoint is always zero.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x).clone();
        self.push("stop_gradient", t, Op::StopGradient, false)
    }

    pub fn scalar(&self, v: Var) -> Result<f64, DiffError> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.item())
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward(&self, loss: Var) -> Result<Backward, DiffError> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: t.shape().to_vec(),
            });
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backward pass seeded with explicit output adjoints.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Backward, DiffError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, seed) in seeds {
            let val = self.value(*v);
            if val.shape() != seed.shape() {
                return Err(mismatch("backward_seed", val, seed));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            add_into(&mut grads, v.0, seed.data());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Gradients::with_len(self.params.len());
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.add(id, Tensor::new(self.params.value(id).shape().to_vec(), g.clone())?);
            }
        }
        Ok(Backward { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.as_ref();
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), n) = (ta.dims(), tb.cols());
                if wants(a) {
                    mm_nt_acc(g, tb.data(), buf(grads, a.0, m * k), m, n, k);
                }
                if wants(b) {
                    mm_tn_acc(ta.data(), g, buf(grads, b.0, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), n) = (ta.dims(), tb.rows());
                if wants(a) {
                    mm_acc(g, tb.data(), buf(grads, a.0, m * k), m, n, k);
                }
                if wants(b) {
                    mm_tn_acc(g, ta.data(), buf(grads, b.0, n * k), m, n, k);
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (m, n) = self.value(*a).dims();
                    let dst = buf(grads, a.0, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            dst[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(grads, a.0, g);
                }
                if wants(b) {
                    add_into(grads, b.0, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_into(grads, a.0, g);
                }
                if wants(b) {
                    let dst = buf(grads, b.0, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let dst = buf(grads, a.0, g.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[j] * tb.data()[j];
                    }
                }
                if wants(b) {
                    let dst = buf(grads, b.0, g.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[j] * ta.data()[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    add_into(grads, a.0, g);
                }
                if wants(row) {
                    let n = self.value(*row).cols();
                    let dst = buf(grads, row.0, n);
                    for chunk in g.chunks(n) {
                        dst.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    let dst = buf(grads, a.0, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Softmax(x) => {
                if wants(x) {
                    let y = out.expect("softmax value");
                    let n = y.cols();
                    let dst = buf(grads, x.0, g.len());
                    for (r, yr) in y.data().chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(gr, yr);
                        for j in 0..n {
                            dst[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if wants(x) {
                    let y = out.expect("log_softmax value");
                    let n = y.cols();
                    let dst = buf(grads, x.0, g.len());
                    for (r, yr) in y.data().chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            dst[r * n + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = out.expect("cosine value");
                let n = ta.cols();
                for r in 0..ta.rows() {
                    let (ra, rb) = (ta.row_slice(r), tb.row_slice(r));
                    let (na, nb) = (norm(ra), norm(rb));
                    let cr = c.data()[r];
                    let gr = g[r];
                    if wants(a) {
                        let dst = &mut buf(grads, a.0, ta.len())[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += gr * (rb[j] / (na * nb) - cr * ra[j] / (na * na));
                        }
                    }
                    if wants(b) {
                        let dst = &mut buf(grads, b.0, tb.len())[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += gr * (ra[j] / (na * nb) - cr * rb[j] / (nb * nb));
                        }
                    }
                }
            }
            Op::NormalizeRows(x) => {
                if wants(x) {
                    let (tx, y) = (self.value(*x), out.expect("normalize value"));
                    let n = tx.cols();
                    let dst = buf(grads, x.0, g.len());
                    for r in 0..tx.rows() {
                        let nr = norm(tx.row_slice(r));
                        let yr = y.row_slice(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dst[r * n + j] += (gr[j] - yr[j] * s) / nr;
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                if wants(x) {
                    let (tx, y) = (self.value(*x), out.expect("row_norm value"));
                    let n = tx.cols();
                    let dst = buf(grads, x.0, tx.len());
                    for r in 0..tx.rows() {
                        let nr = y.data()[r];
                        for j in 0..n {
                            dst[r * n + j] += g[r] * tx.data()[r * n + j] / nr;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(p) {
                        add_into(grads, p.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.expect("concat value").cols();
                let mut col = 0;
                for p in parts {
                    let (m, n) = self.value(*p).dims();
                    if wants(p) {
                        let dst = buf(grads, p.0, m * n);
                        for r in 0..m {
                            for c in 0..n {
                                dst[r * n + c] += g[r * total + col + c];
                            }
                        }
                    }
                    col += n;
                }
            }
            Op::SliceRows(x, start) => {
                if wants(x) {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let dst = buf(grads, x.0, tx.len());
                    for (d, v) in dst[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if wants(x) {
                    let tx = self.value(*x);
                    let (m, n) = tx.dims();
                    let w = g.len() / m;
                    let dst = buf(grads, x.0, tx.len());
                    for r in 0..m {
                        for c in 0..w {
                            dst[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                if wants(x) {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let dst = buf(grads, x.0, tx.len());
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            dst[src * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::RowMask(x, mask) => {
                if wants(x) {
                    let n = self.value(*x).cols();
                    let dst = buf(grads, x.0, g.len());
                    for (r, &w) in mask.iter().enumerate() {
                        for c in 0..n {
                            dst[r * n + c] += w * g[r * n + c];
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if wants(x) {
                    let y = out.expect("exp value");
                    let dst = buf(grads, x.0, g.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[j] * y.data()[j];
                    }
                }
            }
            Op::Log(x) => {
                if wants(x) {
                    let tx = self.value(*x);
                    let dst = buf(grads, x.0, g.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[j] / tx.data()[j];
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let tx = self.value(*x);
                    let dst = buf(grads, x.0, g.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        let v = tx.data()[j];
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dv = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += g[j] * dv;
                    }
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let len = self.value(*x).len();
                    buf(grads, x.0, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let len = self.value(*x).len();
                    let share = g[0] / len as f64;
                    buf(grads, x.0, len).iter_mut().for_each(|d| *d += share);
                }
            }
            Op::SumRows(x) => {
                if wants(x) {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let dst = buf(grads, x.0, tx.len());
                    for chunk in dst.chunks_mut(n) {
                        chunk.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let n = tg.cols();
                let m = inv_std.len();
                if wants(gain) {
                    let dst = buf(grads, gain.0, n);
                    for r in 0..m {
                        for c in 0..n {
                            dst[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if wants(bias) {
                    let dst = buf(grads, bias.0, n);
                    for r in 0..m {
                        for c in 0..n {
                            dst[c] += g[r * n + c];
                        }
                    }
                }
                if wants(x) {
                    let dst = buf(grads, x.0, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let xr = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * tg.data()[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xr);
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            dst[r * n + c] += k * (n as f64 * dxhat[c] - s1 - xr[c] * s2);
                        }
                    }
                }
            }
        }
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Adjoints from one backward pass.
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
    params: Gradients,
}

impl Backward {
    /// Adjoint of an arbitrary node; `None` if nothing reached it.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(graph.value(v).shape().to_vec(), g.clone()).ok()
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}
