//! Define-by-run reverse-mode tape.
//!
//! Values are computed eagerly as ops are appended; `backward` walks the tape
//! in reverse. A graph built with [`Graph::no_grad`] keeps values but records
//! no parents, which is what inference uses.

use super::mlstm::{self, MlstmSaved, MlstmState};
use super::tensor::gemm;
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    LogSigmoid(Var),
    Log1mExp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    SoftCap(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    CausalSoftmax(Var),
    RmsNorm {
        x: Var,
        group: usize,
        inv_rms: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    CumSum(Var),
    CumMax(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Rope {
        x: Var,
        heads: usize,
        head_dim: usize,
        offset: usize,
        base: f64,
    },
    RowCosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    Mlstm {
        inputs: [Var; 5],
        saved: Box<MlstmSaved>,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape over borrowed or owned tensors.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = if shape.is_empty() {
        vec![1]
    } else {
        shape.to_vec()
    };
    *s.last_mut().unwrap() = last;
    s
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// `log(1 - exp(x))` for `x < 0`.
pub fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that only evaluates; `backward` yields no gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf owning its value.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Value::Owned(t), self.record)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Value::Borrowed(t), self.record)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Value::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Value::Borrowed(t), false)
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn leaf(&mut self, value: Value<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, t: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !t.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let shape = with_last(ta.shape(), n);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, 0.0);
        self.push(
            "matmul_nt",
            Tensor::matrix(m, n, out),
            Op::MatMulNT(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    // ---- trailing-axis broadcasts ----

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.numel() != c {
            return Err(shape_err(name, ta, tb));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    /// `a[i, j] + b[j]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a[i, j] * b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, |x, y| x * y, Op::MulRow(a, b))
    }

    fn col_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.numel() != ta.rows() {
            return Err(shape_err(name, ta, tb));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(c)
            .zip(bd)
            .flat_map(|(row, &y)| row.iter().map(|&x| f(x, y)).collect::<Vec<_>>())
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    /// `a[i, j] + b[i]`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast("add_col", a, b, |x, y| x + y, Op::AddCol(a, b))
    }

    /// `a[i, j] * b[i]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast("mul_col", a, b, |x, y| x * y, Op::MulCol(a, b))
    }

    /// `a[i, j] / b[i]`.
    pub fn div_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast("div_col", a, b, |x, y| x / y, Op::DivCol(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// `log(1 - exp(a))`; requires `a < 0`.
    pub fn log1mexp(&mut self, a: Var) -> Result<Var> {
        self.unary("log1mexp", a, log1mexp, Op::Log1mExp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `cap * tanh(a / cap)`.
    pub fn soft_cap(&mut self, a: Var, cap: f64) -> Result<Var> {
        self.unary(
            "soft_cap",
            a,
            |x| cap * (x / cap).tanh(),
            Op::SoftCap(a, cap),
        )
    }

    // ---- row-wise reductions ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("softmax_rows", t, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("log_softmax_rows", t, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise log-sum-exp, shape `[.., 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().chunks(ta.cols()).map(logsumexp).collect();
        let t = Tensor::new(with_last(ta.shape(), 1), data)?;
        self.push("logsumexp_rows", t, Op::LogSumExpRows(a), &[a])
    }

    /// Softmax where row `i` only sees columns `j <= i + (cols - rows)`.
    ///
    /// For square scores this is the usual causal mask; with a key cache the
    /// extra leading columns are the cached positions.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if c < r {
            return Err(NumericsError::Invalid(format!(
                "causal_softmax needs cols >= rows, got {r}x{c}"
            )));
        }
        let offset = c - r;
        let mut out = ta.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let visible = (i + offset + 1).min(c);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("causal_softmax", t, Op::CausalSoftmax(a), &[a])
    }

    /// RMS normalisation over contiguous groups of `group` columns (no gain).
    pub fn rmsnorm(&mut self, a: Var, group: usize, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if group == 0 || c % group != 0 {
            return Err(NumericsError::Invalid(format!(
                "rmsnorm group {group} does not divide {c} columns"
            )));
        }
        let mut out = ta.data().to_vec();
        let mut inv_rms = Vec::with_capacity(out.len() / group);
        for chunk in out.chunks_mut(group) {
            let ms = chunk.iter().map(|v| v * v).sum::<f64>() / group as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(
            "rmsnorm",
            t,
            Op::RmsNorm {
                x: a,
                group,
                inv_rms,
            },
            &[a],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.numel().max(1) as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Sum over the trailing axis, shape `[.., 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(ta.cols())
            .map(|r| r.iter().sum())
            .collect();
        let t = Tensor::new(with_last(ta.shape(), 1), data)?;
        self.push("sum_rows", t, Op::SumRows(a), &[a])
    }

    /// Max over the trailing axis, shape `[.., 1]`; gradient goes to the first argmax.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(ta.rows());
        let mut arg = Vec::with_capacity(ta.rows());
        for row in ta.data().chunks(ta.cols()) {
            let (j, &m) =
                row.iter().enumerate().fold(
                    (0, &row[0]),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            data.push(m);
            arg.push(j);
        }
        let t = Tensor::new(with_last(ta.shape(), 1), data)?;
        self.push("max_rows", t, Op::MaxRows(a, arg), &[a])
    }

    /// Cumulative sum down the leading (row) axis.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for i in 1..ta.rows() {
            for j in 0..c {
                out[i * c + j] += out[(i - 1) * c + j];
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("cumsum", t, Op::CumSum(a), &[a])
    }

    /// Cumulative max down the leading (row) axis.
    pub fn cummax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        let mut arg: Vec<usize> = (0..ta.numel()).map(|idx| idx / c).collect();
        for i in 1..ta.rows() {
            for j in 0..c {
                let prev = out[(i - 1) * c + j];
                if prev >= out[i * c + j] {
                    out[i * c + j] = prev;
                    arg[i * c + j] = arg[(i - 1) * c + j];
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("cummax", t, Op::CumMax(a, arg), &[a])
    }

    // ---- indexing ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if start + len > c {
            return Err(NumericsError::Invalid(format!(
                "slice_cols {start}..{} out of {c}",
                start + len
            )));
        }
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(with_last(ta.shape(), len), data)?;
        self.push("slice_cols", t, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if start + len > ta.rows() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: ta.rows(),
            });
        }
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        self.push(
            "slice_rows",
            Tensor::matrix(len, c, data),
            Op::SliceRows { x: a, start },
            &[a],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            "concat_cols",
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            "concat_rows",
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// `out[i] = table[ids[i]]`; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, c) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumericsError::IndexOutOfRange { index: id, len: r });
            }
            data.extend_from_slice(tt.row(id));
        }
        self.push(
            "gather_rows",
            Tensor::matrix(ids.len(), c, data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    // ---- fused model ops ----

    /// Rotary position embedding over `heads` blocks of `head_dim` columns;
    /// row `i` sits at position `offset + i`. Pairs are (j, j + head_dim/2).
    pub fn rope(
        &mut self,
        a: Var,
        heads: usize,
        head_dim: usize,
        offset: usize,
        base: f64,
    ) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() != heads * head_dim || head_dim % 2 != 0 {
            return Err(NumericsError::Invalid(format!(
                "rope expects {heads}x{head_dim} (even) columns, got {}",
                ta.cols()
            )));
        }
        let mut out = ta.data().to_vec();
        rope_apply(&mut out, ta.cols(), heads, head_dim, offset, base, false);
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(
            "rope",
            t,
            Op::Rope {
                x: a,
                heads,
                head_dim,
                offset,
                base,
            },
            &[a],
        )
    }

    /// Row-wise cosine similarity `a.b / max(|a||b|, eps)`, shape `[rows, 1]`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_cosine", ta, tb));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb).max(eps)
            })
            .collect();
        let t = Tensor::new(vec![ta.rows(), 1], data)?;
        self.push("row_cosine", t, Op::RowCosine { a, b, eps }, &[a, b])
    }

    /// Multi-head mLSTM recurrence (exponential input gate, sigmoid forget gate,
    /// matrix memory with normaliser and max-stabiliser).
    ///
    /// `q`, `k`: `[T, heads*qk_dim]`; `v`: `[T, heads*v_dim]`; `ig`, `fg`:
    /// `[T, heads]` gate pre-activations. Returns the hidden states
    /// `[T, heads*v_dim]` and the final recurrent state.
    #[allow(clippy::too_many_arguments)]
    pub fn mlstm(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        ig: Var,
        fg: Var,
        heads: usize,
        init: Option<&MlstmState>,
    ) -> Result<(Var, MlstmState)> {
        let (tq, tk, tv, ti, tf) = (
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(ig),
            self.value(fg),
        );
        let t_len = tq.rows();
        if heads == 0 || tq.cols() % heads != 0 || tv.cols() % heads != 0 {
            return Err(NumericsError::Invalid("mlstm head split".into()));
        }
        let dk = tq.cols() / heads;
        let dv = tv.cols() / heads;
        if tk.shape() != tq.shape()
            || tv.rows() != t_len
            || ti.rows() != t_len
            || tf.rows() != t_len
            || ti.cols() != heads
            || tf.cols() != heads
        {
            return Err(shape_err("mlstm", tq, tv));
        }
        let init = match init {
            Some(s) => {
                if s.heads != heads || s.qk_dim != dk || s.v_dim != dv {
                    return Err(NumericsError::Invalid("mlstm state dims".into()));
                }
                s.clone()
            }
            None => MlstmState::empty(heads, dk, dv),
        };
        let keep = self.record
            && [q, k, v, ig, fg]
                .iter()
                .any(|p| self.nodes[p.0].requires_grad);
        let (h, final_state, saved) = mlstm::forward(
            tq.data(),
            tk.data(),
            tv.data(),
            ti.data(),
            tf.data(),
            t_len,
            init,
            keep,
        );
        let out = Tensor::matrix(t_len, heads * dv, h);
        let var = self.push(
            "mlstm",
            out,
            Op::Mlstm {
                inputs: [q, k, v, ig, fg],
                saved: Box::new(saved),
            },
            &[q, k, v, ig, fg],
        )?;
        Ok((var, final_state))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are dropped once propagated; only leaves keep theirs.
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.value(v).shape();
                *slot = Some(if g.shape() == shape {
                    g
                } else {
                    g.reshaped(shape).expect("gradient numel matches")
                });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node<'_>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let y = node.value.get();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut da, 0.0);
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), false, &mut da, 0.0);
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, ta.data(), false, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Reshape(a) => self.acc(grads, *a, g.clone()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(g, tb, |d, y| d * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, zip_map(g, ta, |d, x| d * x));
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(g, tb, |d, q| d / q));
                }
                if self.wants(*b) {
                    let data = gd
                        .iter()
                        .zip(y.data())
                        .zip(tb.data())
                        .map(|((d, out), q)| -d * out / q)
                        .collect();
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), data)?);
                }
            }
            Op::Maximum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| x >= y)
                    .collect();
                if self.wants(*a) {
                    let data = gd
                        .iter()
                        .zip(&pick_a)
                        .map(|(d, &p)| if p { *d } else { 0.0 })
                        .collect();
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
                }
                if self.wants(*b) {
                    let data = gd
                        .iter()
                        .zip(&pick_a)
                        .map(|(d, &p)| if p { 0.0 } else { *d })
                        .collect();
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), data)?);
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let mut db = vec![0.0; tb.numel()];
                    for row in gd.chunks(db.len()) {
                        db.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = tb.numel();
                if self.wants(*a) {
                    let data = gd
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(tb.data()).map(|(d, w)| d * w))
                        .collect();
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; c];
                    for (row, xr) in gd.chunks(c).zip(ta.data().chunks(c)) {
                        for j in 0..c {
                            db[j] += row[j] * xr[j];
                        }
                    }
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::AddCol(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let c = g.cols();
                    let db = gd.chunks(c).map(|r| r.iter().sum()).collect();
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                if self.wants(*a) {
                    let data = gd
                        .chunks(c)
                        .zip(tb.data())
                        .flat_map(|(row, &w)| row.iter().map(move |d| d * w))
                        .collect();
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
                }
                if self.wants(*b) {
                    let db = gd
                        .chunks(c)
                        .zip(ta.data().chunks(c))
                        .map(|(dr, xr)| dr.iter().zip(xr).map(|(d, x)| d * x).sum())
                        .collect();
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::DivCol(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                if self.wants(*a) {
                    let data = gd
                        .chunks(c)
                        .zip(tb.data())
                        .flat_map(|(row, &w)| row.iter().map(move |d| d / w))
                        .collect();
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
                }
                if self.wants(*b) {
                    let db = gd
                        .chunks(c)
                        .zip(y.data().chunks(c))
                        .zip(tb.data())
                        .map(|((dr, yr), &w)| {
                            -dr.iter().zip(yr).map(|(d, o)| d * o).sum::<f64>() / w
                        })
                        .collect();
                    self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|d| d * c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, zip_map(g, y, |d, o| d * o)),
            Op::Log(a) => self.acc(grads, *a, zip_map(g, self.value(*a), |d, x| d / x)),
            Op::Sigmoid(a) => self.acc(grads, *a, zip_map(g, y, |d, o| d * o * (1.0 - o))),
            Op::Tanh(a) => self.acc(grads, *a, zip_map(g, y, |d, o| d * (1.0 - o * o))),
            Op::Silu(a) => self.acc(
                grads,
                *a,
                zip_map(g, self.value(*a), |d, x| {
                    let s = sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                }),
            ),
            Op::LogSigmoid(a) => self.acc(
                grads,
                *a,
                zip_map(g, self.value(*a), |d, x| d * sigmoid(-x)),
            ),
            Op::Log1mExp(a) => self.acc(
                grads,
                *a,
                zip_map(g, self.value(*a), |d, x| -d / (-x).exp_m1()),
            ),
            Op::Abs(a) => self.acc(
                grads,
                *a,
                zip_map(g, self.value(*a), |d, x| if x >= 0.0 { d } else { -d }),
            ),
            Op::Clamp(a, lo, hi) => self.acc(
                grads,
                *a,
                zip_map(g, self.value(*a), |d, x| {
                    if x >= *lo && x <= *hi {
                        d
                    } else {
                        0.0
                    }
                }),
            ),
            Op::SoftCap(a, cap) => self.acc(
                grads,
                *a,
                zip_map(g, y, |d, o| {
                    let t = o / cap;
                    d * (1.0 - t * t)
                }),
            ),
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((dxr, yr), dr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((dxr, yr), dr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let s: f64 = dr.iter().sum();
                    for j in 0..c {
                        dxr[j] = dr[j] - yr[j].exp() * s;
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSumExpRows(a) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut dx = vec![0.0; ta.numel()];
                for (((dxr, xr), &l), &d) in dx
                    .chunks_mut(c)
                    .zip(ta.data().chunks(c))
                    .zip(y.data())
                    .zip(gd)
                {
                    for j in 0..c {
                        dxr[j] = d * (xr[j] - l).exp();
                    }
                }
                self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), dx)?);
            }
            Op::RmsNorm { x, group, inv_rms } => {
                let group = *group;
                let mut dx = vec![0.0; y.numel()];
                for (((dxc, yc), dc), &inv) in dx
                    .chunks_mut(group)
                    .zip(y.data().chunks(group))
                    .zip(gd.chunks(group))
                    .zip(inv_rms)
                {
                    let m = yc.iter().zip(dc).map(|(a, b)| a * b).sum::<f64>() / group as f64;
                    for j in 0..group {
                        dxc[j] = inv * (dc[j] - yc[j] * m);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SumAll(a) => {
                let d = gd[0];
                self.acc(grads, *a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let d = gd[0] / ta.numel().max(1) as f64;
                self.acc(grads, *a, Tensor::full(ta.shape(), d));
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let data = gd
                    .iter()
                    .flat_map(|&d| std::iter::repeat(d).take(c))
                    .collect();
                self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
            }
            Op::MaxRows(a, arg) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut dx = vec![0.0; ta.numel()];
                for (i, (&j, &d)) in arg.iter().zip(gd).enumerate() {
                    dx[i * c + j] = d;
                }
                self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), dx)?);
            }
            Op::CumSum(a) => {
                let c = y.cols();
                let mut dx = gd.to_vec();
                for i in (0..y.rows().saturating_sub(1)).rev() {
                    for j in 0..c {
                        dx[i * c + j] += dx[(i + 1) * c + j];
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::CumMax(a, arg) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for (idx, &r) in arg.iter().enumerate() {
                    dx[r * c + idx % c] += gd[idx];
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), y.cols());
                let mut dx = vec![0.0; tx.numel()];
                for (dxr, dr) in dx.chunks_mut(c).zip(gd.chunks(len)) {
                    dxr[*start..*start + len].copy_from_slice(dr);
                }
                self.acc(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    if self.wants(p) {
                        let data = gd
                            .chunks(total)
                            .flat_map(|r| r[off..off + w].iter().copied())
                            .collect();
                        self.acc(grads, p, Tensor::new(tp.shape().to_vec(), data)?);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.numel();
                    if self.wants(p) {
                        self.acc(
                            grads,
                            p,
                            Tensor::new(tp.shape().to_vec(), gd[off..off + n].to_vec())?,
                        );
                    }
                    off += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (dr, &id) in gd.chunks(c).zip(ids) {
                    dt[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(dr)
                        .for_each(|(s, d)| *s += d);
                }
                self.acc(grads, *table, Tensor::new(tt.shape().to_vec(), dt)?);
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                offset,
                base,
            } => {
                let mut dx = gd.to_vec();
                rope_apply(&mut dx, y.cols(), *heads, *head_dim, *offset, *base, true);
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::RowCosine { a, b, eps } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for i in 0..ta.rows() {
                    let (x, z) = (ta.row(i), tb.row(i));
                    let na2: f64 = x.iter().map(|v| v * v).sum();
                    let nb2: f64 = z.iter().map(|v| v * v).sum();
                    let den = (na2.sqrt() * nb2.sqrt()).max(*eps);
                    let cos = y.data()[i];
                    let d = gd[i];
                    let active = na2.sqrt() * nb2.sqrt() > *eps;
                    for j in 0..c {
                        let (mut ga, mut gb) = (z[j] / den, x[j] / den);
                        if active {
                            ga -= cos * x[j] / na2;
                            gb -= cos * z[j] / nb2;
                        }
                        da[i * c + j] = d * ga;
                        db[i * c + j] = d * gb;
                    }
                }
                self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Mlstm { inputs, saved } => {
                let [q, k, v, ig, fg] = *inputs;
                let (tq, tk, tv, tf) =
                    (self.value(q), self.value(k), self.value(v), self.value(fg));
                let gr = mlstm::backward(
                    saved,
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    tf.data(),
                    y.data(),
                    gd,
                );
                self.acc(grads, q, Tensor::new(tq.shape().to_vec(), gr.dq)?);
                self.acc(grads, k, Tensor::new(tk.shape().to_vec(), gr.dk)?);
                self.acc(grads, v, Tensor::new(tv.shape().to_vec(), gr.dv)?);
                self.acc(
                    grads,
                    ig,
                    Tensor::new(self.value(ig).shape().to_vec(), gr.dig)?,
                );
                self.acc(grads, fg, Tensor::new(tf.shape().to_vec(), gr.dfg)?);
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(other.shape().to_vec(), data).expect("same numel")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn rope_apply(
    data: &mut [f64],
    cols: usize,
    heads: usize,
    head_dim: usize,
    offset: usize,
    base: f64,
    inverse: bool,
) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    for (i, row) in data.chunks_mut(cols).enumerate() {
        let pos = (offset + i) as f64;
        for h in 0..heads {
            let blk = &mut row[h * head_dim..(h + 1) * head_dim];
            for j in 0..half {
                let (s, c) = (pos * freqs[j]).sin_cos();
                let s = if inverse { -s } else { s };
                let (x1, x2) = (blk[j], blk[j + half]);
                blk[j] = x1 * c - x2 * s;
                blk[j + half] = x1 * s + x2 * c;
            }
        }
    }
}
