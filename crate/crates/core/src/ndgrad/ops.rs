use super::matrix::{Matrix, Shape};
use super::tape::DiffArray;
use super::GradError;
use crate::special::{digamma, ln_gamma};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    MatMul,
    Transpose,
    Exp,
    Log,
    Sqrt,
    Square,
    Sin,
    Cos,
    Softplus,
    Sigmoid,
    LeakyRelu(f64),
    Softmax,
    LogSoftmax,
    RowNorm,
    RecipOrZero,
    Lgamma,
    Digamma,
    Sum,
    SumRows,
    SumCols,
    BroadcastTo,
    SliceCols(usize),
    PadCols(usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::RowNorm => "row_norm",
            Op::RecipOrZero => "recip_or_zero",
            Op::Lgamma => "lgamma",
            Op::Digamma => "digamma",
            Op::Sum => "sum",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastTo => "broadcast_to",
            Op::SliceCols(_) => "slice_cols",
            Op::PadCols(_) => "pad_cols",
        }
    }

    /// Whether the local gradient rule is itself built from differentiable ops.
    pub(crate) fn twice_differentiable(&self) -> bool {
        !matches!(self, Op::Lgamma | Op::Digamma)
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, _) => Some(b),
        (_, 1) => Some(a),
        _ => None,
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec_unchecked(a.shape(), data)
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax(m: &Matrix, log: bool) -> Matrix {
    let [r, c] = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = m.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        if log {
            let lse = max + sum.ln();
            out.extend(row.iter().map(|&v| v - lse));
        } else {
            out.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
    }
    Matrix::from_vec_unchecked([r, c], out)
}

impl DiffArray {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<DiffArray, GradError> {
        DiffArray::record(op, &[self], self.value().map(f))
    }

    /// Broadcasts both operands to a common shape (extents equal or 1).
    fn broadcast_pair(&self, rhs: &DiffArray, op: &'static str) -> Result<(DiffArray, DiffArray), GradError> {
        let (a, b) = (self.shape(), rhs.shape());
        if a == b {
            return Ok((self.clone(), rhs.clone()));
        }
        let err = || GradError::ShapeMismatch { op, lhs: a, rhs: b };
        let target = [
            broadcast_dim(a[0], b[0]).ok_or_else(err)?,
            broadcast_dim(a[1], b[1]).ok_or_else(err)?,
        ];
        Ok((self.broadcast_to(target)?, rhs.broadcast_to(target)?))
    }

    fn binary(&self, rhs: &DiffArray, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<DiffArray, GradError> {
        let (a, b) = self.broadcast_pair(rhs, op.name())?;
        let value = zip_map(a.value(), b.value(), f);
        DiffArray::record(op, &[&a, &b], value)
    }

    pub fn add(&self, rhs: &DiffArray) -> Result<DiffArray, GradError> {
        self.binary(rhs, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, rhs: &DiffArray) -> Result<DiffArray, GradError> {
        self.binary(rhs, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, rhs: &DiffArray) -> Result<DiffArray, GradError> {
        self.binary(rhs, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, rhs: &DiffArray) -> Result<DiffArray, GradError> {
        if rhs.data().iter().any(|&v| v == 0.0) {
            return Err(GradError::DivisionByZero);
        }
        self.binary(rhs, Op::Div, |x, y| x / y)
    }

    pub fn neg(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Result<DiffArray, GradError> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<DiffArray, GradError> {
        self.unary(Op::MulScalar(c), |x| x * c)
    }

    pub fn matmul(&self, rhs: &DiffArray) -> Result<DiffArray, GradError> {
        let value = self.value().matmul(rhs.value())?;
        DiffArray::record(Op::MatMul, &[self, rhs], value)
    }

    pub fn transpose(&self) -> Result<DiffArray, GradError> {
        DiffArray::record(Op::Transpose, &[self], self.value().transpose())
    }

    pub fn exp(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural log; negative entries are rejected, zero maps to `-inf`.
    pub fn log(&self) -> Result<DiffArray, GradError> {
        if self.data().iter().any(|&v| v < 0.0) {
            return Err(GradError::NegativeInput { op: "log" });
        }
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Result<DiffArray, GradError> {
        if self.data().iter().any(|&v| v < 0.0) {
            return Err(GradError::NegativeInput { op: "sqrt" });
        }
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sin(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Cos, f64::cos)
    }

    /// `ln(1 + e^x)`, evaluated as `max(x,0) + ln1p(e^{-|x|})`.
    pub fn softplus(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Softplus, softplus_f)
    }

    pub fn sigmoid(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::Sigmoid, sigmoid_f)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<DiffArray, GradError> {
        self.unary(Op::LeakyRelu(slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Row-wise softmax.
    pub fn softmax(&self) -> Result<DiffArray, GradError> {
        DiffArray::record(Op::Softmax, &[self], row_softmax(self.value(), false))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self) -> Result<DiffArray, GradError> {
        DiffArray::record(Op::LogSoftmax, &[self], row_softmax(self.value(), true))
    }

    /// Euclidean norm of each row, as an `n×1` column. The gradient at a zero
    /// row is defined as zero.
    pub fn row_norm(&self) -> Result<DiffArray, GradError> {
        let [r, _] = self.shape();
        let norms = (0..r)
            .map(|i| self.value().row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        DiffArray::record(Op::RowNorm, &[self], Matrix::column(norms))
    }

    /// `1/x`, with zero entries mapped to zero.
    pub fn recip_or_zero(&self) -> Result<DiffArray, GradError> {
        self.unary(Op::RecipOrZero, |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    /// Log-gamma of positive entries. Differentiable once (the derivative is
    /// digamma, which has no gradient rule of its own).
    pub fn lgamma(&self) -> Result<DiffArray, GradError> {
        if self.data().iter().any(|&v| v <= 0.0) {
            return Err(GradError::NegativeInput { op: "lgamma" });
        }
        self.unary(Op::Lgamma, ln_gamma)
    }

    pub fn digamma(&self) -> Result<DiffArray, GradError> {
        if self.data().iter().any(|&v| v <= 0.0) {
            return Err(GradError::NegativeInput { op: "digamma" });
        }
        self.unary(Op::Digamma, digamma)
    }

    /// Sum of all entries as a `1×1` array.
    pub fn sum(&self) -> Result<DiffArray, GradError> {
        let s = self.data().iter().sum();
        DiffArray::record(Op::Sum, &[self], Matrix::scalar(s))
    }

    pub fn mean(&self) -> Result<DiffArray, GradError> {
        let n = self.value().len();
        if n == 0 {
            return Err(GradError::DivisionByZero);
        }
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&self) -> Result<DiffArray, GradError> {
        let [r, c] = self.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value().row_slice(i)) {
                *o += v;
            }
        }
        DiffArray::record(Op::SumRows, &[self], Matrix::row(out))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&self) -> Result<DiffArray, GradError> {
        let [r, _] = self.shape();
        let out = (0..r).map(|i| self.value().row_slice(i).iter().sum()).collect();
        DiffArray::record(Op::SumCols, &[self], Matrix::column(out))
    }

    /// Repeats unit extents up to `shape`.
    pub fn broadcast_to(&self, shape: Shape) -> Result<DiffArray, GradError> {
        let src = self.shape();
        if src == shape {
            return Ok(self.clone());
        }
        let ok = (0..2).all(|d| src[d] == shape[d] || src[d] == 1);
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src,
                rhs: shape,
            });
        }
        let v = self.value();
        let out = Matrix::from_fn(shape, |r, c| {
            v.get(if src[0] == 1 { 0 } else { r }, if src[1] == 1 { 0 } else { c })
        });
        DiffArray::record(Op::BroadcastTo, &[self], out)
    }

    /// Sums over axes so the result has `shape`; the adjoint of `broadcast_to`.
    pub fn sum_to(&self, shape: Shape) -> Result<DiffArray, GradError> {
        let mut out = self.clone();
        if shape[0] == 1 && out.shape()[0] != 1 {
            out = out.sum_rows()?;
        }
        if shape[1] == 1 && out.shape()[1] != 1 {
            out = out.sum_cols()?;
        }
        if out.shape() != shape {
            return Err(GradError::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        Ok(out)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<DiffArray, GradError> {
        let [r, c] = self.shape();
        if start > end || end > c {
            return Err(GradError::ShapeMismatch {
                op: "slice_cols",
                lhs: [r, c],
                rhs: [start, end],
            });
        }
        let v = self.value();
        let out = Matrix::from_fn([r, end - start], |i, j| v.get(i, start + j));
        DiffArray::record(Op::SliceCols(start), &[self], out)
    }

    /// Embeds this array into `total` zero columns starting at `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<DiffArray, GradError> {
        let [r, c] = self.shape();
        if start + c > total {
            return Err(GradError::ShapeMismatch {
                op: "pad_cols",
                lhs: [r, c],
                rhs: [start, total],
            });
        }
        let v = self.value();
        let out = Matrix::from_fn([r, total], |i, j| {
            if j >= start && j < start + c {
                v.get(i, j - start)
            } else {
                0.0
            }
        });
        DiffArray::record(Op::PadCols(start), &[self], out)
    }
}

/// Local gradient rules. Each rule is expressed with `DiffArray` operations so
/// that, when the inputs are tape handles, the rule itself is recorded and can
/// be differentiated again.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[DiffArray],
    out: &DiffArray,
    g: &DiffArray,
    needs: &[bool],
) -> Result<Vec<Option<DiffArray>>, GradError> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |f: &dyn Fn() -> Result<DiffArray, GradError>| -> Result<Vec<Option<DiffArray>>, GradError> {
        Ok(vec![if want(0) { Some(f()?) } else { None }])
    };
    let x = || &inputs[0];
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![
            want(0).then(|| g.clone()),
            if want(1) { Some(g.neg()?) } else { None },
        ]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&inputs[1])?) } else { None },
            if want(1) { Some(g.mul(&inputs[0])?) } else { None },
        ]),
        Op::Div => {
            let ga = g.div(&inputs[1])?;
            let gb = if want(1) { Some(ga.mul(out)?.neg()?) } else { None };
            Ok(vec![want(0).then_some(ga), gb])
        }
        Op::Neg => one(&|| g.neg()),
        Op::AddScalar => one(&|| Ok(g.clone())),
        Op::MulScalar(c) => one(&|| g.mul_scalar(*c)),
        Op::MatMul => Ok(vec![
            if want(0) { Some(g.matmul(&inputs[1].transpose()?)?) } else { None },
            if want(1) { Some(inputs[0].transpose()?.matmul(g)?) } else { None },
        ]),
        Op::Transpose => one(&|| g.transpose()),
        Op::Exp => one(&|| g.mul(out)),
        Op::Log => one(&|| g.div(x())),
        Op::Sqrt => one(&|| g.mul(&out.recip_or_zero()?)?.mul_scalar(0.5)),
        Op::Square => one(&|| g.mul(x())?.mul_scalar(2.0)),
        Op::Sin => one(&|| g.mul(&x().cos()?)),
        Op::Cos => one(&|| g.mul(&x().sin()?)?.neg()),
        Op::Softplus => one(&|| g.mul(&x().sigmoid()?)),
        Op::Sigmoid => one(&|| g.mul(&out.sub(&out.square()?)?)),
        Op::LeakyRelu(slope) => one(&|| {
            let mask = x().value().map(|v| if v > 0.0 { 1.0 } else { *slope });
            g.mul(&DiffArray::constant(mask))
        }),
        Op::Softmax => one(&|| {
            let dot = g.mul(out)?.sum_cols()?;
            out.mul(&g.sub(&dot)?)
        }),
        Op::LogSoftmax => one(&|| {
            let total = g.sum_cols()?;
            g.sub(&out.exp()?.mul(&total)?)
        }),
        Op::RowNorm => one(&|| x().mul(&g.mul(&out.recip_or_zero()?)?)),
        Op::RecipOrZero => one(&|| g.mul(&out.square()?)?.neg()),
        Op::Lgamma => one(&|| g.mul(&x().digamma()?)),
        Op::Digamma => Err(GradError::NoDerivative("digamma")),
        Op::Sum | Op::SumRows | Op::SumCols => one(&|| g.broadcast_to(x().shape())),
        Op::BroadcastTo => one(&|| g.sum_to(x().shape())),
        Op::SliceCols(start) => one(&|| g.pad_cols(*start, x().shape()[1])),
        Op::PadCols(start) => one(&|| g.slice_cols(*start, *start + x().shape()[1])),
    }
}
