use std::fmt;
use std::sync::Arc;

use super::GradError;

/// Row-major shape `[rows, cols]`. Vectors are `1×n` rows or `n×1` columns.
pub type Shape = [usize; 2];

/// Immutable dense row-major matrix of `f64`.
///
/// Cloning is cheap (the buffer is reference counted) and values are safe to
/// share across threads.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    shape: Shape,
    data: Arc<[f64]>,
}

impl Matrix {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, GradError> {
        if data.len() != shape[0] * shape[1] {
            return Err(GradError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape[0] * shape[1]);
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self::from_vec_unchecked(shape, vec![value; shape[0] * shape[1]])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1], value)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_vec_unchecked([n, n], data)
    }

    /// A `1×n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self::from_vec_unchecked([1, values.len()], values)
    }

    /// An `n×1` column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Self::from_vec_unchecked([values.len(), 1], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GradError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GradError::DataLength {
                    shape: [rows.len(), cols],
                    len: r.len() * rows.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new([rows.len(), cols], data)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                data.push(f(r, c));
            }
        }
        Self::from_vec_unchecked(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
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

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The only element of a `1×1` matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {:?} matrix", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose(&self) -> Self {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec_unchecked([c, r], out)
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.shape[1];
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row_slice(i));
        }
        Self::from_vec_unchecked([idx.len(), c], out)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Self, GradError> {
        let [m, k] = self.shape;
        let [k2, n] = rhs.shape;
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape,
                rhs: rhs.shape,
            });
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: pointers and strides describe the row-major buffers above,
            // which stay alive and unaliased for the duration of the call.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    rhs.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Self::from_vec_unchecked([m, n], out))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}", self.shape)?;
        let rows: Vec<&[f64]> = (0..self.shape[0]).map(|r| self.row_slice(r)).collect();
        f.debug_list().entries(rows).finish()
    }
}
