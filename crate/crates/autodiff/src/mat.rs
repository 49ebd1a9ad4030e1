use std::fmt;
use std::ops::{Index, IndexMut};

use crate::Real;

/// Small row-major dense matrix over any [`Real`].
///
/// Only what the filter and its derivatives need: products, transposes,
/// elementwise sums and a Cholesky solve. Dimensions are checked with
/// assertions; shape mistakes are programming errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CholeskyError {
    /// Pivot index at which positivity failed.
    pub pivot: usize,
    /// Value of the failing pivot before the square root.
    pub value: f64,
}

impl fmt::Display for CholeskyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "matrix not positive definite at pivot {} (value {:e})", self.pivot, self.value)
    }
}

impl std::error::Error for CholeskyError {}

impl<S: Real> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_diag(d: &[S]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[S]) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn column(v: &[S]) -> Self {
        Self::from_row_slice(v.len(), 1, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.value()).collect(),
        }
    }

    pub fn map<T: Real>(&self, f: impl Fn(S) -> T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, o: &Self) -> Self {
        assert_eq!(self.cols, o.rows, "matmul shape mismatch");
        let ot = o.transpose();
        Self::from_fn(self.rows, o.cols, |r, c| S::dot(self.row(r), ot.row(c)))
    }

    /// `self * o^T` without materializing the transpose of `o`.
    pub fn matmul_t(&self, o: &Self) -> Self {
        assert_eq!(self.cols, o.cols, "matmul_t shape mismatch");
        Self::from_fn(self.rows, o.rows, |r, c| S::dot(self.row(r), o.row(c)))
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|r| S::dot(self.row(r), v)).collect()
    }

    pub fn add(&self, o: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| *a + *b).collect(),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| *a - *b).collect(),
        }
    }

    pub fn scale(&self, s: S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| *a * s).collect(),
        }
    }

    /// Add `d` to the diagonal.
    pub fn add_diag(&self, d: &[S]) -> Self {
        assert!(self.rows == self.cols && d.len() == self.rows);
        let mut m = self.clone();
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] += *v;
        }
        m
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrize(&self) -> Self {
        assert_eq!(self.rows, self.cols);
        Self::from_fn(self.rows, self.cols, |r, c| {
            if r == c {
                self[(r, c)]
            } else {
                (self[(r, c)] + self[(c, r)]) * 0.5
            }
        })
    }

    pub fn diag(&self) -> Vec<S> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> S {
        S::sum(&self.diag())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<Self, CholeskyError> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d.value() > 0.0) || !d.is_finite() {
                return Err(CholeskyError {
                    pivot: j,
                    value: d.value(),
                });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(l)
    }

    /// Solve `A X = B` for symmetric positive definite `A = self`.
    pub fn cholesky_solve(&self, b: &Self) -> Result<Self, CholeskyError> {
        assert_eq!(self.rows, b.rows);
        let l = self.cholesky()?;
        let n = self.rows;
        let mut x = b.clone();
        for c in 0..b.cols {
            // forward: L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
            // backward: L^T x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
        }
        Ok(x)
    }
}

impl<S> Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &S {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<S> IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut S {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}
