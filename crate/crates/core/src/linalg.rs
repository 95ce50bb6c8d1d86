//! Dense matrix aliases and the few factorizations the pipeline needs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Row-major matrix of 64-bit integers with wrapping addition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "integer matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(IntMatrix { rows, cols, data })
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

    pub fn as_slice(&self) -> &[i64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: i64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn wrapping_add(&self, other: &IntMatrix) -> Result<IntMatrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.wrapping_add(*b))
            .collect();
        Ok(IntMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn wrapping_sub(&self, other: &IntMatrix) -> Result<IntMatrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.wrapping_sub(*b))
            .collect();
        Ok(IntMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn wrapping_neg(&self) -> IntMatrix {
        IntMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.wrapping_neg()).collect(),
        }
    }

    /// Wrapping sum of equally shaped matrices.
    pub fn wrapping_sum<'a, I>(rows: usize, cols: usize, items: I) -> Result<IntMatrix>
    where
        I: IntoIterator<Item = &'a IntMatrix>,
    {
        let mut acc = IntMatrix::zeros(rows, cols);
        for m in items {
            acc = acc.wrapping_add(m)?;
        }
        Ok(acc)
    }

    fn check_same_shape(&self, other: &IntMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "integer matrices {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

fn cholesky(a: &Mat, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("{what} is not square")));
    }
    Cholesky::new(a.clone())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &Mat, what: &str) -> Result<Mat> {
    let inv = cholesky(a, what)?.inverse();
    Ok(symmetrize(&inv))
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &Mat, b: &Mat, what: &str) -> Result<Mat> {
    Ok(cholesky(a, what)?.solve(b))
}

pub fn spd_solve_vec(a: &Mat, b: &Vector, what: &str) -> Result<Vector> {
    Ok(cholesky(a, what)?.solve(b))
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// `a + shift * I` for square `a`.
pub fn add_diagonal(a: &Mat, shift: f64) -> Mat {
    let mut out = a.clone();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] += shift;
    }
    out
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute difference when `b` is zero.
pub fn relative_frobenius(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_frobenius shape mismatch");
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Stacks matrices with equal row counts side by side.
pub fn hstack(parts: &[Mat]) -> Mat {
    let rows = parts.first().map(|m| m.nrows()).unwrap_or(0);
    let cols = parts.iter().map(|m| m.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        assert_eq!(p.nrows(), rows, "hstack row mismatch");
        out.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    out
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(parts: &[Mat]) -> Mat {
    let cols = parts.first().map(|m| m.ncols()).unwrap_or(0);
    let rows = parts.iter().map(|m| m.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        assert_eq!(p.ncols(), cols, "vstack column mismatch");
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}
