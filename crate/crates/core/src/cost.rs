use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Running cost `L(x, u) = xᵀWx + uᵀRu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(w: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_dim("W columns", w.nrows(), w.ncols())?;
        check_dim("R columns", r.nrows(), r.ncols())?;
        for (name, mat) in [("W", &w), ("R", &r)] {
            if (mat - mat.transpose()).norm() > 1e-12 * mat.norm().max(1.0) {
                return Err(Error::InvalidArgument(format!("{name} must be symmetric")));
            }
            let min_eig = mat.clone().symmetric_eigen().eigenvalues.min();
            if !(min_eig > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive definite")));
            }
        }
        Ok(Self { w, r })
    }

    pub fn diagonal(w: &[f64], r: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(w)),
            DMatrix::from_diagonal(&DVector::from_column_slice(r)),
        )
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    #[inline]
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        quad(&self.w, x) + quad(&self.r, u)
    }

    /// ∇ₓL = 2Wx, written into `out`.
    #[inline]
    pub fn grad_x(&self, x: &[f64], out: &mut [f64]) {
        sym_matvec2(&self.w, x, out);
    }

    /// ∇ᵤL = 2Ru, written into `out`.
    #[inline]
    pub fn grad_u(&self, u: &[f64], out: &mut [f64]) {
        sym_matvec2(&self.r, u, out);
    }
}

#[inline]
pub(crate) fn quad(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// `out = 2·M·v` for symmetric `M`.
#[inline]
pub(crate) fn sym_matvec2(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += m[(i, j)] * v[j];
        }
        out[i] = 2.0 * acc;
    }
}
