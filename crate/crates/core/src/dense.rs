//! Thin helpers over nalgebra's dense factorizations.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors as
/// the matching columns.
pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Dense SPD factorization `M = L Lᵀ`; empty matrices are allowed.
#[derive(Clone, Debug)]
pub(crate) struct DenseChol {
    l: DMatrix<f64>,
}

impl DenseChol {
    pub(crate) fn new(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Ok(DenseChol { l: m });
        }
        match m.cholesky() {
            Some(c) => Ok(DenseChol { l: c.unpack() }),
            None => Err(Error::NotPositiveDefinite { column: 0 }),
        }
    }

    pub(crate) fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub(crate) fn logdet(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * libm::log(self.l[(i, i)])).sum()
    }

    /// `L⁻¹ b`.
    pub(crate) fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return b.clone();
        }
        self.l.solve_lower_triangular(b).expect("nonzero diagonal")
    }

    /// `L⁻ᵀ b`.
    pub(crate) fn backward(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return b.clone();
        }
        self.l.tr_solve_lower_triangular(b).expect("nonzero diagonal")
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.backward(&self.forward(b))
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.solve(&e));
        }
        out
    }
}
