//! Brute-force joint-Gaussian posterior of `(β, u)` by dense algebra.

use geoconfound_core::inference::LinearLGM;
use nalgebra::{DMatrix, DVector};

/// Returns (mean, covariance, log marginal) of `(β, u)`; `u` is empty
/// without a field.
pub fn dense_oracle(m: &LinearLGM) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = m.y.len();
    let p = m.f.ncols();
    let (a, q) = match &m.field {
        Some(lf) => {
            let mut a = lf.a.to_dense();
            if lf.restricted {
                let proj = &m.f * (m.f.transpose() * &m.f).try_inverse().unwrap() * m.f.transpose();
                a = (DMatrix::identity(n, n) - proj) * a;
            }
            (a, lf.q.to_dense())
        }
        None => (DMatrix::zeros(n, 0), DMatrix::zeros(0, 0)),
    };
    let mm = a.ncols();
    let mut b = DMatrix::zeros(n, p + mm);
    b.view_mut((0, 0), (n, p)).copy_from(&m.f);
    b.view_mut((0, p), (n, mm)).copy_from(&a);
    let mut qw = DMatrix::zeros(p + mm, p + mm);
    for i in 0..p {
        qw[(i, i)] = 1.0 / (m.beta_sd * m.beta_sd);
    }
    qw.view_mut((p, p), (mm, mm)).copy_from(&q);
    let s2 = m.sigma_eps * m.sigma_eps;
    let y = DVector::from_column_slice(&m.y);
    let k = b.transpose() * &b / s2 + &qw;
    let cov = k.clone().try_inverse().unwrap();
    let mean = &cov * b.transpose() * &y / s2;
    let marg = DMatrix::identity(n, n) * s2 + &b * qw.try_inverse().unwrap() * b.transpose();
    let chol = marg.clone().cholesky().unwrap();
    let quad = y.dot(&chol.solve(&y));
    let logdet: f64 = (0..n).map(|i| 2.0 * chol.l()[(i, i)].ln()).sum();
    let lml = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    (mean, cov, lml)
}
