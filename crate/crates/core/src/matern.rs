//! Matérn covariance and dense covariance matrices.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::special::bessel_k;

/// Relative diagonal jitter applied before factorizing or eigendecomposing a
/// dense Matérn covariance.
pub const JITTER: f64 = 1e-8;

/// Marginal sd, range and smoothness of a Matérn field.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaternParams {
    sigma: f64,
    rho: f64,
    nu: f64,
}

impl MaternParams {
    pub fn new(sigma: f64, rho: f64, nu: f64) -> Result<Self> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(sigma) || !ok(rho) || !ok(nu) {
            return Err(Error::InvalidInput(alloc::format!(
                "Matérn parameters must be positive (sigma={sigma}, rho={rho}, nu={nu})"
            )));
        }
        // Only orders the Bessel routine covers.
        bessel_k(nu, 1.0)?;
        Ok(MaternParams { sigma, rho, nu })
    }

    /// Unit-variance, `ν = 1` correlation with range `rho`.
    pub fn correlation(rho: f64) -> Result<Self> {
        MaternParams::new(1.0, rho, 1.0)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }
}

/// `σ² 2^{1-ν}/Γ(ν) (κd)^ν K_ν(κd)` with `κ = √(8ν)/ρ`, equal to `σ²` at `d = 0`.
///
/// `ρ` is the practical range (correlation ≈ 0.14 at `d = ρ` for `ν = 1`), the
/// same convention the SPDE precision uses, so a range estimated from a GMRF
/// fit can be plugged in here directly.
pub fn matern_cov(d: f64, p: &MaternParams) -> f64 {
    debug_assert!(d >= 0.0, "negative distance {d}");
    let var = p.sigma * p.sigma;
    if d == 0.0 {
        return var;
    }
    let nu = p.nu;
    let arg = libm::sqrt(8.0 * nu) * d / p.rho;
    if arg > 700.0 {
        return 0.0;
    }
    let k = bessel_k(nu, arg).expect("order validated at construction");
    let log_scale = (1.0 - nu) * core::f64::consts::LN_2 - libm::lgamma(nu) + nu * libm::log(arg);
    var * libm::exp(log_scale) * k
}

#[derive(Clone, Debug)]
pub struct CovMatrix {
    pub matrix: DMatrix<f64>,
    /// Index pairs `(i, j)`, `i < j`, of coincident locations.
    pub duplicates: Vec<(usize, usize)>,
    variance: f64,
}

impl CovMatrix {
    /// The matrix with `JITTER · σ²` added to the diagonal.
    pub fn jittered(&self) -> DMatrix<f64> {
        let mut m = self.matrix.clone();
        let eps = JITTER * self.variance;
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        m
    }
}

/// Pairwise Matérn covariance of `points` (Euclidean distance).
pub fn dense_cov_matrix(points: &[Point], p: &MaternParams) -> CovMatrix {
    let n = points.len();
    let mut matrix = DMatrix::zeros(n, n);
    let mut duplicates = Vec::new();
    for i in 0..n {
        matrix[(i, i)] = p.sigma * p.sigma;
        for j in (i + 1)..n {
            let d = points[i].distance(&points[j]);
            if d == 0.0 {
                duplicates.push((i, j));
            }
            let c = matern_cov(d, p);
            matrix[(i, j)] = c;
            matrix[(j, i)] = c;
        }
    }
    if !duplicates.is_empty() {
        log::warn!(
            "{} coincident location pair(s): covariance is singular without jitter",
            duplicates.len()
        );
    }
    CovMatrix { matrix, duplicates, variance: p.sigma * p.sigma }
}
