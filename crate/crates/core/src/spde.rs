//! P1 finite elements on a [`TriMesh`] and the `α = 2` SPDE precision
//! `Q = τ²(κ⁴C + 2κ²G + GC⁻¹G)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::rng::{fill_standard_normal, rng_from_seed};
use crate::sparse::{CholeskyFactor, CscMatrix, SymbolicCholesky};

/// Lumped mass `C` and stiffness `G`, plus the pieces of `Q` laid out on the
/// common pattern of `GC⁻¹G` so precision builds are a single pass.
#[derive(Clone, Debug)]
pub struct FemMatrices {
    c: Vec<f64>,
    g: CscMatrix,
    c_on_q: CscMatrix,
    g_on_q: CscMatrix,
    gcg_on_q: CscMatrix,
}

impl FemMatrices {
    /// Diagonal of the lumped mass matrix.
    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn g(&self) -> &CscMatrix {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    /// Zero-valued matrix with the sparsity pattern of every precision built
    /// from these matrices.
    pub fn precision_pattern(&self) -> CscMatrix {
        let mut p = self.gcg_on_q.clone();
        p.values_mut().iter_mut().for_each(|v| *v = 0.0);
        p
    }
}

pub fn assemble_fem(mesh: &TriMesh) -> Result<FemMatrices> {
    let m = mesh.n_vertices();
    let verts = mesh.vertices();
    let mut c = vec![0.0; m];
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = [verts[tri[0]], verts[tri[1]], verts[tri[2]]];
        let area = 0.5 * ((p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y));
        if !(libm::fabs(area) >= 1e-14) {
            return Err(Error::DegenerateTriangle { triangle: t, area });
        }
        let area = libm::fabs(area);
        // edge vectors opposite each vertex
        let e = [
            (p[2].x - p[1].x, p[2].y - p[1].y),
            (p[0].x - p[2].x, p[0].y - p[2].y),
            (p[1].x - p[0].x, p[1].y - p[0].y),
        ];
        for a in 0..3 {
            c[tri[a]] += area / 3.0;
            for b in 0..3 {
                let dot = e[a].0 * e[b].0 + e[a].1 * e[b].1;
                trip.push((tri[a], tri[b], dot / (4.0 * area)));
            }
        }
    }
    let g = CscMatrix::from_triplets(m, m, &trip);
    let c_inv: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
    let gcg = g.matmul(&CscMatrix::from_diagonal(&c_inv)).matmul(&g);
    let c_mat = CscMatrix::from_diagonal(&c);
    // GC⁻¹G already contains the patterns of G and of the diagonal
    let pattern = gcg.add_scaled(1.0, &g.add_scaled(1.0, &c_mat, 1.0), 0.0);
    Ok(FemMatrices {
        c_on_q: c_mat.on_pattern_of(&pattern),
        g_on_q: g.on_pattern_of(&pattern),
        gcg_on_q: gcg.on_pattern_of(&pattern),
        c,
        g,
    })
}

/// Matérn field parameters, noise sd and reference values for the log
/// parameterization `θ₁ = log σ − log σ₀`, `θ₂ = log ρ − log ρ₀`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperParams {
    pub rho: f64,
    pub sigma: f64,
    pub nu: f64,
    pub sigma_eps: f64,
    pub rho0: f64,
    pub sigma0: f64,
}

impl HyperParams {
    pub fn new(rho: f64, sigma: f64, sigma_eps: f64) -> Result<Self> {
        let hp = HyperParams { rho, sigma, nu: 1.0, sigma_eps, rho0: 1.0, sigma0: 1.0 };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.rho) && ok(self.sigma) && ok(self.sigma_eps) && ok(self.rho0) && ok(self.sigma0) {
            if self.nu != 1.0 {
                return Err(Error::InvalidInput(alloc::format!("SPDE precision needs nu = 1, got {}", self.nu)));
            }
            Ok(())
        } else {
            Err(Error::InvalidInput(alloc::format!("hyperparameters must be positive: {self:?}")))
        }
    }

    pub fn with_reference(mut self, rho0: f64, sigma0: f64) -> Result<Self> {
        self.rho0 = rho0;
        self.sigma0 = sigma0;
        self.validate()?;
        Ok(self)
    }

    /// Parameters with `log σ = θ₁ + log σ₀`, `log ρ = θ₂ + log ρ₀`.
    pub fn from_theta(theta1: f64, theta2: f64, sigma_eps: f64, rho0: f64, sigma0: f64) -> Result<Self> {
        HyperParams::new(rho0 * libm::exp(theta2), sigma0 * libm::exp(theta1), sigma_eps)?
            .with_reference(rho0, sigma0)
    }

    /// Inverse of [`kappa`](Self::kappa)/[`tau`](Self::tau).
    pub fn from_kappa_tau(kappa: f64, tau: f64, sigma_eps: f64) -> Result<Self> {
        let rho = libm::sqrt(8.0) / kappa;
        let sigma = 1.0 / (tau * kappa * libm::sqrt(4.0 * PI));
        HyperParams::new(rho, sigma, sigma_eps)
    }

    pub fn kappa(&self) -> f64 {
        libm::sqrt(8.0 * self.nu) / self.rho
    }

    /// `σ² = 1/(4π κ² τ²)`.
    pub fn tau(&self) -> f64 {
        1.0 / (self.sigma * self.kappa() * libm::sqrt(4.0 * PI))
    }

    pub fn theta1(&self) -> f64 {
        libm::log(self.sigma) - libm::log(self.sigma0)
    }

    pub fn theta2(&self) -> f64 {
        libm::log(self.rho) - libm::log(self.rho0)
    }
}

#[derive(Clone, Debug)]
pub struct SparsePrecision {
    pub q: CscMatrix,
    pub params: HyperParams,
}

impl SparsePrecision {
    pub fn factor(&self) -> Result<CholeskyFactor> {
        SymbolicCholesky::with_rcm(&self.q)?.factor(&self.q)
    }
}

pub fn build_precision(fem: &FemMatrices, hp: &HyperParams) -> Result<SparsePrecision> {
    hp.validate()?;
    let mut q = fem.precision_pattern();
    precision_values(fem, hp, q.values_mut());
    Ok(SparsePrecision { q, params: *hp })
}

/// Writes the values of `Q` (on [`FemMatrices::precision_pattern`]) into `out`.
pub(crate) fn precision_values(fem: &FemMatrices, hp: &HyperParams, out: &mut [f64]) {
    let k2 = hp.kappa() * hp.kappa();
    let t2 = hp.tau() * hp.tau();
    let (a, b, c) = (t2 * k2 * k2, 2.0 * t2 * k2, t2);
    let vc = fem.c_on_q.values();
    let vg = fem.g_on_q.values();
    let vgcg = fem.gcg_on_q.values();
    for (i, o) in out.iter_mut().enumerate() {
        *o = a * vc[i] + b * vg[i] + c * vgcg[i];
    }
}

/// One draw `u ~ N(0, Q⁻¹)`.
pub fn sample_field(q: &SparsePrecision, seed: u64) -> Result<Vec<f64>> {
    let factor = q.factor()?;
    let mut z = vec![0.0; factor.n()];
    fill_standard_normal(&mut rng_from_seed(seed), &mut z);
    Ok(factor.half_solve_transpose(&z))
}
