//! Exact inference for linear latent Gaussian models
//! `y = Fβ + B u + ε`, `u ~ N(0, Q⁻¹)`, `β ~ N(0, s²I)`, `ε ~ N(0, σ_ε²I)`,
//! where `B` is either the projector `A` or its restricted version `(I − P_F)A`.
//!
//! The latent field is eliminated with a sparse Cholesky; fixed effects (and,
//! for the restricted model, `p` auxiliary variables carrying the low-rank
//! correction `−AᵀP_F A/σ_ε²`) form a small dense tail handled by a Schur
//! complement.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dense::{symmetric_eigen, DenseChol};
use crate::error::{Error, Result};
use crate::rng::fill_standard_normal;
use crate::sparse::{CholeskyFactor, CscMatrix, SelectedInverse, SymbolicCholesky};
use crate::spde::{precision_values, FemMatrices, HyperParams};
use crate::special::{normal_cdf, normal_quantile};

/// Prior sd of every fixed effect.
pub const DEFAULT_BETA_SD: f64 = 1000.0;

/// Penalized-complexity prior on a Matérn field in two dimensions:
/// `P(ρ < ρ₀) = α_ρ`, `P(σ > σ₀) = α_σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PCPrior {
    pub rho0: f64,
    pub alpha_rho: f64,
    pub sigma0: f64,
    pub alpha_sigma: f64,
}

impl PCPrior {
    pub fn new(rho0: f64, alpha_rho: f64, sigma0: f64, alpha_sigma: f64) -> Result<Self> {
        let p = PCPrior { rho0, alpha_rho, sigma0, alpha_sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let prob = |v: f64| v > 0.0 && v < 1.0;
        if pos(self.rho0) && pos(self.sigma0) && prob(self.alpha_rho) && prob(self.alpha_sigma) {
            Ok(())
        } else {
            Err(Error::InvalidInput(alloc::format!("invalid PC prior {self:?}")))
        }
    }

    /// `λ₁ = −log(α_ρ) ρ₀` (for `d = 2`).
    pub fn lambda_rho(&self) -> f64 {
        -libm::log(self.alpha_rho) * self.rho0
    }

    /// `λ₂ = −log(α_σ)/σ₀`.
    pub fn lambda_sigma(&self) -> f64 {
        -libm::log(self.alpha_sigma) / self.sigma0
    }

    /// `log(λ₁ ρ⁻² exp(−λ₁/ρ))`.
    pub fn range_log_density(&self, rho: f64) -> f64 {
        let l = self.lambda_rho();
        libm::log(l) - 2.0 * libm::log(rho) - l / rho
    }

    /// `log(λ₂ exp(−λ₂σ))`.
    pub fn sd_log_density(&self, sigma: f64) -> f64 {
        let l = self.lambda_sigma();
        libm::log(l) - l * sigma
    }
}

/// Joint log density of `(ρ, σ)` under `prior`.
pub fn pc_prior_logdensity(hp: &HyperParams, prior: &PCPrior) -> f64 {
    prior.range_log_density(hp.rho) + prior.sd_log_density(hp.sigma)
}

/// Exponential prior on the noise sd.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoisePrior {
    pub rate: f64,
}

impl NoisePrior {
    /// `P(σ_ε > threshold) = alpha`.
    pub fn new(threshold: f64, alpha: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite() && alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidInput(alloc::format!(
                "noise prior needs threshold > 0 and alpha in (0,1), got {threshold}, {alpha}"
            )));
        }
        Ok(NoisePrior { rate: -libm::log(alpha) / threshold })
    }

    /// The default `P(σ_ε > 10·sd(y)) = 0.01`.
    pub fn for_response(y: &[f64]) -> Result<Self> {
        let sd = sample_sd(y);
        if !(sd > 0.0) {
            return Err(Error::Undefined("response has zero variance".into()));
        }
        NoisePrior::new(10.0 * sd, 0.01)
    }

    pub fn log_density(&self, s: f64) -> f64 {
        libm::log(self.rate) - self.rate * s
    }
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    libm::sqrt(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
}

/// The latent Matérn/GMRF part of a model.
#[derive(Clone, Debug)]
pub struct LatentField {
    /// `n × m` observation projector.
    pub a: CscMatrix,
    /// Precision of the field at mesh nodes.
    pub q: CscMatrix,
    /// Project `A u` orthogonally to the columns of `F` (restricted spatial regression).
    pub restricted: bool,
}

/// A linear latent Gaussian model at fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct LinearLGM {
    pub y: Vec<f64>,
    /// `n × p` fixed-effect design.
    pub f: DMatrix<f64>,
    pub field: Option<LatentField>,
    pub sigma_eps: f64,
    pub beta_sd: f64,
}

pub fn conditional_posterior(model: &LinearLGM) -> Result<GaussianPosterior> {
    let field = model.field.as_ref().map(|lf| (&lf.a, &lf.q, lf.restricted));
    let engine = LgmEngine::new(&model.y, &model.f, field, model.beta_sd)?;
    engine.posterior(model.field.as_ref().map(|lf| lf.q.values()), model.sigma_eps)
}

/// Precomputed, hyperparameter-independent pieces of a [`LinearLGM`]; every
/// posterior evaluation reuses the symbolic factorization.
#[derive(Clone, Debug)]
pub struct LgmEngine {
    n: usize,
    p: usize,
    yty: f64,
    fty: DVector<f64>,
    ftf: DMatrix<f64>,
    beta_prec: f64,
    field: Option<FieldParts>,
}

#[derive(Clone, Debug)]
struct FieldParts {
    m: usize,
    restricted: bool,
    k_pattern: CscMatrix,
    q_nnz: usize,
    q_to_k: Vec<usize>,
    ata_on_k: Vec<f64>,
    symbolic: SymbolicCholesky,
    // AᵀF for the plain model, AᵀF L_F⁻ᵀ (FᵀF = L_F L_Fᵀ) for the restricted one
    coupling: DMatrix<f64>,
    // Aᵀy, or Aᵀ(I − P_F)y
    aty: Vec<f64>,
}

impl LgmEngine {
    /// `field = (A, precision pattern, restricted)`.
    pub fn new(y: &[f64], f: &DMatrix<f64>, field: Option<(&CscMatrix, &CscMatrix, bool)>, beta_sd: f64) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput("no observations".into()));
        }
        if f.nrows() != n {
            return Err(Error::InvalidInput(alloc::format!("design has {} rows for {n} observations", f.nrows())));
        }
        if y.iter().any(|v| !v.is_finite()) || f.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite response or design entry".into()));
        }
        if !(beta_sd > 0.0) {
            return Err(Error::InvalidInput("fixed-effect prior sd must be positive".into()));
        }
        let p = f.ncols();
        let yv = DVector::from_column_slice(y);
        let ftf = f.transpose() * f;
        let fty = f.transpose() * &yv;
        if p > 0 {
            check_full_rank(&ftf)?;
        }
        let field = match field {
            None => None,
            Some((a, q_pattern, restricted)) => Some(FieldParts::new(a, q_pattern, restricted, f, y, &ftf)?),
        };
        Ok(LgmEngine {
            n,
            p,
            yty: yv.dot(&yv),
            fty,
            ftf,
            beta_prec: 1.0 / (beta_sd * beta_sd),
            field,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_fixed(&self) -> usize {
        self.p
    }

    pub fn n_field(&self) -> usize {
        self.field.as_ref().map_or(0, |f| f.m)
    }

    pub fn has_field(&self) -> bool {
        self.field.is_some()
    }

    /// Posterior at the SPDE precision implied by `hp` on `fem`.
    pub fn posterior_spde(&self, fem: &FemMatrices, hp: &HyperParams) -> Result<GaussianPosterior> {
        match &self.field {
            None => self.posterior(None, hp.sigma_eps),
            Some(_) => {
                let mut q = vec![0.0; fem.precision_pattern().nnz()];
                precision_values(fem, hp, &mut q);
                self.posterior(Some(&q), hp.sigma_eps)
            }
        }
    }

    /// Posterior given the precision values (on the pattern passed to
    /// [`LgmEngine::new`]) and the noise sd.
    pub fn posterior(&self, q_values: Option<&[f64]>, sigma_eps: f64) -> Result<GaussianPosterior> {
        if !(sigma_eps > 0.0 && sigma_eps.is_finite()) {
            return Err(Error::InvalidInput(alloc::format!("noise sd must be positive, got {sigma_eps}")));
        }
        let s2 = sigma_eps * sigma_eps;
        let p = self.p;
        let n = self.n as f64;
        let mut log_ml = -0.5 * n * libm::log(2.0 * PI) - n * libm::log(sigma_eps) + 0.5 * p as f64 * libm::log(self.beta_prec);

        let Some(fp) = &self.field else {
            let k = &self.ftf / s2 + DMatrix::identity(p, p) * self.beta_prec;
            let chol = DenseChol::new(k).map_err(|_| Error::RankDeficient("fixed-effect normal equations".into()))?;
            let b = &self.fty / s2;
            let yt = chol.forward(&b);
            let mean = chol.backward(&yt);
            log_ml += -0.5 * chol.logdet() - 0.5 * (self.yty / s2 - yt.dot(&yt));
            return Ok(GaussianPosterior {
                beta_mean: mean.as_slice().to_vec(),
                beta_cov: chol.inverse(),
                u_mean: Vec::new(),
                log_marginal: log_ml,
                sigma_eps,
                p,
                parts: Factors { l: None, w: DMatrix::zeros(0, p), s: chol, restricted: false },
            });
        };

        let q_values = q_values.ok_or_else(|| Error::InvalidInput("model has a field but no precision".into()))?;
        if q_values.len() != fp.q_nnz {
            return Err(Error::InvalidInput("precision pattern differs from the engine's".into()));
        }
        // field prior log-determinant, factored on the same (superset) pattern
        let mut kv = fp.k_pattern.clone();
        for (i, &pos) in fp.q_to_k.iter().enumerate() {
            kv.values_mut()[pos] = q_values[i];
        }
        let logdet_q = fp.symbolic.factor(&kv)?.logdet();
        for (v, ata) in kv.values_mut().iter_mut().zip(&fp.ata_on_k) {
            *v += ata / s2;
        }
        let l = fp.symbolic.factor(&kv)?;

        // dense tail: β (p) then, when restricted, p auxiliary variables
        let q = if fp.restricted { 2 * p } else { p };
        let mut k_ut = DMatrix::zeros(fp.m, q);
        let mut k_tt = DMatrix::zeros(q, q);
        k_tt.view_mut((0, 0), (p, p)).copy_from(&(&self.ftf / s2 + DMatrix::identity(p, p) * self.beta_prec));
        if fp.restricted {
            k_ut.view_mut((0, p), (fp.m, p)).copy_from(&(&fp.coupling / sigma_eps));
            k_tt.view_mut((p, p), (p, p)).fill_with_identity();
        } else {
            k_ut.copy_from(&(&fp.coupling / s2));
        }
        let mut w = DMatrix::zeros(fp.m, q);
        for c in 0..q {
            let col: Vec<f64> = k_ut.column(c).iter().copied().collect();
            w.set_column(c, &DVector::from_vec(l.half_solve(&col)));
        }
        let s = DenseChol::new(&k_tt - w.transpose() * &w).map_err(|_| Error::RankDeficient("fixed-effect Schur complement".into()))?;

        let b_u: Vec<f64> = fp.aty.iter().map(|v| v / s2).collect();
        let mut b_t = DVector::zeros(q);
        b_t.rows_mut(0, p).copy_from(&(&self.fty / s2));
        let y_u = l.half_solve(&b_u);
        let y_uv = DVector::from_column_slice(&y_u);
        let y_t = s.forward(&(b_t - w.transpose() * &y_uv));
        let x_t = s.backward(&y_t);
        let r: Vec<f64> = (y_uv - &w * &x_t).as_slice().to_vec();
        let u_mean = l.half_solve_transpose(&r);

        log_ml += 0.5 * logdet_q - 0.5 * (l.logdet() + s.logdet());
        log_ml -= 0.5 * (self.yty / s2 - y_u.iter().map(|v| v * v).sum::<f64>() - y_t.dot(&y_t));

        let s_inv = s.inverse();
        Ok(GaussianPosterior {
            beta_mean: x_t.rows(0, p).as_slice().to_vec(),
            beta_cov: s_inv.view((0, 0), (p, p)).into_owned(),
            u_mean,
            log_marginal: log_ml,
            sigma_eps,
            p,
            parts: Factors { l: Some(l), w, s, restricted: fp.restricted },
        })
    }
}

fn check_full_rank(ftf: &DMatrix<f64>) -> Result<()> {
    let (vals, _) = symmetric_eigen(ftf);
    let max = vals.last().copied().unwrap_or(0.0);
    if !(vals[0] > 1e-10 * max) {
        return Err(Error::RankDeficient("fixed-effect design columns are linearly dependent".into()));
    }
    Ok(())
}

impl FieldParts {
    fn new(a: &CscMatrix, q_pattern: &CscMatrix, restricted: bool, f: &DMatrix<f64>, y: &[f64], ftf: &DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let m = q_pattern.n_cols();
        if a.n_rows() != n || a.n_cols() != m || q_pattern.n_rows() != m {
            return Err(Error::InvalidInput("projector, precision and data dimensions disagree".into()));
        }
        let at = a.transpose();
        let ata = at.matmul(a);
        let k_pattern = q_pattern.add_scaled(0.0, &ata, 0.0);
        let mut q_to_k = Vec::with_capacity(q_pattern.nnz());
        for j in 0..m {
            for (i, _) in q_pattern.col(j) {
                q_to_k.push(k_pattern.position(i, j).expect("union pattern"));
            }
        }
        let ata_on_k = ata.on_pattern_of(&k_pattern).values().to_vec();
        let symbolic = SymbolicCholesky::with_rcm(&k_pattern)?;

        let p = f.ncols();
        let mut atf = DMatrix::zeros(m, p);
        for c in 0..p {
            let col: Vec<f64> = f.column(c).iter().copied().collect();
            atf.set_column(c, &DVector::from_vec(at.mul_vec(&col)));
        }
        let (coupling, aty) = if restricted {
            if p == 0 {
                return Err(Error::InvalidInput("restricted field needs at least one fixed effect".into()));
            }
            let lf = DenseChol::new(ftf.clone()).map_err(|_| Error::RankDeficient("restriction basis".into()))?;
            // V = AᵀF L_F⁻ᵀ, row by row
            let mut v = DMatrix::zeros(m, p);
            for r in 0..m {
                let row = DVector::from_iterator(p, atf.row(r).iter().copied());
                v.set_row(r, &lf.forward(&row).transpose());
            }
            let yv = DVector::from_column_slice(y);
            let coef = lf.solve(&(f.transpose() * &yv));
            let resid = yv - f * coef;
            (v, at.mul_vec(resid.as_slice()))
        } else {
            (atf, at.mul_vec(y))
        };
        Ok(FieldParts {
            m,
            restricted,
            k_pattern,
            q_nnz: q_pattern.nnz(),
            q_to_k,
            ata_on_k,
            symbolic,
            coupling,
            aty,
        })
    }
}

#[derive(Clone, Debug)]
struct Factors {
    l: Option<CholeskyFactor>,
    // L⁻¹ P K_ut, permuted field order
    w: DMatrix<f64>,
    // Schur complement of the tail
    s: DenseChol,
    restricted: bool,
}

/// Joint Gaussian posterior of `(β, u)` at fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub beta_mean: Vec<f64>,
    pub beta_cov: DMatrix<f64>,
    /// Field mean at mesh nodes; empty without a field.
    pub u_mean: Vec<f64>,
    pub log_marginal: f64,
    pub sigma_eps: f64,
    p: usize,
    parts: Factors,
}

impl GaussianPosterior {
    pub fn beta_sd(&self) -> Vec<f64> {
        (0..self.p).map(|i| libm::sqrt(self.beta_cov[(i, i)])).collect()
    }

    /// One joint draw `(β, u)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let q = self.parts.s.dim();
        let mut zt = vec![0.0; q];
        fill_standard_normal(rng, &mut zt);
        let xt = self.parts.s.backward(&DVector::from_vec(zt));
        let beta = (0..self.p).map(|i| self.beta_mean[i] + xt[i]).collect();
        let u = match &self.parts.l {
            None => Vec::new(),
            Some(l) => {
                let mut zu = vec![0.0; l.n()];
                fill_standard_normal(rng, &mut zu);
                let wx = &self.parts.w * &xt;
                for (z, d) in zu.iter_mut().zip(wx.iter()) {
                    *z -= d;
                }
                let x = l.half_solve_transpose(&zu);
                x.iter().zip(&self.u_mean).map(|(a, b)| a + b).collect()
            }
        };
        (beta, u)
    }

    /// Applies the inverse of the posterior precision to `(b_u, b_β)`;
    /// auxiliary variables get a zero right-hand side. Returns `(x_u, x_β)`.
    pub fn solve(&self, b_u: &[f64], b_beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q = self.parts.s.dim();
        let mut bt = DVector::zeros(q);
        bt.rows_mut(0, self.p).copy_from_slice(b_beta);
        match &self.parts.l {
            None => {
                let x = self.parts.s.solve(&bt);
                (Vec::new(), x.as_slice().to_vec())
            }
            Some(l) => {
                let yu = DVector::from_vec(l.half_solve(b_u));
                let yt = self.parts.s.forward(&(bt - self.parts.w.transpose() * &yu));
                let xt = self.parts.s.backward(&yt);
                let r = yu - &self.parts.w * &xt;
                (l.half_solve_transpose(r.as_slice()), xt.rows(0, self.p).as_slice().to_vec())
            }
        }
    }

    /// Posterior covariance entries needed for prediction.
    pub fn covariance(&self) -> Option<PosteriorCovariance> {
        let l = self.parts.l.as_ref()?;
        let q = self.parts.s.dim();
        let m = l.n();
        // Y = K_uu⁻¹ K_ut = Pᵀ L⁻ᵀ W
        let mut y = DMatrix::zeros(m, q);
        for c in 0..q {
            let col: Vec<f64> = self.parts.w.column(c).iter().copied().collect();
            y.set_column(c, &DVector::from_vec(l.half_solve_transpose(&col)));
        }
        Some(PosteriorCovariance { sel: l.selected_inverse(), s_inv: self.parts.s.inverse(), y, p: self.p })
    }

    pub fn is_restricted(&self) -> bool {
        self.parts.restricted
    }
}

/// Selected entries of the joint posterior covariance.
#[derive(Clone, Debug)]
pub struct PosteriorCovariance {
    sel: SelectedInverse,
    s_inv: DMatrix<f64>,
    y: DMatrix<f64>,
    p: usize,
}

impl PosteriorCovariance {
    /// `Cov(u_i, u_j)` for `(i, j)` in the factor pattern (always true for
    /// nodes sharing a triangle).
    pub fn field(&self, i: usize, j: usize) -> Option<f64> {
        let base = self.sel.get(i, j)?;
        let yi = self.y.row(i);
        let yj = self.y.row(j);
        Some(base + (yi * &self.s_inv * yj.transpose())[(0, 0)])
    }

    /// `Cov(u_i, β_r)`.
    pub fn field_fixed(&self, i: usize, r: usize) -> f64 {
        -(self.y.row(i) * self.s_inv.column(r))[(0, 0)]
    }

    pub fn fixed(&self, r: usize, c: usize) -> f64 {
        self.s_inv[(r, c)]
    }

    pub fn n_fixed(&self) -> usize {
        self.p
    }
}

/// Grid resolution for hyperparameter integration.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    /// Points per dimension of the initial log-scale grid.
    pub coarse_points: usize,
    /// Half width of the initial grid, log units.
    pub coarse_half_width: f64,
    /// Points per dimension of the mode-centred refined grid.
    pub refine_points: usize,
    /// Refined grid spans `±refine_z` posterior standard deviations.
    pub refine_z: f64,
    /// Cap on the posterior sd used for spacing the refined grid, log units.
    pub max_log_sd: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { coarse_points: 3, coarse_half_width: 1.5, refine_points: 5, refine_z: 2.5, max_log_sd: 1.2 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_points < 3 || self.refine_points < 3 || self.refine_points % 2 == 0 {
            return Err(Error::Configuration(
                "grid needs >= 3 coarse points and an odd number (>= 3) of refined points per dimension".into(),
            ));
        }
        if !(self.coarse_half_width > 0.0 && self.refine_z > 0.0 && self.max_log_sd > 0.0) {
            return Err(Error::Configuration("grid widths must be positive".into()));
        }
        Ok(())
    }
}

/// Priors on every hyperparameter of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperPrior {
    pub field: Option<PCPrior>,
    pub noise: NoisePrior,
}

impl HyperPrior {
    /// Log density of `hp` on the log scale of the free parameters (Jacobians included).
    pub fn log_density_log_scale(&self, hp: &HyperParams) -> f64 {
        let mut lp = self.noise.log_density(hp.sigma_eps) + libm::log(hp.sigma_eps);
        if let Some(pc) = &self.field {
            lp += pc_prior_logdensity(hp, pc) + libm::log(hp.rho) + libm::log(hp.sigma);
        }
        lp
    }
}

/// Summary of one conditional posterior kept for each grid point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub log_marginal: f64,
    pub beta_mean: Vec<f64>,
    pub beta_cov: DMatrix<f64>,
    pub u_mean: Vec<f64>,
}

impl From<&GaussianPosterior> for Evaluation {
    fn from(g: &GaussianPosterior) -> Self {
        Evaluation {
            log_marginal: g.log_marginal,
            beta_mean: g.beta_mean.clone(),
            beta_cov: g.beta_cov.clone(),
            u_mean: g.u_mean.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridPoint {
    pub hp: HyperParams,
    pub log_posterior: f64,
    pub weight: f64,
    pub eval: Evaluation,
}

#[derive(Clone, Debug)]
pub struct HyperPosterior {
    pub points: Vec<GridPoint>,
    /// Mode of the hyperparameter posterior (log scale).
    pub mode: HyperParams,
    /// Whether the search box had to be expanded once.
    pub expanded: bool,
    /// Number of posterior evaluations spent.
    pub evaluations: usize,
}

impl HyperPosterior {
    /// A degenerate posterior putting all mass on one point.
    pub fn single(hp: HyperParams, eval: Evaluation) -> Self {
        HyperPosterior {
            points: vec![GridPoint { hp, log_posterior: eval.log_marginal, weight: 1.0, eval }],
            mode: hp,
            expanded: false,
            evaluations: 1,
        }
    }

    /// The grid point with the highest weight.
    pub fn best(&self) -> &GridPoint {
        self.points.iter().max_by(|a, b| a.weight.total_cmp(&b.weight)).expect("non-empty grid")
    }

    /// Posterior mean of a function of the hyperparameters.
    pub fn mean_of(&self, f: impl Fn(&HyperParams) -> f64) -> f64 {
        self.points.iter().map(|p| p.weight * f(&p.hp)).sum()
    }

    /// Weight-averaged field mean at mesh nodes.
    pub fn field_mean(&self) -> Vec<f64> {
        let m = self.points[0].eval.u_mean.len();
        let mut out = vec![0.0; m];
        for p in &self.points {
            for (o, u) in out.iter_mut().zip(&p.eval.u_mean) {
                *o += p.weight * u;
            }
        }
        out
    }
}

const PARAM_NAMES: [&str; 3] = ["sigma_eps", "rho", "sigma"];

fn to_log(hp: &HyperParams, dim: usize) -> Vec<f64> {
    let all = [libm::log(hp.sigma_eps), libm::log(hp.rho), libm::log(hp.sigma)];
    all[..dim].to_vec()
}

fn from_log(theta: &[f64], template: &HyperParams) -> HyperParams {
    let mut hp = *template;
    hp.sigma_eps = libm::exp(theta[0]);
    if theta.len() == 3 {
        hp.rho = libm::exp(theta[1]);
        hp.sigma = libm::exp(theta[2]);
    }
    hp
}

/// Explores the hyperparameter posterior: coarse log grid around `start`,
/// Nelder–Mead polish, finite-difference Hessian, then a refined grid in
/// Hessian-standardized coordinates whose normalized weights define the
/// posterior mixture. Free parameters are `σ_ε` and, when `prior.field` is
/// set, `(ρ, σ)`.
pub fn fit_hyperparameters<F>(evaluate: F, prior: &HyperPrior, start: &HyperParams, grid: &GridSpec) -> Result<HyperPosterior>
where
    F: Fn(&HyperParams) -> Result<Evaluation>,
{
    grid.validate()?;
    start.validate()?;
    let dim = if prior.field.is_some() { 3 } else { 1 };
    let mut evaluations = 0usize;
    let mut log_post = |theta: &[f64]| -> f64 {
        evaluations += 1;
        let hp = from_log(theta, start);
        if hp.validate().is_err() {
            return f64::NEG_INFINITY;
        }
        match evaluate(&hp) {
            Ok(e) if e.log_marginal.is_finite() => e.log_marginal + prior.log_density_log_scale(&hp),
            _ => f64::NEG_INFINITY,
        }
    };

    let mut center = to_log(start, dim);
    let mut half = grid.coarse_half_width;
    let mut expanded = false;
    let mode = loop {
        // coarse grid
        let mut best = (f64::NEG_INFINITY, center.clone());
        for idx in grid_indices(dim, grid.coarse_points) {
            let theta: Vec<f64> = (0..dim)
                .map(|d| center[d] + half * (2.0 * idx[d] as f64 / (grid.coarse_points - 1) as f64 - 1.0))
                .collect();
            let v = log_post(&theta);
            if v > best.0 {
                best = (v, theta);
            }
        }
        if !best.0.is_finite() {
            return Err(Error::Numerical("log posterior is not finite anywhere on the coarse grid".into()));
        }
        let bound = 3.0 * half;
        let lo: Vec<f64> = center.iter().map(|c| c - bound).collect();
        let hi: Vec<f64> = center.iter().map(|c| c + bound).collect();
        let (mode, _) = nelder_mead(&mut log_post, &best.1, 0.5 * half, &lo, &hi);
        let edge = (0..dim).find(|&d| mode[d] - lo[d] < 1e-2 * half || hi[d] - mode[d] < 1e-2 * half);
        match edge {
            None => break mode,
            Some(d) if expanded => return Err(Error::ModeOnBoundary { parameter: PARAM_NAMES[d] }),
            Some(d) => {
                log::warn!("hyperparameter mode of {} on the search boundary; expanding the grid once", PARAM_NAMES[d]);
                expanded = true;
                center = mode;
                half *= 2.0;
            }
        }
    };

    // curvature at the mode
    let f0 = log_post(&mode);
    let h = 0.1;
    let mut hess = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let mut tp = mode.clone();
        let mut tm = mode.clone();
        tp[i] += h;
        tm[i] -= h;
        hess[(i, i)] = (log_post(&tp) - 2.0 * f0 + log_post(&tm)) / (h * h);
        for j in 0..i {
            let mut pts = [mode.clone(), mode.clone(), mode.clone(), mode.clone()];
            let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
            let mut vals = [0.0; 4];
            for (k, (si, sj)) in signs.iter().enumerate() {
                pts[k][i] += si * h;
                pts[k][j] += sj * h;
                vals[k] = log_post(&pts[k]);
            }
            let v = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let neg: DMatrix<f64> = -hess;
    let (mut lam, vecs) = if neg.iter().all(|v| v.is_finite()) {
        symmetric_eigen(&neg)
    } else {
        (vec![0.0; dim], DMatrix::identity(dim, dim))
    };
    let floor = 1.0 / (grid.max_log_sd * grid.max_log_sd);
    for l in lam.iter_mut() {
        if !(*l > floor) {
            *l = floor;
        }
    }

    // refined grid, evaluated in full
    let mut points = Vec::new();
    let r = grid.refine_points;
    for idx in grid_indices(dim, r) {
        let z: Vec<f64> = idx.iter().map(|&k| grid.refine_z * (2.0 * k as f64 / (r - 1) as f64 - 1.0)).collect();
        let mut theta = mode.clone();
        for (c, &lc) in lam.iter().enumerate() {
            let s = z[c] / libm::sqrt(lc);
            for d in 0..dim {
                theta[d] += vecs[(d, c)] * s;
            }
        }
        let hp = from_log(&theta, start);
        if hp.validate().is_err() {
            continue;
        }
        evaluations += 1;
        if let Ok(eval) = evaluate(&hp) {
            let lp = eval.log_marginal + prior.log_density_log_scale(&hp);
            if lp.is_finite() {
                points.push(GridPoint { hp, log_posterior: lp, weight: 0.0, eval });
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Numerical("every refined grid point failed to evaluate".into()));
    }
    normalize_weights(&mut points);
    Ok(HyperPosterior { points, mode: from_log(&mode, start), expanded, evaluations })
}

pub(crate) fn normalize_weights(points: &mut [GridPoint]) {
    let max = points.iter().map(|p| p.log_posterior).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in points.iter_mut() {
        p.weight = libm::exp(p.log_posterior - max);
        total += p.weight;
    }
    for p in points.iter_mut() {
        p.weight /= total;
    }
}

fn grid_indices(dim: usize, k: usize) -> Vec<Vec<usize>> {
    let total = k.pow(dim as u32);
    (0..total)
        .map(|mut flat| {
            (0..dim)
                .map(|_| {
                    let i = flat % k;
                    flat /= k;
                    i
                })
                .collect()
        })
        .collect()
}

/// Maximizes `f` inside the box `[lo, hi]` (points outside score `-inf`).
fn nelder_mead(f: &mut impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64, lo: &[f64], hi: &[f64]) -> (Vec<f64>, f64) {
    let dim = x0.len();
    let mut eval = |x: &[f64]| -> f64 {
        if x.iter().zip(lo).zip(hi).any(|((v, l), h)| v < l || v > h) {
            f64::NEG_INFINITY
        } else {
            f(x)
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for d in 0..dim {
        let mut x = x0.to_vec();
        x[d] += step;
        if x[d] > hi[d] {
            x[d] = x0[d] - step;
        }
        let v = eval(&x);
        simplex.push((x, v));
    }
    for _ in 0..400 {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread = simplex.iter().skip(1).fold(0.0f64, |m, s| {
            m.max(s.0.iter().zip(&simplex[0].0).fold(0.0f64, |mm, (a, b)| mm.max(libm::fabs(a - b))))
        });
        if (best - worst).abs() < 1e-7 && spread < 1e-3 || spread < 1e-6 {
            break;
        }
        let centroid: Vec<f64> = (0..dim).map(|d| simplex[..dim].iter().map(|s| s.0[d]).sum::<f64>() / dim as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..dim).map(|d| centroid[d] + t * (simplex[dim].0[d] - centroid[d])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr > simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe);
            simplex[dim] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr > worst {
                let x = along(-0.5);
                let v = eval(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x);
                (x, v)
            };
            if fc > worst.max(fr) {
                simplex[dim] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = s.0.iter().zip(&x0).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    let v = eval(&x);
                    *s = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v)
}

/// Mean, sd and equal-tailed 95% interval of a scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Gaussian mixture `Σ w_j N(m_j, s_j²)`.
#[derive(Clone, Debug)]
pub struct NormalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl NormalMixture {
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn sd(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = (0..self.weights.len()).map(|j| self.weights[j] * (self.sds[j] * self.sds[j] + self.means[j] * self.means[j])).sum();
        libm::sqrt((second - mean * mean).max(0.0))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        (0..self.weights.len())
            .map(|j| {
                let w = self.weights[j];
                if self.sds[j] > 0.0 {
                    w * normal_cdf((x - self.means[j]) / self.sds[j])
                } else if x >= self.means[j] {
                    w
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Inverts the CDF by bisection to `1e-10` in probability.
    pub fn quantile(&self, p: f64) -> f64 {
        if self.weights.len() == 1 {
            return self.means[0] + self.sds[0] * normal_quantile(p);
        }
        let z = libm::fabs(normal_quantile(p.min(1.0 - p) * 0.5)) + 1.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..self.weights.len() {
            lo = lo.min(self.means[j] - z * self.sds[j]);
            hi = hi.max(self.means[j] + z * self.sds[j]);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let c = self.cdf(mid);
            if libm::fabs(c - p) < 1e-10 {
                return mid;
            }
            if c < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn summary(&self) -> Summary {
        Summary { mean: self.mean(), sd: self.sd(), q025: self.quantile(0.025), q975: self.quantile(0.975) }
    }
}

/// Marginal mixture of fixed effect `target`.
pub fn fixed_effect_mixture(post: &HyperPosterior, target: usize) -> Result<NormalMixture> {
    let p = post.points[0].eval.beta_mean.len();
    if target >= p {
        return Err(Error::InvalidInput(alloc::format!("fixed effect {target} out of range ({p} effects)")));
    }
    Ok(NormalMixture {
        weights: post.points.iter().map(|g| g.weight).collect(),
        means: post.points.iter().map(|g| g.eval.beta_mean[target]).collect(),
        sds: post.points.iter().map(|g| libm::sqrt(g.eval.beta_cov[(target, target)].max(0.0))).collect(),
    })
}

pub fn posterior_summary(post: &HyperPosterior, target: usize) -> Result<Summary> {
    Ok(fixed_effect_mixture(post, target)?.summary())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pc_prior_tail_constants() {
        let pc = PCPrior::new(0.05, 0.05, 3.0, 0.05).unwrap();
        assert!((libm::exp(-pc.lambda_rho() / 0.05) - 0.05).abs() < 1e-15);
        assert!((libm::exp(-pc.lambda_sigma() * 3.0) - 0.05).abs() < 1e-15);
        assert!(PCPrior::new(1.0, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn ols_limit_without_field() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| 1.5 * v + 0.4 + ((i * 7 % 5) as f64 - 2.0) * 0.1).collect();
        let f = DMatrix::from_fn(20, 2, |r, c| if c == 0 { 1.0 } else { x[r] });
        let model = LinearLGM { y: y.clone(), f: f.clone(), field: None, sigma_eps: 0.5, beta_sd: 1e8 };
        let post = conditional_posterior(&model).unwrap();
        let ols = (f.transpose() * &f).try_inverse().unwrap() * f.transpose() * DVector::from_vec(y);
        assert!((post.beta_mean[0] - ols[0]).abs() < 1e-8);
        assert!((post.beta_mean[1] - ols[1]).abs() < 1e-8);
    }

    #[test]
    fn mixture_symmetry() {
        let m = NormalMixture { weights: vec![0.5, 0.5], means: vec![-1.0, 1.0], sds: vec![1.0, 1.0] };
        let s = m.summary();
        assert!(s.mean.abs() < 1e-15);
        assert!((s.q025 + s.q975).abs() < 1e-8);
        assert!((m.cdf(m.quantile(0.3)) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn nelder_mead_finds_quadratic_peak() {
        let mut f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 0.5).powi(2);
        let (x, _) = nelder_mead(&mut f, &[0.0, 0.0], 0.5, &[-5.0, -5.0], &[5.0, 5.0]);
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }
}
