//! The five estimators: Null, Spatial, RSR, Spatial+ and Spatial+ 2.0, plus
//! projection, the spectral covariate split and map prediction.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::criteria::{dic, waic, PointwiseLogLik, Waic};
use crate::dense::{symmetric_eigen, DenseChol};
use crate::error::{Error, Result};
use crate::inference::{
    fit_hyperparameters, fixed_effect_mixture, sample_sd, Evaluation, GaussianPosterior, GridSpec, HyperPosterior,
    HyperPrior, LgmEngine, NoisePrior, NormalMixture, PCPrior, Summary, DEFAULT_BETA_SD,
};
use crate::matern::{dense_cov_matrix, MaternParams};
use crate::mesh::{Domain, Point, TriMesh};
use crate::rng::rng_from_seed;
use crate::sparse::CscMatrix;
use crate::spde::{assemble_fem, FemMatrices, HyperParams};
use crate::special::normal_ln_pdf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ModelKind {
    Null,
    Spatial,
    Rsr,
    SpatialPlus,
    SpatialPlus2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Null, ModelKind::Spatial, ModelKind::Rsr, ModelKind::SpatialPlus, ModelKind::SpatialPlus2];

    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Null => "Null",
            ModelKind::Spatial => "Spatial",
            ModelKind::Rsr => "RSR",
            ModelKind::SpatialPlus => "Spatial+",
            ModelKind::SpatialPlus2 => "Spatial+2.0",
        }
    }

    /// Accepts the tags plus a few spellings (`rsr`, `spatial_plus`, `spatial+2`, ...).
    pub fn parse(s: &str) -> Option<ModelKind> {
        let k: String = s.chars().filter(|c| !matches!(c, '_' | '-' | ' ' | '.')).flat_map(|c| c.to_lowercase()).collect();
        match k.as_str() {
            "null" => Some(ModelKind::Null),
            "spatial" => Some(ModelKind::Spatial),
            "rsr" => Some(ModelKind::Rsr),
            "spatial+" | "spatialplus" => Some(ModelKind::SpatialPlus),
            "spatial+20" | "spatial+2" | "spatialplus2" | "spatialplus20" => Some(ModelKind::SpatialPlus2),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Observations `(s_i, y_i, x_i)`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    pub locations: Vec<Point>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub intercept: bool,
}

impl Dataset {
    pub fn new(locations: Vec<Point>, y: Vec<f64>, x: Vec<f64>, intercept: bool) -> Result<Self> {
        let d = Dataset { locations, y, x, intercept };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if self.x.len() != n || self.locations.len() != n {
            return Err(Error::InvalidInput(alloc::format!(
                "dataset columns differ in length ({} locations, {} responses, {} covariates)",
                self.locations.len(),
                n,
                self.x.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| {
            !(self.y[i].is_finite() && self.x[i].is_finite() && self.locations[i].x.is_finite() && self.locations[i].y.is_finite())
        }) {
            return Err(Error::InvalidInput(alloc::format!("row {i} has a non-finite value")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Design `[1, c]` or `[c]`.
    pub fn design(&self, covariate: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        if self.intercept {
            DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { covariate[r] })
        } else {
            DMatrix::from_fn(n, 1, |r, _| covariate[r])
        }
    }

    /// Intercept-only (or empty) design.
    pub fn base_design(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.n(), usize::from(self.intercept), 1.0)
    }

    /// Index of the covariate's coefficient in the fixed effects.
    pub fn covariate_index(&self) -> usize {
        usize::from(self.intercept)
    }

    fn check_covariate(&self, c: &[f64]) -> Result<()> {
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidInput("covariate is identically zero".into()));
        }
        Ok(())
    }
}

/// `(I − P_B) u` for the column space of `basis`.
pub fn project_out(u: &[f64], basis: &[&[f64]]) -> Result<Vec<f64>> {
    let n = u.len();
    let p = basis.len();
    if basis.iter().any(|b| b.len() != n) {
        return Err(Error::InvalidInput("basis columns must match the vector length".into()));
    }
    if p == 0 {
        return Ok(u.to_vec());
    }
    let b = DMatrix::from_fn(n, p, |r, c| basis[c][r]);
    let gram = b.transpose() * &b;
    let (vals, _) = symmetric_eigen(&gram);
    if !(vals[0] > 1e-12 * vals[p - 1]) {
        return Err(Error::RankDeficient("projection basis columns are linearly dependent".into()));
    }
    let chol = DenseChol::new(gram)?;
    let uv = DVector::from_column_slice(u);
    let coef = chol.solve(&(b.transpose() * &uv));
    Ok((uv - b * coef).as_slice().to_vec())
}

/// Mesh, finite elements and the observation projector, shared by every
/// spatial fit to one dataset.
#[derive(Clone, Debug)]
pub struct SpatialSetup {
    pub mesh: TriMesh,
    pub fem: FemMatrices,
    pub a: CscMatrix,
    q_pattern: CscMatrix,
}

impl SpatialSetup {
    pub fn new(mesh: TriMesh, locations: &[Point]) -> Result<Self> {
        let a = mesh.project(locations)?.to_csc();
        let fem = assemble_fem(&mesh)?;
        let q_pattern = fem.precision_pattern();
        Ok(SpatialSetup { mesh, fem, a, q_pattern })
    }

    fn engine(&self, y: &[f64], f: &DMatrix<f64>, restricted: bool, beta_sd: f64) -> Result<LgmEngine> {
        LgmEngine::new(y, f, Some((&self.a, &self.q_pattern, restricted)), beta_sd)
    }
}

/// Settings shared by all fits.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitOptions {
    pub grid: GridSpec,
    pub beta_sd: f64,
    /// Posterior draws for WAIC/DIC.
    pub draws: usize,
    pub seed: u64,
    /// Starting point for the hyperparameter search.
    pub start: Option<HyperParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { grid: GridSpec::default(), beta_sd: DEFAULT_BETA_SD, draws: 1000, seed: 1, start: None }
    }
}

/// Field prior plus an optional noise prior (default: `P(σ_ε > 10 sd(y)) = 0.01`).
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelPriors {
    pub field: PCPrior,
    pub noise: Option<NoisePrior>,
}

impl ModelPriors {
    pub fn new(field: PCPrior) -> Self {
        ModelPriors { field, noise: None }
    }
}

/// Spatial+ first-stage output used for prediction.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub hyper: HyperPosterior,
    /// Posterior mean of the covariate's smooth part at the data locations.
    pub smooth_at_data: Vec<f64>,
    /// Mixture mean of the field at mesh nodes.
    pub field_mean: Vec<f64>,
    /// Mixture mean of the intercept (0 without one).
    pub intercept_mean: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: ModelKind,
    /// Summaries of every fixed effect (intercept first when present).
    pub fixed: Vec<Summary>,
    pub covariate_index: usize,
    /// Regressor actually used: `x`, `r^X` or `Z`.
    pub regressor: Vec<f64>,
    /// Mixture mean of the latent field at mesh nodes; empty for Null.
    pub field_mean: Vec<f64>,
    pub waic: Waic,
    pub dic: f64,
    pub hyper: HyperPosterior,
    /// Removed eigenvectors (Spatial+ 2.0).
    pub k_removed: Option<usize>,
    pub stage1: Option<Stage1>,
}

impl FitResult {
    /// Summary of the covariate effect.
    pub fn beta(&self) -> Summary {
        self.fixed[self.covariate_index]
    }

    pub fn mode(&self) -> HyperParams {
        self.hyper.mode
    }
}

fn ols_residual_sd(data: &Dataset, covariate: &[f64]) -> f64 {
    let f = data.design(covariate);
    let y = DVector::from_column_slice(&data.y);
    let coef = (f.transpose() * &f).try_inverse().map(|inv| inv * f.transpose() * &y);
    let sd = match coef {
        Some(c) => sample_sd((y - f * c).as_slice()),
        None => sample_sd(&data.y),
    };
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

fn default_start(data: &Dataset, resid_sd: f64) -> HyperParams {
    let diag = Domain::bounding(&data.locations).map(|d| d.diagonal()).unwrap_or(1.0);
    let diag = if diag > 0.0 { diag } else { 1.0 };
    HyperParams::new(0.2 * diag, 0.7 * resid_sd, 0.7 * resid_sd).expect("positive start")
}

fn noise_prior(priors_noise: Option<NoisePrior>, y: &[f64]) -> Result<NoisePrior> {
    match priors_noise {
        Some(p) => Ok(p),
        None => NoisePrior::for_response(y),
    }
}

/// Model-specific pieces needed to turn posterior draws into predictors.
struct Predictor<'a> {
    f: DMatrix<f64>,
    a: Option<&'a CscMatrix>,
    restricted: bool,
}

impl Predictor<'_> {
    fn eta(&self, beta: &[f64], u: &[f64]) -> Vec<f64> {
        let mut eta = (&self.f * DVector::from_column_slice(beta)).as_slice().to_vec();
        if let Some(a) = self.a {
            let mut au = a.mul_vec(u);
            if self.restricted {
                let cols: Vec<Vec<f64>> = (0..self.f.ncols()).map(|c| self.f.column(c).iter().copied().collect()).collect();
                let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
                au = project_out(&au, &refs).expect("design checked at engine construction");
            }
            for (e, v) in eta.iter_mut().zip(au) {
                *e += v;
            }
        }
        eta
    }
}

/// Draws from the hyperposterior mixture and returns `(WAIC, DIC)`.
fn mixture_criteria(
    post: &HyperPosterior,
    y: &[f64],
    pred: &Predictor<'_>,
    conditional: &dyn Fn(&HyperParams) -> Result<GaussianPosterior>,
    draws: usize,
    seed: u64,
) -> Result<(Waic, f64)> {
    let n = y.len();
    let draws = draws.max(2);
    let mut rng = rng_from_seed(seed);
    let mut counts = vec![0usize; post.points.len()];
    for _ in 0..draws {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = post.points.len() - 1;
        for (j, g) in post.points.iter().enumerate() {
            acc += g.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        counts[pick] += 1;
    }
    let mut ll = PointwiseLogLik::zeros(n, draws);
    let mut dev = Vec::with_capacity(draws);
    let mut eta_sum = vec![0.0; n];
    let mut col = 0;
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let g = conditional(&post.points[j].hp)?;
        for _ in 0..c {
            let (beta, u) = g.sample(&mut rng);
            let eta = pred.eta(&beta, &u);
            let mut d = 0.0;
            for i in 0..n {
                let v = normal_ln_pdf(y[i], eta[i], g.sigma_eps);
                ll.set(i, col, v);
                d -= 2.0 * v;
                eta_sum[i] += eta[i];
            }
            dev.push(d);
            col += 1;
        }
    }
    let sigma_bar = post.mean_of(|hp| hp.sigma_eps);
    let at_mean: f64 = (0..n).map(|i| -2.0 * normal_ln_pdf(y[i], eta_sum[i] / draws as f64, sigma_bar)).sum();
    Ok((waic(&ll)?, dic(&dev, at_mean)?))
}

fn fixed_summaries(post: &HyperPosterior) -> Result<Vec<Summary>> {
    let p = post.points[0].eval.beta_mean.len();
    (0..p).map(|t| Ok(fixed_effect_mixture(post, t)?.summary())).collect()
}

pub fn fit_null(data: &Dataset, noise: Option<NoisePrior>, opts: &FitOptions) -> Result<FitResult> {
    data.validate()?;
    data.check_covariate(&data.x)?;
    let f = data.design(&data.x);
    let engine = LgmEngine::new(&data.y, &f, None, opts.beta_sd)?;
    let prior = HyperPrior { field: None, noise: noise_prior(noise, &data.y)? };
    let start = opts.start.unwrap_or_else(|| default_start(data, ols_residual_sd(data, &data.x)));
    let cond = |hp: &HyperParams| engine.posterior(None, hp.sigma_eps);
    let hyper = fit_hyperparameters(|hp| cond(hp).map(|g| Evaluation::from(&g)), &prior, &start, &opts.grid)?;
    let pred = Predictor { f: f.clone(), a: None, restricted: false };
    let (w, d) = mixture_criteria(&hyper, &data.y, &pred, &cond, opts.draws, opts.seed)?;
    Ok(FitResult {
        model: ModelKind::Null,
        fixed: fixed_summaries(&hyper)?,
        covariate_index: data.covariate_index(),
        regressor: data.x.clone(),
        field_mean: Vec::new(),
        waic: w,
        dic: d,
        hyper,
        k_removed: None,
        stage1: None,
    })
}

/// Spatial (or restricted) model with regressor `covariate`.
fn fit_field_model(
    kind: ModelKind,
    data: &Dataset,
    setup: &SpatialSetup,
    covariate: &[f64],
    priors: &ModelPriors,
    restricted: bool,
    opts: &FitOptions,
) -> Result<FitResult> {
    data.validate()?;
    data.check_covariate(covariate)?;
    let f = data.design(covariate);
    let engine = setup.engine(&data.y, &f, restricted, opts.beta_sd)?;
    let prior = HyperPrior { field: Some(priors.field), noise: noise_prior(priors.noise, &data.y)? };
    let start = opts.start.unwrap_or_else(|| default_start(data, ols_residual_sd(data, covariate)));
    let cond = |hp: &HyperParams| engine.posterior_spde(&setup.fem, hp);
    let hyper = fit_hyperparameters(|hp| cond(hp).map(|g| Evaluation::from(&g)), &prior, &start, &opts.grid)?;
    let pred = Predictor { f: f.clone(), a: Some(&setup.a), restricted };
    let (w, d) = mixture_criteria(&hyper, &data.y, &pred, &cond, opts.draws, opts.seed)?;
    Ok(FitResult {
        model: kind,
        fixed: fixed_summaries(&hyper)?,
        covariate_index: data.covariate_index(),
        regressor: covariate.to_vec(),
        field_mean: hyper.field_mean(),
        waic: w,
        dic: d,
        hyper,
        k_removed: None,
        stage1: None,
    })
}

pub fn fit_spatial(data: &Dataset, setup: &SpatialSetup, priors: &ModelPriors, opts: &FitOptions) -> Result<FitResult> {
    fit_field_model(ModelKind::Spatial, data, setup, &data.x, priors, false, opts)
}

/// Restricted spatial regression: the field enters as `(I − P_F) A u`.
pub fn fit_rsr(data: &Dataset, setup: &SpatialSetup, priors: &ModelPriors, opts: &FitOptions) -> Result<FitResult> {
    fit_field_model(ModelKind::Rsr, data, setup, &data.x, priors, true, opts)
}

/// First stage of Spatial+: `x = F₀β₀ + A f_X + ε_X`.
pub fn spatial_plus_stage1(data: &Dataset, setup: &SpatialSetup, priors: &ModelPriors, opts: &FitOptions) -> Result<Stage1> {
    let f0 = data.base_design();
    let engine = setup.engine(&data.x, &f0, false, opts.beta_sd)?;
    let prior = HyperPrior { field: Some(priors.field), noise: noise_prior(priors.noise, &data.x)? };
    let sd = sample_sd(&data.x);
    if !(sd > 0.0) {
        return Err(Error::InvalidInput("covariate is constant".into()));
    }
    let start = default_start(data, sd);
    let hyper = fit_hyperparameters(
        |hp| engine.posterior_spde(&setup.fem, hp).map(|g| Evaluation::from(&g)),
        &prior,
        &start,
        &opts.grid,
    )?;
    let field_mean = hyper.field_mean();
    let intercept_mean = if data.intercept { hyper.points.iter().map(|g| g.weight * g.eval.beta_mean[0]).sum() } else { 0.0 };
    let smooth_at_data: Vec<f64> = setup.a.mul_vec(&field_mean).iter().map(|v| v + intercept_mean).collect();
    Ok(Stage1 { hyper, smooth_at_data, field_mean, intercept_mean })
}

pub fn fit_spatial_plus(
    data: &Dataset,
    setup: &SpatialSetup,
    priors_stage1: &ModelPriors,
    priors_stage2: &ModelPriors,
    opts: &FitOptions,
) -> Result<FitResult> {
    data.validate()?;
    data.check_covariate(&data.x)?;
    let stage1 = spatial_plus_stage1(data, setup, priors_stage1, opts)?;
    let resid: Vec<f64> = data.x.iter().zip(&stage1.smooth_at_data).map(|(x, s)| x - s).collect();
    let norm_r = libm::sqrt(resid.iter().map(|v| v * v).sum::<f64>());
    let norm_x = libm::sqrt(data.x.iter().map(|v| v * v).sum::<f64>());
    if !(norm_r > 1e-8 * norm_x) {
        return Err(Error::DegenerateResidual);
    }
    let mut fit = fit_field_model(ModelKind::SpatialPlus, data, setup, &resid, priors_stage2, false, opts)?;
    fit.stage1 = Some(stage1);
    Ok(fit)
}

/// Eigenbasis of the data-level Matérn precision at range `ρ̂` (σ = 1, ν = 1).
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    /// Orthonormal eigenvectors, columns ordered by ascending precision eigenvalue.
    pub s: DMatrix<f64>,
    /// Precision eigenvalues, ascending.
    pub delta: Vec<f64>,
    pub rho: f64,
}

impl SpectralBasis {
    /// Eigendecomposes the jittered covariance `Σ`; the precision `Σ⁻¹` shares
    /// its eigenvectors with eigenvalues `1/λ`, so the largest-variance
    /// directions come first.
    pub fn new(locations: &[Point], rho: f64) -> Result<Self> {
        let params = MaternParams::correlation(rho)?;
        let cov = dense_cov_matrix(locations, &params).jittered();
        let (vals, vecs) = symmetric_eigen(&cov);
        let n = vals.len();
        if vals.iter().any(|v| !v.is_finite()) || n > 0 && !(vals[0] > 0.0) {
            return Err(Error::Numerical("covariance eigendecomposition failed".into()));
        }
        let s = DMatrix::from_fn(n, n, |r, c| vecs[(r, n - 1 - c)]);
        let delta = (0..n).map(|c| 1.0 / vals[n - 1 - c]).collect();
        Ok(SpectralBasis { s, delta, rho })
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn split(&self, x: &[f64], k: usize) -> Result<SpectralSplit> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::InvalidInput("covariate length differs from the basis size".into()));
        }
        if k > n {
            return Err(Error::InvalidInput(alloc::format!("cannot remove {k} of {n} eigenvectors")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariate".into()));
        }
        let a = self.s.transpose() * DVector::from_column_slice(x);
        let mut z_star = DVector::zeros(n);
        for i in 0..k {
            z_star.axpy(a[i], &self.s.column(i), 1.0);
        }
        let z: Vec<f64> = x.iter().zip(z_star.iter()).map(|(xi, zs)| xi - zs).collect();
        Ok(SpectralSplit {
            s: self.s.clone(),
            delta: self.delta.clone(),
            a: a.as_slice().to_vec(),
            k,
            z,
            z_star: z_star.as_slice().to_vec(),
        })
    }
}

/// `x = Z + Z*` with `Z*` in the span of the `k` lowest-eigenvalue eigenvectors.
#[derive(Clone, Debug)]
pub struct SpectralSplit {
    pub s: DMatrix<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub k: usize,
    pub z: Vec<f64>,
    pub z_star: Vec<f64>,
}

impl SpectralSplit {
    pub fn kept(&self) -> usize {
        self.delta.len() - self.k
    }
}

pub fn spectral_split(data: &Dataset, reference_range: f64, k: usize) -> Result<SpectralSplit> {
    SpectralBasis::new(&data.locations, reference_range)?.split(&data.x, k)
}

/// Spatial model with the decorrelated covariate `Z` (k eigenvectors removed).
pub fn fit_spatial_plus2(
    data: &Dataset,
    setup: &SpatialSetup,
    priors: &ModelPriors,
    basis: &SpectralBasis,
    k: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    let split = basis.split(&data.x, k)?;
    let mut fit = fit_field_model(ModelKind::SpatialPlus2, data, setup, &split.z, priors, false, opts)?;
    fit.k_removed = Some(k);
    Ok(fit)
}

/// Regressor of `kind` at fixed first-stage hyperparameters: `x` for Null,
/// Spatial and RSR, `x` minus the stage-1 smooth for Spatial+, and `Z` for
/// Spatial+ 2.0 (`split` gives the basis and the removed count).
pub fn regressor_at(
    kind: ModelKind,
    data: &Dataset,
    setup: &SpatialSetup,
    stage1: &HyperParams,
    split: Option<(&SpectralBasis, usize)>,
    beta_sd: f64,
) -> Result<Vec<f64>> {
    match kind {
        ModelKind::Null | ModelKind::Spatial | ModelKind::Rsr => Ok(data.x.clone()),
        ModelKind::SpatialPlus => {
            let f0 = data.base_design();
            let g = setup.engine(&data.x, &f0, false, beta_sd)?.posterior_spde(&setup.fem, stage1)?;
            let b0 = if data.intercept { g.beta_mean[0] } else { 0.0 };
            Ok(data.x.iter().zip(setup.a.mul_vec(&g.u_mean)).map(|(x, s)| x - s - b0).collect())
        }
        ModelKind::SpatialPlus2 => {
            let (basis, k) = split.ok_or_else(|| Error::InvalidInput("Spatial+ 2.0 needs an eigenbasis".into()))?;
            Ok(basis.split(&data.x, k)?.z)
        }
    }
}

/// Conditional posterior of `kind` at fixed hyperparameters, with `covariate`
/// as regressor.
pub fn conditional_at(
    kind: ModelKind,
    data: &Dataset,
    setup: &SpatialSetup,
    covariate: &[f64],
    hp: &HyperParams,
    beta_sd: f64,
) -> Result<GaussianPosterior> {
    data.check_covariate(covariate)?;
    let f = data.design(covariate);
    match kind {
        ModelKind::Null => LgmEngine::new(&data.y, &f, None, beta_sd)?.posterior(None, hp.sigma_eps),
        _ => setup.engine(&data.y, &f, kind == ModelKind::Rsr, beta_sd)?.posterior_spde(&setup.fem, hp),
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KSweepRow {
    pub k_removed: usize,
    pub k_kept: usize,
    /// `None` when the fit failed.
    pub waic: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct KSelection {
    pub k_removed: usize,
    pub table: Vec<KSweepRow>,
    pub best: FitResult,
}

impl KSelection {
    pub fn k_kept(&self) -> usize {
        self.table[0].k_kept + self.table[0].k_removed - self.k_removed
    }
}

/// Index of the minimum-WAIC row with more than `min_keep` kept eigenvectors.
pub fn argmin_admissible(table: &[KSweepRow], min_keep: usize) -> Result<usize> {
    table
        .iter()
        .enumerate()
        .filter(|(_, r)| r.k_kept > min_keep)
        .filter_map(|(i, r)| r.waic.filter(|w| w.is_finite()).map(|w| (i, w)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| {
            Error::Configuration(alloc::format!("every k candidate keeps <= {min_keep} eigenvectors or failed to fit"))
        })
}

/// Fits Spatial+ 2.0 for every removed-count in `k_grid` and returns the
/// WAIC-optimal admissible one.
pub fn select_k(
    data: &Dataset,
    setup: &SpatialSetup,
    priors: &ModelPriors,
    basis: &SpectralBasis,
    k_grid: &[usize],
    min_keep: usize,
    opts: &FitOptions,
) -> Result<KSelection> {
    if k_grid.is_empty() {
        return Err(Error::Configuration("empty k grid".into()));
    }
    let n = basis.n();
    let mut table = Vec::with_capacity(k_grid.len());
    let mut fits = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        if k > n {
            return Err(Error::Configuration(alloc::format!("k = {k} exceeds the {n} available eigenvectors")));
        }
        let fit = if n - k > min_keep {
            match fit_spatial_plus2(data, setup, priors, basis, k, opts) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("Spatial+ 2.0 fit with {} kept eigenvectors failed: {e}", n - k);
                    None
                }
            }
        } else {
            None
        };
        table.push(KSweepRow { k_removed: k, k_kept: n - k, waic: fit.as_ref().map(|f| f.waic.waic) });
        fits.push(fit);
    }
    let best = argmin_admissible(&table, min_keep)?;
    Ok(KSelection { k_removed: table[best].k_removed, best: fits[best].take().expect("admissible row has a fit"), table })
}

/// Covariate values at prediction pixels for each model.
#[derive(Clone, Debug)]
pub struct PredictionInputs<'a> {
    pub points: &'a [Point],
    pub covariate: &'a [f64],
    /// Exponentiate the predictor (log-response fits).
    pub exponentiate: bool,
}

/// Posterior median of the linear predictor at every pixel.
/// What prediction needs from a fit: the model, its regressor at the data
/// locations, the hyperposterior mixture and the Spatial+ smooth.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictiveState {
    pub model: ModelKind,
    pub regressor: Vec<f64>,
    /// `(hyperparameters, weight)` of every mixture component.
    pub components: Vec<(HyperParams, f64)>,
    /// Spatial+ first-stage field mean at mesh nodes.
    pub stage1_field: Option<Vec<f64>>,
    pub stage1_intercept: f64,
    pub beta_sd: f64,
}

impl FitResult {
    pub fn predictive_state(&self, beta_sd: f64) -> PredictiveState {
        PredictiveState {
            model: self.model,
            regressor: self.regressor.clone(),
            components: self.hyper.points.iter().map(|g| (g.hp, g.weight)).collect(),
            stage1_field: self.stage1.as_ref().map(|s| s.field_mean.clone()),
            stage1_intercept: self.stage1.as_ref().map_or(0.0, |s| s.intercept_mean),
            beta_sd,
        }
    }
}

pub fn predict_grid(state: &PredictiveState, data: &Dataset, setup: Option<&SpatialSetup>, inputs: &PredictionInputs<'_>) -> Result<Vec<f64>> {
    let beta_sd = state.beta_sd;
    if state.model == ModelKind::SpatialPlus2 {
        return Err(Error::UnsupportedPrediction(
            "Spatial+ 2.0 needs the eigendecomposition of the dense precision over every prediction pixel; \
             this decomposition can not be obtained numerically at map scale"
                .into(),
        ));
    }
    let np = inputs.points.len();
    if inputs.covariate.len() != np {
        return Err(Error::InvalidInput("one covariate value per pixel is required".into()));
    }
    // pixel covariate as used by the model
    let pixel_reg: Vec<f64> = match &state.stage1_field {
        Some(field) => {
            let setup = setup.ok_or_else(|| Error::InvalidInput("Spatial+ prediction needs the mesh".into()))?;
            let proj = setup.mesh.project(inputs.points)?;
            let smooth = proj.apply(field);
            (0..np).map(|i| inputs.covariate[i] - smooth[i] - state.stage1_intercept).collect()
        }
        None => inputs.covariate.to_vec(),
    };
    let fp = DMatrix::from_fn(np, usize::from(data.intercept) + 1, |r, c| if data.intercept && c == 0 { 1.0 } else { pixel_reg[r] });
    if state.regressor.len() != data.n() || state.components.is_empty() {
        return Err(Error::InvalidInput("fit state does not match the dataset".into()));
    }
    let f = data.design(&state.regressor);
    let p = f.ncols();

    let mut medians = vec![0.0; np];
    if state.model == ModelKind::Null {
        let engine = LgmEngine::new(&data.y, &f, None, beta_sd)?;
        let mut mix = NormalMixture { weights: Vec::new(), means: Vec::new(), sds: Vec::new() };
        let mut comps: Vec<(f64, DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(state.components.len());
        for (hp, w) in &state.components {
            let g = engine.posterior(None, hp.sigma_eps)?;
            comps.push((*w, DVector::from_column_slice(&g.beta_mean), g.beta_cov));
        }
        for i in 0..np {
            let row = fp.row(i).transpose();
            mix.weights.clear();
            mix.means.clear();
            mix.sds.clear();
            for (w, m, c) in &comps {
                mix.weights.push(*w);
                mix.means.push(row.dot(m));
                mix.sds.push(libm::sqrt((row.transpose() * c * &row)[(0, 0)].max(0.0)));
            }
            medians[i] = mix.median();
        }
    } else {
        let setup = setup.ok_or_else(|| Error::InvalidInput("spatial prediction needs the mesh".into()))?;
        let restricted = state.model == ModelKind::Rsr;
        let engine = setup.engine(&data.y, &f, restricted, beta_sd)?;
        let proj = setup.mesh.project(inputs.points)?;
        // restricted field at a pixel: a(p)ᵀu − f(p)ᵀ G u with G = (FᵀF)⁻¹FᵀA
        let g_rows: Vec<Vec<f64>> = if restricted {
            let ftf = DenseChol::new(f.transpose() * &f)?;
            let at_f: Vec<Vec<f64>> = (0..p).map(|c| setup.a.transpose_mul_vec(f.column(c).as_slice())).collect();
            let m = setup.fem.n();
            let mut g = vec![vec![0.0; m]; p];
            for node in 0..m {
                let v = DVector::from_iterator(p, (0..p).map(|c| at_f[c][node]));
                let s = ftf.solve(&v);
                for r in 0..p {
                    g[r][node] = s[r];
                }
            }
            g
        } else {
            Vec::new()
        };
        let mut per_pixel: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..np).map(|_| (Vec::new(), Vec::new(), Vec::new())).collect();
        for (hp, weight) in &state.components {
            if *weight < 1e-12 {
                continue;
            }
            let post = engine.posterior_spde(&setup.fem, hp)?;
            let cov = post.covariance().ok_or_else(|| Error::Numerical("missing field factor".into()))?;
            // Cov(u, Gu) and Cov(β, Gu) via solves, plus mean and covariance of Gu
            let mut gu_mean = vec![0.0; p];
            let mut h_u: Vec<Vec<f64>> = Vec::new();
            let mut h_b: Vec<Vec<f64>> = Vec::new();
            let mut gg = DMatrix::<f64>::zeros(p, p);
            if restricted {
                for r in 0..p {
                    gu_mean[r] = g_rows[r].iter().zip(&post.u_mean).map(|(a, b)| a * b).sum();
                    let (xu, xb) = post.solve(&g_rows[r], &vec![0.0; p]);
                    h_u.push(xu);
                    h_b.push(xb);
                }
                for r in 0..p {
                    for c in 0..p {
                        gg[(r, c)] = g_rows[r].iter().zip(&h_u[c]).map(|(a, b)| a * b).sum();
                    }
                }
            }
            for i in 0..np {
                let row: Vec<(usize, f64)> = proj.row(i).collect();
                let fi: Vec<f64> = fp.row(i).iter().copied().collect();
                let mut mean: f64 = (0..p).map(|r| fi[r] * post.beta_mean[r]).sum::<f64>();
                mean += row.iter().map(|&(j, w)| w * post.u_mean[j]).sum::<f64>();
                let mut var = 0.0;
                for r in 0..p {
                    for c in 0..p {
                        var += fi[r] * fi[c] * cov.fixed(r, c);
                    }
                }
                for &(j, wj) in &row {
                    for r in 0..p {
                        var += 2.0 * wj * fi[r] * cov.field_fixed(j, r);
                    }
                    for &(k, wk) in &row {
                        var += wj * wk * cov.field(j, k).ok_or_else(|| Error::Numerical("triangle nodes outside the factor pattern".into()))?;
                    }
                }
                if restricted {
                    // ũ(p) = aᵀu − fᵀGu
                    mean -= (0..p).map(|r| fi[r] * gu_mean[r]).sum::<f64>();
                    for r in 0..p {
                        let cov_a_gu: f64 = row.iter().map(|&(j, w)| w * h_u[r][j]).sum();
                        let cov_b_gu: f64 = (0..p).map(|c| fi[c] * h_b[r][c]).sum();
                        var -= 2.0 * fi[r] * (cov_a_gu + cov_b_gu);
                        for c in 0..p {
                            var += fi[r] * fi[c] * gg[(r, c)];
                        }
                    }
                }
                per_pixel[i].0.push(*weight);
                per_pixel[i].1.push(mean);
                per_pixel[i].2.push(libm::sqrt(var.max(0.0)));
            }
        }
        for (i, (w, m, s)) in per_pixel.into_iter().enumerate() {
            let total: f64 = w.iter().sum();
            let mix = NormalMixture { weights: w.iter().map(|v| v / total).collect(), means: m, sds: s };
            medians[i] = mix.median();
        }
    }
    if inputs.exponentiate {
        for v in medians.iter_mut() {
            *v = libm::exp(*v);
        }
    }
    Ok(medians)
}

/// Nearest-location covariate values at `points` (ties by lowest index).
pub fn nearest_covariate(data: &Dataset, points: &[Point]) -> Vec<f64> {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0usize);
            for (i, s) in data.locations.iter().enumerate() {
                let d = p.distance(s);
                if d < best.0 {
                    best = (d, i);
                }
            }
            data.x[best.1]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let u = [2.0, -1.0, 0.0, 0.0];
        let r = project_out(&u, &[&x]).unwrap();
        for (a, b) in r.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        let triple: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert!(project_out(&triple, &[&x]).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(project_out(&u, &[&x, &triple]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn model_tags_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.tag()), Some(k));
        }
        assert_eq!(ModelKind::parse("spatial_plus2"), Some(ModelKind::SpatialPlus2));
    }

    #[test]
    fn admissible_minimum_skips_excluded_zone() {
        let table: Vec<KSweepRow> = [(0, 50, 10.0), (25, 25, 9.0), (40, 10, 1.0), (45, 5, 0.5)]
            .iter()
            .map(|&(k, kept, w)| KSweepRow { k_removed: k, k_kept: kept, waic: Some(w) })
            .collect();
        assert_eq!(argmin_admissible(&table, 20).unwrap(), 1);
        assert!(argmin_admissible(&table[2..], 20).is_err());
    }
}
