//! Spatially confounded replicates and the per-replicate five-model
//! comparison. Parallelism over replicates lives in the std crate; this
//! module only exposes the serial, per-replicate building blocks.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::criteria::{FitOutcome, ReplicateFit};
use crate::error::{Error, Result};
use crate::inference::PCPrior;
use crate::mesh::{build_mesh, max_edge_for_target, Domain, Point, TriMesh};
use crate::models::{
    fit_null, fit_rsr, fit_spatial, fit_spatial_plus, select_k, Dataset, FitOptions, FitResult, ModelKind, ModelPriors,
    SpatialSetup, SpectralBasis,
};
use crate::rng::{derive_seed, fill_standard_normal, rng_from_seed};
use crate::spde::{assemble_fem, build_precision, sample_field, FemMatrices, HyperParams};

/// Range and marginal sd of one simulated Matérn field.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FieldParams {
    pub range: f64,
    pub sigma: f64,
}

impl FieldParams {
    /// `range = ρ₀ e^{θ_ρ}`, `sigma = σ₀ e^{θ_σ}`.
    pub fn from_log(theta_range: f64, theta_sigma: f64, rho0: f64, sigma0: f64) -> Self {
        FieldParams { range: rho0 * libm::exp(theta_range), sigma: sigma0 * libm::exp(theta_sigma) }
    }
}

/// Data-generating process
///
/// ```text
/// x = loading · z_x + ε_x,     ε_x ~ N(0, sigma_x2)
/// y = beta_true · x + z_u − z_x + ε_y,   ε_y ~ N(0, sigma_y²)
/// ```
///
/// on `n` uniform locations in `domain`, with both fields drawn on one mesh.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    pub n: usize,
    pub replicates: usize,
    pub beta_true: f64,
    pub loading: f64,
    pub sigma_x2: f64,
    pub sigma_y: f64,
    /// Field shared by the covariate and the response (`z_x`).
    pub covariate_field: FieldParams,
    /// Field entering the response only (`z_u`).
    pub confounder_field: FieldParams,
    pub domain: Domain,
    /// Target number of mesh vertices.
    pub mesh_nodes: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 500,
            replicates: 50,
            beta_true: 3.0,
            loading: 0.35,
            sigma_x2: 0.1,
            sigma_y: 1.0,
            covariate_field: FieldParams::from_log(2.0, 0.4, 1.0, 1.0),
            confounder_field: FieldParams::from_log(0.0, 1.0, 1.0, 1.0),
            domain: Domain { x_min: 0.0, x_max: 10.0, y_min: 0.0, y_max: 10.0 },
            mesh_nodes: 1283,
            seed: 2024,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        if self.n < 10 {
            return bad("n must be >= 10");
        }
        if self.replicates < 1 {
            return bad("replicates must be >= 1");
        }
        if !(self.sigma_x2 > 0.0 && self.sigma_y > 0.0) || !self.sigma_x2.is_finite() || !self.sigma_y.is_finite() {
            return bad("noise variances must be positive");
        }
        if !self.beta_true.is_finite() || !self.loading.is_finite() {
            return bad("beta_true and loading must be finite");
        }
        for f in [self.covariate_field, self.confounder_field] {
            if !(f.range > 0.0 && f.sigma > 0.0 && f.range.is_finite() && f.sigma.is_finite()) {
                return bad("field range and sigma must be positive");
            }
        }
        if self.mesh_nodes < 4 {
            return bad("mesh_nodes must be >= 4");
        }
        self.domain.validate().map_err(|e| Error::Configuration(e.to_string()))
    }

    /// The mesh shared by generation and fitting.
    pub fn mesh(&self) -> Result<TriMesh> {
        self.validate()?;
        let ext = self.domain.default_extension();
        let edge = max_edge_for_target(&self.domain, ext, self.mesh_nodes)?;
        build_mesh(&self.domain, edge, ext)
    }
}

/// Mesh and element matrices reused by every replicate.
#[derive(Clone, Debug)]
pub struct SimContext {
    pub config: SimConfig,
    pub mesh: TriMesh,
    pub fem: FemMatrices,
}

impl SimContext {
    pub fn new(config: SimConfig) -> Result<Self> {
        let mesh = config.mesh()?;
        let fem = assemble_fem(&mesh)?;
        Ok(SimContext { config, mesh, fem })
    }

    pub fn setup(&self, data: &Dataset) -> Result<SpatialSetup> {
        SpatialSetup::new(self.mesh.clone(), &data.locations)
    }
}

/// Dataset of replicate `rep`; a pure function of `(config, rep)`.
pub fn generate_replicate(ctx: &SimContext, rep: usize) -> Result<Dataset> {
    let cfg = &ctx.config;
    let seed = derive_seed(cfg.seed, rep as u64);
    let mut loc_rng = rng_from_seed(derive_seed(seed, 0));
    let d = &cfg.domain;
    let locations: Vec<Point> = (0..cfg.n)
        .map(|_| {
            let x = d.x_min + loc_rng.random::<f64>() * d.width();
            let y = d.y_min + loc_rng.random::<f64>() * d.height();
            Point::new(x, y)
        })
        .collect();
    let proj = ctx.mesh.project(&locations)?;
    let draw = |f: FieldParams, stream: u64| -> Result<Vec<f64>> {
        let q = build_precision(&ctx.fem, &HyperParams::new(f.range, f.sigma, 1.0)?)?;
        Ok(proj.apply(&sample_field(&q, derive_seed(seed, stream))?))
    };
    let z_x = draw(cfg.covariate_field, 1)?;
    let z_u = draw(cfg.confounder_field, 2)?;
    let mut noise = alloc::vec![0.0; 2 * cfg.n];
    fill_standard_normal(&mut rng_from_seed(derive_seed(seed, 3)), &mut noise);
    let sx = libm::sqrt(cfg.sigma_x2);
    let x: Vec<f64> = (0..cfg.n).map(|i| cfg.loading * z_x[i] + sx * noise[i]).collect();
    let y: Vec<f64> = (0..cfg.n).map(|i| cfg.beta_true * x[i] + z_u[i] - z_x[i] + cfg.sigma_y * noise[cfg.n + i]).collect();
    Dataset::new(locations, y, x, false)
}

/// Priors for every model in a study.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyPriors {
    pub spatial: ModelPriors,
    pub rsr: ModelPriors,
    pub spatial_plus_stage1: ModelPriors,
    pub spatial_plus_stage2: ModelPriors,
    pub spatial_plus2: ModelPriors,
}

impl StudyPriors {
    /// Prior settings of the simulation study.
    pub fn simulation() -> Self {
        let pc = |r, ar, s, as_| ModelPriors::new(PCPrior { rho0: r, alpha_rho: ar, sigma0: s, alpha_sigma: as_ });
        StudyPriors {
            spatial: pc(0.05, 0.05, 3.0, 0.05),
            rsr: pc(15.0, 0.9999, 1.5, 0.0001),
            spatial_plus_stage1: pc(0.01, 0.01, 0.15, 0.01),
            spatial_plus_stage2: pc(0.05, 0.05, 3.0, 0.05),
            spatial_plus2: pc(0.05, 0.05, 3.0, 0.05),
        }
    }

    /// Prior settings of the moss case study (coordinates in metres).
    pub fn case_study() -> Self {
        let pc = |r, ar, s, as_| ModelPriors::new(PCPrior { rho0: r, alpha_rho: ar, sigma0: s, alpha_sigma: as_ });
        StudyPriors {
            spatial: pc(6e4, 0.05, 5.0, 0.05),
            rsr: pc(18e6, 0.9999, 2.5, 0.0001),
            spatial_plus_stage1: pc(13e4, 0.05, 13.0, 0.05),
            spatial_plus_stage2: pc(6e4, 0.05, 5.0, 0.05),
            spatial_plus2: pc(6e4, 0.05, 5.0, 0.05),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.spatial, self.rsr, self.spatial_plus_stage1, self.spatial_plus_stage2, self.spatial_plus2] {
            p.field.validate()?;
        }
        Ok(())
    }
}

/// What to fit per replicate.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyOptions {
    pub models: Vec<ModelKind>,
    pub fit: FitOptions,
    /// Candidate numbers of kept eigenvectors for Spatial+ 2.0.
    pub k_kept_grid: Vec<usize>,
    pub min_keep: usize,
}

impl StudyOptions {
    /// All five models, kept counts from `n` down to `n/10` in tenths.
    pub fn for_n(n: usize) -> Self {
        let mut grid: Vec<usize> = (1..=10).rev().map(|t| n * t / 10).collect();
        grid.dedup();
        StudyOptions { models: ModelKind::ALL.to_vec(), fit: FitOptions::default(), k_kept_grid: grid, min_keep: 20 }
    }
}

/// The fits of one replicate; a failure in one model never stops the others.
#[derive(Clone, Debug)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub fits: Vec<(ModelKind, Result<FitResult>)>,
}

impl ReplicateResult {
    pub fn get(&self, model: ModelKind) -> Option<&FitResult> {
        self.fits.iter().find(|(m, _)| *m == model).and_then(|(_, r)| r.as_ref().ok())
    }

    /// Long-format rows for [`crate::criteria::summarize_study`].
    pub fn rows(&self) -> Vec<ReplicateFit> {
        self.fits
            .iter()
            .map(|(m, r)| ReplicateFit {
                replicate: self.replicate,
                model: m.tag().into(),
                outcome: r.as_ref().ok().map(|f| FitOutcome {
                    beta: f.beta(),
                    dic: f.dic,
                    waic: f.waic.waic,
                    k_kept: f.k_removed.map(|k| f.regressor.len() - k),
                }),
            })
            .collect()
    }
}

/// Fits every requested model to one dataset. Spatial+ 2.0 takes its
/// eigenbasis range from the Spatial posterior mode, so the Spatial fit is
/// run whenever either is requested.
pub fn fit_models(data: &Dataset, setup: &SpatialSetup, priors: &StudyPriors, opts: &StudyOptions, replicate: usize) -> ReplicateResult {
    let mut fits: Vec<(ModelKind, Result<FitResult>)> = Vec::new();
    let want = |m: ModelKind| opts.models.contains(&m);
    let mut spatial: Option<Result<FitResult>> = None;
    if want(ModelKind::Spatial) || want(ModelKind::SpatialPlus2) {
        spatial = Some(fit_spatial(data, setup, &priors.spatial, &opts.fit));
    }
    let warm = spatial.as_ref().and_then(|r| r.as_ref().ok()).map(|f| f.mode());
    for &m in &opts.models {
        let res = match m {
            ModelKind::Null => fit_null(data, None, &opts.fit),
            ModelKind::Spatial => spatial.clone().expect("fitted above"),
            ModelKind::Rsr => fit_rsr(data, setup, &priors.rsr, &opts.fit),
            ModelKind::SpatialPlus => {
                let o = FitOptions { start: warm.or(opts.fit.start), ..opts.fit };
                fit_spatial_plus(data, setup, &priors.spatial_plus_stage1, &priors.spatial_plus_stage2, &o)
            }
            ModelKind::SpatialPlus2 => match spatial.as_ref().expect("fitted above") {
                Err(e) => Err(e.clone()),
                Ok(sp) => SpectralBasis::new(&data.locations, sp.mode().rho).and_then(|basis| {
                    let n = basis.n();
                    let k_grid: Vec<usize> = opts.k_kept_grid.iter().filter(|&&kept| kept <= n).map(|&kept| n - kept).collect();
                    let o = FitOptions { start: Some(sp.mode()), ..opts.fit };
                    select_k(data, setup, &priors.spatial_plus2, &basis, &k_grid, opts.min_keep, &o).map(|s| s.best)
                }),
            },
        };
        if let Err(e) = &res {
            log::warn!("replicate {replicate}: {} fit failed: {e}", m.tag());
        }
        fits.push((m, res));
    }
    ReplicateResult { replicate, fits }
}

/// Generates and fits one replicate.
pub fn run_replicate(ctx: &SimContext, priors: &StudyPriors, opts: &StudyOptions, rep: usize) -> Result<ReplicateResult> {
    let data = generate_replicate(ctx, rep)?;
    let setup = ctx.setup(&data)?;
    let mut o = opts.clone();
    o.fit.seed = derive_seed(ctx.config.seed ^ 0x5eed, rep as u64);
    Ok(fit_models(&data, &setup, priors, &o, rep))
}
