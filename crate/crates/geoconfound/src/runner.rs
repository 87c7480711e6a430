//! Parallel drivers: replicates of a study, the Spatial+ 2.0 k-sweep and the
//! models of a single dataset.

use geoconfound_core::models::{
    argmin_admissible, fit_null, fit_rsr, fit_spatial, fit_spatial_plus, fit_spatial_plus2, Dataset, FitOptions, FitResult,
    KSweepRow, ModelKind, ModelPriors, SpatialSetup, SpectralBasis,
};
use geoconfound_core::simstudy::{run_replicate, ReplicateResult, SimContext, StudyOptions, StudyPriors};
use geoconfound_core::{Error, Result};
use rayon::prelude::*;

use crate::CliError;

/// Pool with `threads` workers (machine cores when `None`).
pub fn thread_pool(threads: Option<usize>) -> std::result::Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        b = b.num_threads(t);
    }
    b.build().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

/// Every replicate of the study, in replicate order.
pub fn run_study(ctx: &SimContext, priors: &StudyPriors, opts: &StudyOptions) -> Vec<(usize, Result<ReplicateResult>)> {
    (0..ctx.config.replicates).into_par_iter().map(|rep| (rep, run_replicate(ctx, priors, opts, rep))).collect()
}

/// Outcome of a Spatial+ 2.0 sweep over kept-eigenvector counts.
#[derive(Debug, Clone)]
pub struct KSweep {
    pub table: Vec<KSweepRow>,
    pub selected: usize,
    pub best: FitResult,
}

impl KSweep {
    pub fn k_kept(&self) -> usize {
        self.table[self.selected].k_kept
    }
}

/// Fits every admissible candidate in parallel and keeps the WAIC minimum.
pub fn sweep_k(
    data: &Dataset,
    setup: &SpatialSetup,
    priors: &ModelPriors,
    basis: &SpectralBasis,
    kept_grid: &[usize],
    min_keep: usize,
    opts: &FitOptions,
) -> Result<KSweep> {
    if kept_grid.is_empty() {
        return Err(Error::Configuration("empty k grid".into()));
    }
    let n = basis.n();
    if let Some(&k) = kept_grid.iter().find(|&&k| k > n) {
        return Err(Error::Configuration(format!("cannot keep {k} of {n} eigenvectors")));
    }
    let mut fits: Vec<Option<FitResult>> = kept_grid
        .par_iter()
        .map(|&kept| {
            if kept <= min_keep {
                return None;
            }
            match fit_spatial_plus2(data, setup, priors, basis, n - kept, opts) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("Spatial+ 2.0 fit keeping {kept} eigenvectors failed: {e}");
                    None
                }
            }
        })
        .collect();
    let table: Vec<KSweepRow> = kept_grid
        .iter()
        .zip(&fits)
        .map(|(&kept, f)| KSweepRow { k_removed: n - kept, k_kept: kept, waic: f.as_ref().map(|f| f.waic.waic) })
        .collect();
    let selected = argmin_admissible(&table, min_keep)?;
    let best = fits[selected].take().expect("admissible row has a fit");
    Ok(KSweep { table, selected, best })
}

/// Fits of one dataset. Spatial runs first: its posterior mode warm-starts
/// Spatial+ and fixes the Spatial+ 2.0 eigenbasis range (unless
/// `reference_range` is given).
pub fn fit_dataset(
    data: &Dataset,
    setup: &SpatialSetup,
    priors: &StudyPriors,
    opts: &StudyOptions,
    reference_range: Option<f64>,
) -> (Vec<(ModelKind, Result<FitResult>)>, Option<KSweep>) {
    let want = |m| opts.models.contains(&m);
    let spatial = if want(ModelKind::Spatial) || want(ModelKind::SpatialPlus2) && reference_range.is_none() {
        Some(fit_spatial(data, setup, &priors.spatial, &opts.fit))
    } else {
        None
    };
    let warm = spatial.as_ref().and_then(|r| r.as_ref().ok()).map(|f| f.mode());
    let results: Vec<(ModelKind, Result<FitResult>, Option<KSweep>)> = opts
        .models
        .par_iter()
        .map(|&m| {
            let warm_opts = FitOptions { start: warm.or(opts.fit.start), ..opts.fit };
            match m {
                ModelKind::Null => (m, fit_null(data, None, &opts.fit), None),
                ModelKind::Spatial => (m, spatial.clone().expect("fitted above"), None),
                ModelKind::Rsr => (m, fit_rsr(data, setup, &priors.rsr, &opts.fit), None),
                ModelKind::SpatialPlus => {
                    (m, fit_spatial_plus(data, setup, &priors.spatial_plus_stage1, &priors.spatial_plus_stage2, &warm_opts), None)
                }
                ModelKind::SpatialPlus2 => {
                    let rho = match (reference_range, &spatial) {
                        (Some(r), _) => Ok(r),
                        (None, Some(Ok(s))) => Ok(s.mode().rho),
                        (None, Some(Err(e))) => Err(e.clone()),
                        (None, None) => unreachable!("Spatial is fitted when no reference range is given"),
                    };
                    let sweep = rho.and_then(|rho| SpectralBasis::new(&data.locations, rho)).and_then(|basis| {
                        sweep_k(data, setup, &priors.spatial_plus2, &basis, &opts.k_kept_grid, opts.min_keep, &warm_opts)
                    });
                    match sweep {
                        Ok(s) => (m, Ok(s.best.clone()), Some(s)),
                        Err(e) => (m, Err(e), None),
                    }
                }
            }
        })
        .collect();
    let mut sweep = None;
    let fits = results
        .into_iter()
        .map(|(m, r, s)| {
            if s.is_some() {
                sweep = s;
            }
            (m, r)
        })
        .collect();
    (fits, sweep)
}
