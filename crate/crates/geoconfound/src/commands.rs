//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use geoconfound_core::criteria::{morans_i, summarize_study, NeighborRule, ReplicateFit, StudySummary};
use geoconfound_core::mesh::{build_mesh, max_edge_for_target};
use geoconfound_core::models::{nearest_covariate, predict_grid, Dataset, ModelKind, PredictionInputs, SpatialSetup};
use geoconfound_core::simstudy::{generate_replicate, SimContext};
use geoconfound_core::{Domain, Error};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::io::{self, AsciiGrid, FitArtifact, FitRow, MeshSpec};
use crate::runner::{self, fit_dataset};
use crate::CliError;

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Globals {
    fn load(&self) -> Result<RunConfig, CliError> {
        let path = self.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
        RunConfig::load(path)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        self.seed.unwrap_or_else(|| cfg.seed())
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Simulated replicates, study tables and optionally the replicate datasets.
pub fn simulate(g: &Globals) -> Result<StudySummary, CliError> {
    let cfg = g.load()?;
    let seed = g.seed(&cfg);
    let sim = cfg.sim_config(seed)?;
    let priors = cfg.priors_for(true)?;
    let opts = cfg.study_options(sim.n, seed)?;
    let write_datasets = cfg.simulation.as_ref().is_some_and(|s| s.write_datasets);
    let pool = runner::thread_pool(g.threads)?;
    let out = g.out_dir(&cfg);

    let ctx = SimContext::new(sim).map_err(runtime)?;
    log::info!(
        "simulating {} replicates of n = {} on a {}-node mesh",
        ctx.config.replicates,
        ctx.config.n,
        ctx.mesh.n_vertices()
    );
    let results = pool.install(|| runner::run_study(&ctx, &priors, &opts));

    create_dir(&out)?;
    if write_datasets {
        let dir = out.join("datasets");
        create_dir(&dir)?;
        pool.install(|| {
            (0..ctx.config.replicates).into_par_iter().try_for_each(|rep| {
                let d = generate_replicate(&ctx, rep).map_err(runtime)?;
                io::write_dataset(&dir.join(format!("replicate_{rep:03}.csv")), &d)
            })
        })?;
    }
    let mut rows: Vec<ReplicateFit> = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in &results {
        match r {
            Ok(res) => {
                for (m, f) in &res.fits {
                    if let Err(e) = f {
                        failures.push(format!("replicate {rep}, {}: {e}", m.tag()));
                    }
                }
                rows.extend(res.rows());
            }
            Err(e) => {
                failures.push(format!("replicate {rep}: {e}"));
                rows.extend(opts.models.iter().map(|m| ReplicateFit { replicate: *rep, model: m.tag().into(), outcome: None }));
            }
        }
    }
    let summary = summarize_study(&rows, ctx.config.beta_true);
    io::write_study_raw(&out.join("study_raw.csv"), &rows)?;
    io::write_study_summary(&out.join("study_summary.csv"), &summary)?;
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!("{} fit(s) failed:\n  {}", failures.len(), failures.join("\n  "))));
    }
    Ok(summary)
}

/// Dataset, mesh and projector for the dataset commands.
struct Prepared {
    cfg: RunConfig,
    data: Dataset,
    log_response: bool,
    mesh: MeshSpec,
    setup: SpatialSetup,
    out: PathBuf,
    seed: u64,
}

fn prepare(g: &Globals, data_path: Option<&Path>) -> Result<Prepared, CliError> {
    let cfg = g.load()?;
    let section = cfg.dataset.clone();
    let path = data_path
        .map(Path::to_path_buf)
        .or_else(|| section.as_ref().and_then(|s| s.path.clone()))
        .ok_or_else(|| CliError::Config("no dataset: pass --data or set [dataset] path".into()))?;
    let intercept = section.as_ref().map_or(true, |s| s.intercept);
    let log_response = section.as_ref().is_some_and(|s| s.log_response);
    let raw = io::read_dataset(&path)?;
    let data = raw.to_dataset(intercept, log_response)?;

    let domain = match cfg.mesh.domain {
        Some(d) => Domain::new(d[0], d[1], d[2], d[3]).map_err(|e| CliError::Config(e.to_string()))?,
        None => Domain::bounding(&data.locations).map_err(|e| CliError::Config(format!("dataset locations: {e}")))?,
    };
    let extension = cfg.mesh.extension.unwrap_or_else(|| domain.default_extension());
    let max_edge = match cfg.mesh.max_edge {
        Some(e) => e,
        None => max_edge_for_target(&domain, extension, cfg.mesh.target_nodes.unwrap_or(1000)).map_err(runtime)?,
    };
    let mesh = build_mesh(&domain, max_edge, extension).map_err(runtime)?;
    let outside: Vec<String> =
        data.locations.iter().enumerate().filter(|(_, p)| mesh.locate(p).is_none()).map(|(i, _)| (i + 1).to_string()).collect();
    if !outside.is_empty() {
        return Err(CliError::Runtime(format!("locations outside the mesh hull at row(s) {}", outside.join(", "))));
    }
    let setup = SpatialSetup::new(mesh, &data.locations).map_err(runtime)?;
    let out = g.out_dir(&cfg);
    let seed = g.seed(&cfg);
    Ok(Prepared { cfg, data, log_response, mesh: MeshSpec { domain, max_edge, extension }, setup, out, seed })
}

/// Fits every configured model; writes `fits.csv`, artifacts, `mesh.txt`
/// and `moran.csv`.
pub fn fit(g: &Globals, data_path: Option<&Path>) -> Result<Vec<FitRow>, CliError> {
    let p = prepare(g, data_path)?;
    let priors = p.cfg.priors_for(false)?;
    let opts = p.cfg.study_options(p.data.n(), p.seed)?;
    let pool = runner::thread_pool(g.threads)?;
    let (fits, sweep) =
        pool.install(|| fit_dataset(&p.data, &p.setup, &priors, &opts, p.cfg.spatial_plus2.reference_range));

    create_dir(&p.out)?;
    fs::write(p.out.join("mesh.txt"), io::mesh_to_text(&p.setup.mesh)).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (m, r) in &fits {
        match r {
            Ok(f) => {
                let b = f.beta();
                rows.push(FitRow {
                    model: m.tag().into(),
                    beta_mean: b.mean,
                    q025: b.q025,
                    q975: b.q975,
                    dic: f.dic,
                    waic: f.waic.waic,
                    se: b.sd,
                });
                let artifact = FitArtifact {
                    model: *m,
                    dataset: p.data.clone(),
                    log_response: p.log_response,
                    mesh: Some(p.mesh),
                    state: f.predictive_state(opts.fit.beta_sd),
                };
                io::write_json(&p.out.join(format!("fit_{}.json", io::slug(*m))), &artifact)?;
                log::info!("{}: beta = {:.4} [{:.4}, {:.4}]", m.tag(), b.mean, b.q025, b.q975);
                if *m == ModelKind::Null && p.cfg.moran.enabled {
                    moran_prescreen(&p, f)?;
                }
            }
            Err(e) => failures.push(format!("{}: {e}", m.tag())),
        }
    }
    if let Some(s) = &sweep {
        log::info!("Spatial+ 2.0 keeps {} of {} eigenvectors", s.k_kept(), p.data.n());
    }
    io::write_fits(&p.out.join("fits.csv"), &rows)?;
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!("{} model(s) failed:\n  {}", failures.len(), failures.join("\n  "))));
    }
    Ok(rows)
}

fn moran_prescreen(p: &Prepared, null: &geoconfound_core::models::FitResult) -> Result<(), CliError> {
    let beta: Vec<f64> = null.fixed.iter().map(|s| s.mean).collect();
    let f = p.data.design(&p.data.x);
    let resid: Vec<f64> = (0..p.data.n()).map(|i| p.data.y[i] - (0..f.ncols()).map(|c| f[(i, c)] * beta[c]).sum::<f64>()).collect();
    let rule = match (p.cfg.moran.distance, p.cfg.moran.neighbors) {
        (Some(d), _) => NeighborRule::Distance(d),
        (None, Some(k)) => NeighborRule::KNearest(k),
        (None, None) => NeighborRule::default(),
    };
    match morans_i(&resid, &p.data.locations, rule) {
        Ok(m) => {
            log::info!("Moran's I of Null residuals: I = {:.4}, z = {:.2}, p = {:.3e}", m.i, m.z_score, m.p_value);
            let path = p.out.join("moran.csv");
            let text = format!("i,expected,variance,z_score,p_value\n{},{},{},{},{}\n", m.i, m.expected, m.variance, m.z_score, m.p_value);
            fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        }
        Err(e) => {
            log::warn!("Moran's I pre-screen skipped: {e}");
            Ok(())
        }
    }
}

/// Spatial+ 2.0 WAIC against the number of kept eigenvectors; writes
/// `ksweep.csv` and `k_selected.txt`.
pub fn sweep_k(g: &Globals, data_path: Option<&Path>) -> Result<runner::KSweep, CliError> {
    let p = prepare(g, data_path)?;
    let priors = p.cfg.priors_for(false)?;
    let mut opts = p.cfg.study_options(p.data.n(), p.seed)?;
    let pool = runner::thread_pool(g.threads)?;
    let rho = match p.cfg.spatial_plus2.reference_range {
        Some(r) => r,
        None => {
            let sp = pool
                .install(|| geoconfound_core::models::fit_spatial(&p.data, &p.setup, &priors.spatial, &opts.fit))
                .map_err(runtime)?;
            opts.fit.start = Some(sp.mode());
            sp.mode().rho
        }
    };
    let basis = geoconfound_core::models::SpectralBasis::new(&p.data.locations, rho).map_err(runtime)?;
    let sweep = pool
        .install(|| runner::sweep_k(&p.data, &p.setup, &priors.spatial_plus2, &basis, &opts.k_kept_grid, opts.min_keep, &opts.fit))
        .map_err(|e| match e {
            Error::Configuration(m) => CliError::Config(m),
            e => runtime(e),
        })?;
    create_dir(&p.out)?;
    io::write_ksweep(&p.out.join("ksweep.csv"), &sweep.table)?;
    fs::write(p.out.join("k_selected.txt"), format!("{}\n", sweep.k_kept())).map_err(|e| CliError::Runtime(e.to_string()))?;
    log::info!("selected {} kept eigenvectors (basis range {rho:.4})", sweep.k_kept());
    Ok(sweep)
}

/// Posterior-median raster of a fitted model; writes `prediction_<model>.asc`.
pub fn predict(g: &Globals, artifact_path: &Path) -> Result<AsciiGrid, CliError> {
    let cfg = g.load()?;
    let art = io::read_artifact(artifact_path)?;
    if art.model == ModelKind::SpatialPlus2 {
        let e = predict_grid(&art.state, &art.dataset, None, &PredictionInputs { points: &[], covariate: &[], exponentiate: false })
            .expect_err("Spatial+ 2.0 prediction is refused");
        return Err(runtime(e));
    }
    let pc = &cfg.prediction;
    let domain = match (pc.domain, &art.mesh) {
        (Some(d), _) => Domain::new(d[0], d[1], d[2], d[3]).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(m)) => m.domain,
        (None, None) => Domain::bounding(&art.dataset.locations).map_err(runtime)?,
    };
    let mut grid = AsciiGrid::covering(&domain, pc.ncols, pc.nrows, pc.nodata);
    if grid.n_cells() > pc.max_pixels {
        return Err(CliError::Runtime(format!(
            "raster of {} x {} = {} pixels exceeds max_pixels = {} (about {} MB of covariance work)",
            grid.ncols,
            grid.nrows,
            grid.n_cells(),
            pc.max_pixels,
            grid.n_cells() * 8 * 16 / 1_000_000
        )));
    }
    let setup = match &art.mesh {
        Some(m) => {
            let mesh = build_mesh(&m.domain, m.max_edge, m.extension).map_err(runtime)?;
            Some(SpatialSetup::new(mesh, &art.dataset.locations).map_err(runtime)?)
        }
        None => None,
    };
    let centres = grid.centres();
    let inside: Vec<usize> = match &setup {
        Some(s) => (0..centres.len()).filter(|&i| s.mesh.locate(&centres[i]).is_some()).collect(),
        None => (0..centres.len()).collect(),
    };
    let points: Vec<_> = inside.iter().map(|&i| centres[i]).collect();
    let covariate: Vec<f64> = match &pc.covariate_grid {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let cg = AsciiGrid::parse(&text)?;
            if cg.ncols != grid.ncols || cg.nrows != grid.nrows {
                return Err(CliError::Config(format!(
                    "covariate grid is {} x {}, prediction grid is {} x {}",
                    cg.ncols, cg.nrows, grid.ncols, grid.nrows
                )));
            }
            inside.iter().map(|&i| cg.values[i]).collect()
        }
        None => nearest_covariate(&art.dataset, &points),
    };
    let inputs = PredictionInputs { points: &points, covariate: &covariate, exponentiate: art.log_response };
    let values = predict_grid(&art.state, &art.dataset, setup.as_ref(), &inputs).map_err(runtime)?;
    grid.values = vec![pc.nodata; grid.n_cells()];
    for (k, &i) in inside.iter().enumerate() {
        grid.values[i] = values[k];
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    log::info!("{} posterior median range: [{lo:.4}, {hi:.4}] over {} pixels", art.model.tag(), values.len());
    let out = g.out_dir(&cfg);
    create_dir(&out)?;
    let path = out.join(format!("prediction_{}.asc", io::slug(art.model)));
    fs::write(&path, grid.to_text()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(grid)
}

/// Table-1 (study) or Table-2 (fits) style text table from a CSV written by
/// `simulate` or `fit`. Re-derives `study_summary.csv` from a raw table.
pub fn report(g: &Globals, input: Option<&Path>, true_beta: Option<f64>) -> Result<String, CliError> {
    let cfg = match &g.config {
        Some(_) => Some(g.load()?),
        None => None,
    };
    let out = g.out.clone().or_else(|| cfg.as_ref().map(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from("out"));
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| out.join("study_raw.csv"));
    let header = fs::read_to_string(&input)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", input.display())))?
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();
    let text = if header.starts_with("replicate") {
        let rows = io::read_study_raw(&input)?;
        let beta = true_beta
            .or_else(|| cfg.as_ref().and_then(|c| c.simulation.as_ref()).map(|s| s.beta_true))
            .unwrap_or(3.0);
        let s = summarize_study(&rows, beta);
        create_dir(&out)?;
        io::write_study_summary(&out.join("study_summary.csv"), &s)?;
        let mut t = format!("{:<12} {:>8} {:>8} {:>8} {:>10} {:>10} {:>6}\n", "model", "beta", "ESD", "SE", "DIC", "WAIC", "CI%");
        for r in &s.rows {
            t.push_str(&format!(
                "{:<12} {:>8.3} {:>8.3} {:>8.3} {:>10.3} {:>10.3} {:>6.0}\n",
                r.model, r.beta_hat, r.esd, r.mean_se, r.dic, r.waic, r.coverage
            ));
        }
        t
    } else {
        let rows = io::read_fits(&input)?;
        let mut t = format!("{:<12} {:>9} {:>9} {:>9} {:>10} {:>10} {:>8}\n", "model", "beta", "q025", "q975", "DIC", "WAIC", "SE");
        for r in &rows {
            t.push_str(&format!(
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>10.2} {:>10.2} {:>8.4}\n",
                r.model, r.beta_mean, r.q025, r.q975, r.dic, r.waic, r.se
            ));
        }
        t
    };
    Ok(text)
}
