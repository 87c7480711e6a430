//! Acceptance suite: one PASS/FAIL line per criterion.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use geoconfound::commands::{self, Globals};
use geoconfound::io::{self, AsciiGrid};
use geoconfound_core::criteria::ReplicateFit;
use geoconfound_core::inference::PCPrior;
use geoconfound_core::matern::{matern_cov, MaternParams};
use geoconfound_core::mesh::{build_mesh, Domain, Point, TriMesh};
use geoconfound_core::models::{fit_spatial, fit_spatial_plus2, Dataset, FitOptions, ModelKind, SpatialSetup, SpectralBasis};
use geoconfound_core::simstudy::{generate_replicate, FieldParams, SimConfig, SimContext, StudyPriors};
use geoconfound_core::spde::{assemble_fem, build_precision, sample_field, HyperParams};
use geoconfound_core::special::{bessel_k0, bessel_k1};
use nalgebra::{DMatrix, DVector};
use oracles::bessel::k0_k1;
use oracles::model_toys::{discrepancy, toy};
use oracles::quadrature::simpson;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Harness {
    failed: usize,
}

impl Harness {
    fn run(&mut self, id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let res = match (res, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {:.1} s, limit {} s", took.as_secs_f64(), l.as_secs())),
            (r, _) => r,
        };
        match res {
            Ok(msg) => println!("PASS criterion {id} ({name}): {msg} [{:.1} s]", took.as_secs_f64()),
            Err(msg) => {
                self.failed += 1;
                println!("FAIL criterion {id} ({name}): {msg} [{:.1} s]", took.as_secs_f64());
            }
        }
    }
}

fn oracle_equivalence() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let t = toy(seed);
        ensure(t.data.n() <= 30 && t.setup.mesh.n_vertices() <= 25, || format!("toy {seed} too large"))?;
        for kind in ModelKind::ALL {
            let (r, m, s) = discrepancy(&t, kind);
            worst = (worst.0.max(r), worst.1.max(m), worst.2.max(s));
            ensure(r < 1e-8 && m < 1e-8 && s < 1e-8, || format!("toy {seed} {}: regressor {r:.2e} mean {m:.2e} sd {s:.2e}", kind.tag()))?;
        }
    }
    Ok(format!("worst relative error: regressor {:.1e}, mean {:.1e}, sd {:.1e}", worst.0, worst.1, worst.2))
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn uniform_points(n: usize, side: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n).map(|_| Point::new(side * rng.random::<f64>(), side * rng.random::<f64>())).collect()
}

fn spectral_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 200;
    let (mut recon, mut ortho) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let pts = uniform_points(n, 10.0, &mut rng);
        let basis = SpectralBasis::new(&pts, 0.5 + 4.0 * rng.random::<f64>()).map_err(|e| e.to_string())?;
        let x = normals(n, &mut rng);
        let k = rng.random_range(0..=n);
        let s = basis.split(&x, k).map_err(|e| e.to_string())?;
        for i in 0..n {
            recon = recon.max((s.z[i] + s.z_star[i] - x[i]).abs());
        }
        ortho = ortho.max((s.s.transpose() * &s.s - DMatrix::<f64>::identity(n, n)).abs().max());
    }
    ensure(recon < 1e-10 && ortho < 1e-10, || format!("reconstruction {recon:.2e}, orthonormality {ortho:.2e}"))?;

    let pts = uniform_points(n, 10.0, &mut rng);
    let dom = Domain::new(0.0, 10.0, 0.0, 10.0).map_err(|e| e.to_string())?;
    let mesh = build_mesh(&dom, 0.8, dom.default_extension()).map_err(|e| e.to_string())?;
    let fem = assemble_fem(&mesh).map_err(|e| e.to_string())?;
    let q = build_precision(&fem, &HyperParams::new(3.0, 1.0, 1.0).unwrap()).unwrap();
    let u = mesh.project(&pts).unwrap().apply(&sample_field(&q, 9).unwrap());
    let x = normals(n, &mut rng);
    let noise = normals(n, &mut rng);
    let y: Vec<f64> = (0..n).map(|i| 2.0 * x[i] + u[i] + 0.5 * noise[i]).collect();
    let data = Dataset::new(pts.clone(), y, x, true).map_err(|e| e.to_string())?;
    let setup = SpatialSetup::new(mesh, &pts).map_err(|e| e.to_string())?;
    let priors = StudyPriors::simulation();
    let opts = FitOptions { draws: 300, ..FitOptions::default() };
    let sp = fit_spatial(&data, &setup, &priors.spatial, &opts).map_err(|e| e.to_string())?;
    let basis = SpectralBasis::new(&pts, sp.mode().rho).map_err(|e| e.to_string())?;
    let p2 = fit_spatial_plus2(&data, &setup, &priors.spatial, &basis, 0, &opts).map_err(|e| e.to_string())?;
    let (a, b) = (sp.beta(), p2.beta());
    let diff = [(a.mean, b.mean), (a.sd, b.sd), (a.q025, b.q025), (a.q975, b.q975)]
        .iter()
        .map(|(p, q)| (p - q).abs() / p.abs().max(1.0))
        .fold(0.0f64, f64::max);
    ensure(diff <= 1e-10, || format!("k = 0 differs from Spatial by {diff:.2e}"))?;
    Ok(format!("reconstruction {recon:.1e}, orthonormality {ortho:.1e}, k = 0 vs Spatial {diff:.1e}"))
}

fn special_functions() -> Outcome {
    let (lo, hi) = (1e-6f64.ln(), 50f64.ln());
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x = (lo + (hi - lo) * i as f64 / 999.0).exp();
        let (r0, r1) = k0_k1(x);
        let e0 = (bessel_k0(x).map_err(|e| e.to_string())? / r0 - 1.0).abs();
        let e1 = (bessel_k1(x).map_err(|e| e.to_string())? / r1 - 1.0).abs();
        worst = worst.max(e0).max(e1);
    }
    ensure(worst < 1e-10, || format!("Bessel relative error {worst:.2e}"))?;
    let s8 = 8f64.sqrt();
    let oracle = s8 * k0_k1(s8).1;
    let p = MaternParams::new(1.7, 2.5, 1.0).map_err(|e| e.to_string())?;
    let v = matern_cov(2.5, &p) / (1.7 * 1.7);
    ensure((v - oracle).abs() < 1e-6, || format!("Matérn at the range {v} vs {oracle}"))?;
    Ok(format!("Bessel worst {worst:.1e}; correlation at the range {v:.9} (oracle {oracle:.9})"))
}

fn square_mesh(side: f64, max_edge: f64) -> TriMesh {
    build_mesh(&Domain::new(0.0, side, 0.0, side).unwrap(), max_edge, 0.0).unwrap()
}

fn fem_gmrf() -> Outcome {
    for &(side, h) in &[(1.0, 0.1), (10.0, 0.37), (2e5, 9e3)] {
        let fem = assemble_fem(&square_mesh(side, h)).map_err(|e| e.to_string())?;
        let g1 = fem.g().mul_vec(&vec![1.0; fem.n()]);
        let scale = fem.g().diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let worst = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(worst < 1e-10 * scale, || format!("|G 1| = {worst:.2e} on side {side}"))?;
    }
    let fem = assemble_fem(&square_mesh(10.0, 0.5)).map_err(|e| e.to_string())?;
    for &rho in &[0.2, 0.7, 1.5, 4.0, 12.0] {
        for &sigma in &[0.05, 0.3, 1.0, 3.0, 20.0] {
            let q = build_precision(&fem, &HyperParams::new(rho, sigma, 1.0).unwrap()).map_err(|e| e.to_string())?;
            ensure(q.q.is_symmetric(0.0), || format!("asymmetric Q at ({rho}, {sigma})"))?;
            q.factor().map_err(|e| format!("rho {rho} sigma {sigma}: {e}"))?;
        }
    }
    let fem = assemble_fem(&square_mesh(1.0, 0.25)).map_err(|e| e.to_string())?;
    let hp = HyperParams::new(0.5, 1.0, 1.0).unwrap();
    let q = build_precision(&fem, &hp).map_err(|e| e.to_string())?;
    let cov = q.q.to_dense().try_inverse().ok_or("singular Q")?;
    let (m, draws) = (fem.n(), 2000);
    let mut acc = DMatrix::<f64>::zeros(m, m);
    for s in 0..draws {
        let u = DVector::from_vec(sample_field(&q, 1000 + s as u64).map_err(|e| e.to_string())?);
        acc += &u * u.transpose();
    }
    acc /= draws as f64;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..=i {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / draws as f64).sqrt();
            worst = worst.max((acc[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    ensure(worst < 5.0, || format!("Monte Carlo deviation {worst:.2} SE"))?;
    Ok(format!("G 1 = 0, 25/25 SPD builds, Monte Carlo worst {worst:.2} SE over {m} nodes"))
}

fn pc_prior_calibration() -> Outcome {
    let settings = [(0.05, 0.05, 3.0, 0.05), (15.0, 0.9999, 1.5, 0.0001), (6e4, 0.05, 5.0, 0.05), (0.5, 0.5, 1.0, 0.5)];
    let mut worst = 0.0f64;
    for &(rho0, a_rho, s0, a_s) in &settings {
        let pc = PCPrior::new(rho0, a_rho, s0, a_s).map_err(|e| e.to_string())?;
        let l0 = rho0.ln();
        let below = simpson(|t| (pc.range_log_density(t.exp()) + t).exp(), l0 - 60.0, l0, 400_000);
        let l0 = s0.ln();
        let above = simpson(|t| (pc.sd_log_density(t.exp()) + t).exp(), l0, l0 + 12.0, 400_000);
        let e = (below - a_rho).abs().max((above - a_s).abs());
        ensure(e < 1e-6, || format!("({rho0}, {a_rho}, {s0}, {a_s}): P(rho < rho0) = {below}, P(sigma > sigma0) = {above}"))?;
        worst = worst.max(e);
    }
    Ok(format!("{} settings, worst tail error {worst:.1e}", settings.len()))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn study_config(out: &Path, models: &str) -> String {
    format!(
        "seed = 2024\noutput_dir = {:?}\nmodels = {models}\n\n[simulation]\nn = 300\nreplicates = 20\nwrite_datasets = false\n\n[mesh]\ntarget_nodes = 600\n",
        out.display().to_string()
    )
}

fn run_study(dir: &Path, models: &str) -> Result<Vec<ReplicateFit>, String> {
    let out = dir.join("out");
    let g = Globals { config: Some(write_config(dir, &study_config(&out, models))), ..Globals::default() };
    commands::simulate(&g).map_err(|e| e.to_string())?;
    io::read_study_raw(&out.join("study_raw.csv")).map_err(|e| e.to_string())
}

fn by_replicate<'a>(rows: &'a [ReplicateFit], model: &str) -> Result<Vec<&'a geoconfound_core::criteria::FitOutcome>, String> {
    let mut v: Vec<(usize, _)> = rows.iter().filter(|r| r.model == model).map(|r| (r.replicate, r.outcome.as_ref())).collect();
    v.sort_by_key(|(r, _)| *r);
    v.into_iter().map(|(r, o)| o.ok_or_else(|| format!("{model} failed on replicate {r}"))).collect()
}

fn rsr_mean(dir: &Path) -> Outcome {
    let rows = run_study(dir, "[\"Null\", \"RSR\"]")?;
    let null = by_replicate(&rows, "Null")?;
    let rsr = by_replicate(&rows, "RSR")?;
    ensure(null.len() == 20 && rsr.len() == 20, || "expected 20 replicates".into())?;
    let worst = null.iter().zip(&rsr).map(|(a, b)| (b.beta.mean - a.beta.mean).abs() / a.beta.mean.abs()).fold(0.0f64, f64::max);
    ensure(worst < 0.02, || format!("largest relative difference {worst:.4}"))?;
    Ok(format!("largest |RSR - Null| / |Null| = {worst:.2e} over 20 replicates"))
}

struct Study {
    rows: Vec<ReplicateFit>,
    summary: Vec<u8>,
    dir: tempfile::TempDir,
}

fn table_pattern(study: &mut Option<Study>) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rows = run_study(dir.path(), "[\"Null\", \"Spatial\", \"RSR\", \"Spatial+\", \"Spatial+2.0\"]")?;
    let summary = fs::read(dir.path().join("out/study_summary.csv")).map_err(|e| e.to_string())?;
    let s = geoconfound_core::criteria::summarize_study(&rows, 3.0);
    *study = Some(Study { rows, summary, dir });
    let row = |m: &str| s.get(m).ok_or_else(|| format!("{m} missing from summary"));
    let mut parts = Vec::new();
    let mut bad = Vec::new();
    for (m, lo, hi) in [("Null", 0.7, 1.6), ("Spatial", 2.2, 3.2), ("Spatial+", 2.3, 3.3), ("Spatial+2.0", 2.6, 3.3)] {
        let r = row(m)?;
        parts.push(format!("{m} {:.3} ({:.0}%)", r.beta_hat, r.coverage));
        if !(lo..=hi).contains(&r.beta_hat) || r.n_failed > 0 {
            bad.push(format!("{m} mean {:.3} outside [{lo}, {hi}] or {} failed", r.beta_hat, r.n_failed));
        }
    }
    let (null, rsr, p2) = (row("Null")?, row("RSR")?, row("Spatial+2.0")?);
    parts.push(format!("RSR {:.3} ({:.0}%)", rsr.beta_hat, rsr.coverage));
    if null.coverage != rsr.coverage || null.coverage > 10.0 {
        bad.push(format!("coverage Null {} RSR {}", null.coverage, rsr.coverage));
    }
    if p2.coverage < 80.0 {
        bad.push(format!("Spatial+2.0 coverage {}", p2.coverage));
    }
    ensure(bad.is_empty(), || format!("{}; {}", bad.join("; "), parts.join(", ")))?;
    Ok(parts.join(", "))
}

fn rsr_variance(study: &Option<Study>) -> Outcome {
    let rows = &study.as_ref().ok_or("study run unavailable")?.rows;
    let rsr = by_replicate(rows, "RSR")?;
    let sp = by_replicate(rows, "Spatial")?;
    let ok = rsr.iter().zip(&sp).filter(|(a, b)| a.beta.sd <= b.beta.sd).count();
    ensure(ok >= 19, || format!("sd(RSR) <= sd(Spatial) on {ok}/20"))?;
    Ok(format!("sd(RSR) <= sd(Spatial) on {ok}/20 replicates"))
}

fn criteria_ordering(study: &Option<Study>) -> Outcome {
    let rows = &study.as_ref().ok_or("study run unavailable")?.rows;
    let null = by_replicate(rows, "Null")?;
    let sp = by_replicate(rows, "Spatial")?;
    let ok = null.iter().zip(&sp).filter(|(a, b)| b.waic < a.waic && b.dic < a.dic).count();
    ensure(ok * 10 >= 9 * null.len(), || format!("Spatial below Null in both criteria on {ok}/{}", null.len()))?;
    Ok(format!("WAIC and DIC of Spatial below Null on {ok}/{} replicates", null.len()))
}

fn determinism(study: &Option<Study>) -> Outcome {
    let first = study.as_ref().ok_or("study run unavailable")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_study(dir.path(), "[\"Null\", \"Spatial\", \"RSR\", \"Spatial+\", \"Spatial+2.0\"]")?;
    let again = fs::read(dir.path().join("out/study_summary.csv")).map_err(|e| e.to_string())?;
    ensure(again == first.summary, || format!("study_summary.csv differs from {}", first.dir.path().display()))?;
    Ok(format!("study_summary.csv identical ({} bytes)", again.len()))
}

/// Planted confounding on a 200 km square: `x = -z_x + ε_x`, log-response
/// `z_x + ε_y + 2`, so any effect of `x` is spurious.
fn case_study_dataset(path: &Path) -> Result<(), String> {
    let cfg = SimConfig {
        n: 445,
        replicates: 1,
        beta_true: 0.0,
        loading: -1.0,
        sigma_x2: 4.0,
        sigma_y: 0.1,
        covariate_field: FieldParams { range: 2e5, sigma: 1.0 },
        confounder_field: FieldParams { range: 2e5, sigma: 1e-6 },
        domain: Domain::new(0.0, 2e5, 0.0, 2e5).map_err(|e| e.to_string())?,
        mesh_nodes: 600,
        seed: 0,
    };
    let ctx = SimContext::new(cfg).map_err(|e| e.to_string())?;
    let d = generate_replicate(&ctx, 0).map_err(|e| e.to_string())?;
    let y: Vec<f64> = d.y.iter().map(|v| (v + 2.0).exp()).collect();
    let raw = Dataset::new(d.locations.clone(), y, d.x.clone(), true).map_err(|e| e.to_string())?;
    io::write_dataset(path, &raw).map_err(|e| e.to_string())
}

fn case_study_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data.csv");
    case_study_dataset(&data)?;
    let out = dir.path().join("out");
    let body = format!(
        "seed = 7\noutput_dir = {:?}\n\n[dataset]\npath = {:?}\nintercept = true\nlog_response = true\n\n[mesh]\ntarget_nodes = 600\n\n[priors]\npreset = \"case_study\"\n\n[prediction]\nncols = 30\n",
        out.display().to_string(),
        data.display().to_string()
    );
    let g = Globals { config: Some(write_config(dir.path(), &body)), ..Globals::default() };
    let rows = commands::fit(&g, None).map_err(|e| e.to_string())?;
    let get = |m: &str| rows.iter().find(|r| r.model == m).ok_or_else(|| format!("{m} missing from fits.csv"));
    let (null, sp, rsr, plus) = (get("Null")?, get("Spatial")?, get("RSR")?, get("Spatial+")?);
    let show = |r: &io::FitRow| format!("{} {:.3} [{:.3}, {:.3}]", r.model, r.beta_mean, r.q025, r.q975);
    let table = [null, sp, rsr, plus].map(show).join(", ");
    let mut bad = Vec::new();
    if null.q025 <= 0.0 && 0.0 <= null.q975 {
        bad.push("Null CI includes 0".to_string());
    }
    if !(sp.q025 <= 0.0 && 0.0 <= sp.q975) {
        bad.push("Spatial CI excludes 0".to_string());
    }
    let rel = (rsr.beta_mean - null.beta_mean).abs() / null.beta_mean.abs();
    if rel >= 0.02 {
        bad.push(format!("RSR differs from Null by {rel:.4}"));
    }
    if !(plus.q025 <= sp.q975 && sp.q025 <= plus.q975) {
        bad.push("Spatial+ and Spatial CIs do not overlap".to_string());
    }

    let grid = |m: &str| -> Result<AsciiGrid, String> {
        commands::predict(&g, &out.join(format!("fit_{m}.json"))).map_err(|e| e.to_string())
    };
    let (gn, gr) = (grid("null")?, grid("rsr")?);
    let mut worst = 0.0f64;
    let mut cells = 0;
    for (a, b) in gn.values.iter().zip(&gr.values) {
        if *a != gn.nodata && *b != gr.nodata {
            cells += 1;
            worst = worst.max((a - b).abs() / a.abs());
        }
    }
    if cells == 0 || worst >= 0.02 {
        bad.push(format!("Null and RSR rasters differ by {worst:.4} over {cells} cells"));
    }
    match grid("spatial_plus2") {
        Ok(_) => bad.push("Spatial+2.0 prediction was not refused".into()),
        Err(e) if !e.contains("can not be obtained numerically") => bad.push(format!("unexpected Spatial+2.0 error: {e}")),
        Err(_) => {}
    }
    ensure(bad.is_empty(), || format!("{}; {table}", bad.join("; ")))?;
    Ok(format!("{table}; rasters Null vs RSR within {worst:.1e} over {cells} cells; Spatial+2.0 prediction refused"))
}

fn main() -> ExitCode {
    let mut h = Harness { failed: 0 };
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    h.run(1, "oracle equivalence", min(1), oracle_equivalence);
    h.run(6, "spectral split", None, spectral_algebra);
    h.run(7, "special functions", None, special_functions);
    h.run(8, "FEM and GMRF", None, fem_gmrf);
    h.run(9, "PC prior calibration", None, pc_prior_calibration);
    h.run(2, "RSR mean", min(10), || rsr_mean(tempfile::tempdir().map_err(|e| e.to_string())?.path()));
    let mut study = None;
    h.run(4, "simulation table pattern", min(30), || table_pattern(&mut study));
    h.run(3, "RSR variance", None, || rsr_variance(&study));
    h.run(5, "criteria ordering", None, || criteria_ordering(&study));
    h.run(11, "determinism", min(30), || determinism(&study));
    h.run(10, "case-study pipeline", min(10), case_study_pipeline);
    println!("{} criteria failed", h.failed);
    if h.failed == 0 || std::env::var_os("ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
