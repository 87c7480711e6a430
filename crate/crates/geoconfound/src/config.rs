//! Run configuration: a TOML file validated in full before any computation.

use std::path::{Path, PathBuf};

use geoconfound_core::inference::{GridSpec, PCPrior, DEFAULT_BETA_SD};
use geoconfound_core::models::{FitOptions, ModelKind, ModelPriors};
use geoconfound_core::simstudy::{FieldParams, SimConfig, StudyOptions, StudyPriors};
use geoconfound_core::Domain;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    pub dataset: Option<DatasetSection>,
    pub simulation: Option<SimulationSection>,
    #[serde(default)]
    pub mesh: MeshSection,
    #[serde(default)]
    pub priors: PriorsSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub spatial_plus2: KSection,
    #[serde(default)]
    pub prediction: PredictionSection,
    #[serde(default)]
    pub moran: MoranSection,

    #[serde(skip)]
    source: String,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_models() -> Vec<String> {
    ModelKind::ALL.iter().map(|m| m.tag().to_string()).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub log_response: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub range: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n: usize,
    pub replicates: usize,
    pub beta_true: f64,
    pub loading: f64,
    pub sigma_x2: f64,
    pub sigma_y: f64,
    pub covariate_field: FieldSection,
    pub confounder_field: FieldSection,
    /// `[x_min, x_max, y_min, y_max]`
    pub domain: [f64; 4],
    pub write_datasets: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        SimulationSection {
            n: d.n,
            replicates: d.replicates,
            beta_true: d.beta_true,
            loading: d.loading,
            sigma_x2: d.sigma_x2,
            sigma_y: d.sigma_y,
            covariate_field: FieldSection { range: d.covariate_field.range, sigma: d.covariate_field.sigma },
            confounder_field: FieldSection { range: d.confounder_field.range, sigma: d.confounder_field.sigma },
            domain: [d.domain.x_min, d.domain.x_max, d.domain.y_min, d.domain.y_max],
            write_datasets: true,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub target_nodes: Option<usize>,
    pub max_edge: Option<f64>,
    pub extension: Option<f64>,
    /// Analysis window for dataset fits; defaults to the data bounding box.
    pub domain: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub rho0: f64,
    pub alpha_rho: f64,
    pub sigma0: f64,
    pub alpha_sigma: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsSection {
    /// `simulation` or `case_study`.
    pub preset: Option<String>,
    pub spatial: Option<PriorSection>,
    pub rsr: Option<PriorSection>,
    pub spatial_plus_stage1: Option<PriorSection>,
    pub spatial_plus_stage2: Option<PriorSection>,
    pub spatial_plus2: Option<PriorSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub coarse_points: usize,
    pub coarse_half_width: f64,
    pub refine_points: usize,
    pub refine_z: f64,
    pub max_log_sd: f64,
    pub draws: usize,
    pub beta_sd: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let g = GridSpec::default();
        InferenceSection {
            coarse_points: g.coarse_points,
            coarse_half_width: g.coarse_half_width,
            refine_points: g.refine_points,
            refine_z: g.refine_z,
            max_log_sd: g.max_log_sd,
            draws: 1000,
            beta_sd: DEFAULT_BETA_SD,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KSection {
    /// Candidate numbers of kept eigenvectors; default n, 0.9n, ..., 0.1n.
    pub k_kept: Option<Vec<usize>>,
    pub min_keep: usize,
    /// Range of the eigenbasis; default the Spatial posterior mode.
    pub reference_range: Option<f64>,
}

impl Default for KSection {
    fn default() -> Self {
        KSection { k_kept: None, min_keep: 20, reference_range: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionSection {
    pub ncols: usize,
    pub nrows: Option<usize>,
    pub domain: Option<[f64; 4]>,
    /// ASCII grid holding the covariate at every pixel; otherwise the nearest
    /// observed covariate is used.
    pub covariate_grid: Option<PathBuf>,
    pub max_pixels: usize,
    pub nodata: f64,
}

impl Default for PredictionSection {
    fn default() -> Self {
        PredictionSection { ncols: 100, nrows: None, domain: None, covariate_grid: None, max_pixels: 4_000_000, nodata: -9999.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoranSection {
    pub enabled: bool,
    pub neighbors: Option<usize>,
    pub distance: Option<f64>,
}

impl Default for MoranSection {
    fn default() -> Self {
        MoranSection { enabled: true, neighbors: None, distance: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.source = text.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    fn fail(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        match line_of(&self.source, key) {
            Some(l) => CliError::Config(format!("line {l}: `{key}`: {msg}")),
            None => CliError::Config(format!("`{key}`: {msg}")),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model_kinds()?;
        if let Some(s) = &self.simulation {
            self.sim_config_from(s)?;
        }
        self.grid_spec()?;
        let inf = &self.inference;
        if inf.draws < 2 {
            return Err(self.fail("draws", "needs at least 2 posterior draws"));
        }
        if !(inf.beta_sd > 0.0) {
            return Err(self.fail("beta_sd", "must be positive"));
        }
        if let Some(p) = &self.priors.preset {
            if !matches!(p.as_str(), "simulation" | "case_study") {
                return Err(self.fail("preset", format!("unknown preset {p:?} (expected simulation or case_study)")));
            }
        }
        self.priors_for(false)?;
        let m = &self.mesh;
        if let Some(t) = m.target_nodes {
            if t < 4 {
                return Err(self.fail("target_nodes", "must be >= 4"));
            }
        }
        if let Some(e) = m.max_edge {
            if !(e > 0.0 && e.is_finite()) {
                return Err(self.fail("max_edge", "must be positive"));
            }
        }
        if let Some(e) = m.extension {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(self.fail("extension", "must be >= 0"));
            }
        }
        if let Some(d) = m.domain {
            domain_of(d).map_err(|e| self.fail("domain", e))?;
        }
        if let Some(k) = &self.spatial_plus2.k_kept {
            if k.is_empty() {
                return Err(self.fail("k_kept", "needs at least one candidate"));
            }
        }
        if let Some(r) = self.spatial_plus2.reference_range {
            if !(r > 0.0 && r.is_finite()) {
                return Err(self.fail("reference_range", "must be positive"));
            }
        }
        let p = &self.prediction;
        if p.ncols == 0 || p.nrows == Some(0) {
            return Err(self.fail("ncols", "raster needs at least one row and column"));
        }
        if let Some(d) = p.domain {
            domain_of(d).map_err(|e| self.fail("domain", e))?;
        }
        if self.moran.neighbors == Some(0) {
            return Err(self.fail("neighbors", "must be >= 1"));
        }
        if let Some(d) = self.moran.distance {
            if !(d > 0.0) {
                return Err(self.fail("distance", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn model_kinds(&self) -> Result<Vec<ModelKind>, CliError> {
        if self.models.is_empty() {
            return Err(self.fail("models", "no models requested"));
        }
        let mut out = Vec::new();
        for m in &self.models {
            let k = ModelKind::parse(m).ok_or_else(|| {
                self.fail("models", format!("unknown model {m:?} (expected Null, Spatial, RSR, Spatial+ or Spatial+2.0)"))
            })?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        Ok(out)
    }

    pub fn grid_spec(&self) -> Result<GridSpec, CliError> {
        let i = &self.inference;
        let g = GridSpec {
            coarse_points: i.coarse_points,
            coarse_half_width: i.coarse_half_width,
            refine_points: i.refine_points,
            refine_z: i.refine_z,
            max_log_sd: i.max_log_sd,
        };
        g.validate().map_err(|e| self.fail("refine_points", e))?;
        Ok(g)
    }

    pub fn fit_options(&self, seed: u64) -> Result<FitOptions, CliError> {
        Ok(FitOptions {
            grid: self.grid_spec()?,
            beta_sd: self.inference.beta_sd,
            draws: self.inference.draws,
            seed,
            start: None,
        })
    }

    pub fn study_options(&self, n: usize, seed: u64) -> Result<StudyOptions, CliError> {
        let mut o = StudyOptions::for_n(n);
        o.models = self.model_kinds()?;
        o.fit = self.fit_options(seed)?;
        if let Some(k) = &self.spatial_plus2.k_kept {
            o.k_kept_grid = k.clone();
        }
        o.min_keep = self.spatial_plus2.min_keep;
        Ok(o)
    }

    /// Preset priors with per-model overrides. `simulate` defaults to the
    /// simulation preset, dataset commands to the case-study preset.
    pub fn priors_for(&self, simulation: bool) -> Result<StudyPriors, CliError> {
        let mut p = match self.priors.preset.as_deref() {
            Some("simulation") => StudyPriors::simulation(),
            Some("case_study") => StudyPriors::case_study(),
            _ if simulation => StudyPriors::simulation(),
            _ => StudyPriors::case_study(),
        };
        let set = |slot: &mut ModelPriors, s: &Option<PriorSection>, key: &str| -> Result<(), CliError> {
            if let Some(s) = s {
                let pc = PCPrior::new(s.rho0, s.alpha_rho, s.sigma0, s.alpha_sigma).map_err(|e| self.fail(key, e))?;
                *slot = ModelPriors::new(pc);
            }
            Ok(())
        };
        set(&mut p.spatial, &self.priors.spatial, "spatial")?;
        set(&mut p.rsr, &self.priors.rsr, "rsr")?;
        set(&mut p.spatial_plus_stage1, &self.priors.spatial_plus_stage1, "spatial_plus_stage1")?;
        set(&mut p.spatial_plus_stage2, &self.priors.spatial_plus_stage2, "spatial_plus_stage2")?;
        set(&mut p.spatial_plus2, &self.priors.spatial_plus2, "spatial_plus2")?;
        Ok(p)
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig, CliError> {
        let s = self.simulation.as_ref().ok_or_else(|| CliError::Config("config has no [simulation] section".into()))?;
        let mut c = self.sim_config_from(s)?;
        c.seed = seed;
        Ok(c)
    }

    fn sim_config_from(&self, s: &SimulationSection) -> Result<SimConfig, CliError> {
        let domain = domain_of(s.domain).map_err(|e| self.fail("domain", e))?;
        let c = SimConfig {
            n: s.n,
            replicates: s.replicates,
            beta_true: s.beta_true,
            loading: s.loading,
            sigma_x2: s.sigma_x2,
            sigma_y: s.sigma_y,
            covariate_field: FieldParams { range: s.covariate_field.range, sigma: s.covariate_field.sigma },
            confounder_field: FieldParams { range: s.confounder_field.range, sigma: s.confounder_field.sigma },
            domain,
            mesh_nodes: self.mesh.target_nodes.unwrap_or(SimConfig::default().mesh_nodes),
            seed: 0,
        };
        if let Err(e) = c.validate() {
            let key = if s.n < 10 {
                "n"
            } else if s.replicates < 1 {
                "replicates"
            } else if !(s.sigma_x2 > 0.0) {
                "sigma_x2"
            } else if !(s.sigma_y > 0.0) {
                "sigma_y"
            } else {
                "simulation"
            };
            let msg = match e {
                geoconfound_core::Error::Configuration(m) => m,
                other => other.to_string(),
            };
            return Err(self.fail(key, msg));
        }
        Ok(c)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

fn domain_of(d: [f64; 4]) -> Result<Domain, String> {
    Domain::new(d[0], d[1], d[2], d[3]).map_err(|e| e.to_string())
}

/// 1-based line of the first assignment to `key` (or table header naming it).
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
            || t.starts_with('[') && t.trim_end().trim_matches(|c| c == '[' || c == ']').rsplit('.').next() == Some(key)
    })
    .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("seeed = 3\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("seeed"));
    }

    #[test]
    fn negative_n_reports_line() {
        let err = RunConfig::parse("seed = 1\n[simulation]\nn = -5\n").unwrap_err();
        assert!(err.to_string().contains("line 3") || err.to_string().contains("3 |"), "{err}");
        let err = RunConfig::parse("[simulation]\nn = 5\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn defaults_parse() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model_kinds().unwrap().len(), 5);
        assert_eq!(c.priors_for(true).unwrap(), StudyPriors::simulation());
        assert_eq!(c.priors_for(false).unwrap(), StudyPriors::case_study());
    }
}
