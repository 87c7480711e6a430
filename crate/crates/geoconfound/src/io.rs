//! File formats: dataset CSV, mesh text, ESRI ASCII grids, study and fit
//! tables, fit artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use geoconfound_core::criteria::{ReplicateFit, StudySummary};
use geoconfound_core::models::{Dataset, KSweepRow, ModelKind, PredictiveState};
use geoconfound_core::{Domain, Point, TriMesh};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATASET_COLUMNS: [&str; 4] = ["x_coord", "y_coord", "response", "covariate"];

/// Raw dataset rows: coordinates, response and covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub locations: Vec<Point>,
    pub response: Vec<f64>,
    pub covariate: Vec<f64>,
}

impl RawDataset {
    /// Model-ready dataset; `log_response` takes the natural log of the response.
    pub fn to_dataset(&self, intercept: bool, log_response: bool) -> Result<Dataset, CliError> {
        let y = if log_response {
            if let Some(i) = self.response.iter().position(|v| !(*v > 0.0)) {
                return Err(CliError::Config(format!(
                    "log_response needs positive responses; row {} has {}",
                    i + 1,
                    self.response[i]
                )));
            }
            self.response.iter().map(|v| v.ln()).collect()
        } else {
            self.response.clone()
        };
        Dataset::new(self.locations.clone(), y, self.covariate.clone(), intercept).map_err(|e| CliError::Config(e.to_string()))
    }
}

pub fn read_dataset(path: &Path) -> Result<RawDataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read dataset {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    let mut idx = [0usize; 4];
    let mut missing = Vec::new();
    for (k, name) in DATASET_COLUMNS.iter().enumerate() {
        match headers.iter().position(|h| h == *name) {
            Some(i) => idx[k] = i,
            None => missing.push(*name),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Config(format!("{}: missing column(s) {}", path.display(), missing.join(", "))));
    }
    let mut out = RawDataset { locations: Vec::new(), response: Vec::new(), covariate: Vec::new() };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut v = [0.0; 4];
        for k in 0..4 {
            let field = rec.get(idx[k]).unwrap_or("");
            v[k] = field.parse::<f64>().map_err(|_| {
                CliError::Config(format!("{}: row {}: column {} is not a number: {field:?}", path.display(), row + 1, DATASET_COLUMNS[k]))
            })?;
            if !v[k].is_finite() {
                return Err(CliError::Config(format!("{}: row {}: non-finite {}", path.display(), row + 1, DATASET_COLUMNS[k])));
            }
        }
        out.locations.push(Point::new(v[0], v[1]));
        out.response.push(v[2]);
        out.covariate.push(v[3]);
    }
    if out.response.is_empty() {
        return Err(CliError::Config(format!("{}: dataset has no rows", path.display())));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(DATASET_COLUMNS).map_err(io_err(path))?;
    for i in 0..data.n() {
        let p = data.locations[i];
        w.write_record([p.x, p.y, data.y[i], data.x[i]].map(|v| v.to_string())).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// `m t`, then `m` lines `x y`, then `t` lines `i j k` (0-based).
pub fn mesh_to_text(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", mesh.n_vertices(), mesh.n_triangles());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {}", v.x, v.y);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn mesh_from_text(text: &str, extension: f64) -> Result<TriMesh, CliError> {
    let bad = |m: String| CliError::Config(format!("mesh file: {m}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad("empty".into()))?;
    let counts: Vec<usize> =
        header.split_whitespace().map(|t| t.parse()).collect::<Result<_, _>>().map_err(|_| bad("bad header".into()))?;
    if counts.len() != 2 {
        return Err(bad("header must be `m t`".into()));
    }
    let mut vertices = Vec::with_capacity(counts[0]);
    for _ in 0..counts[0] {
        let (ln, l) = lines.next().ok_or_else(|| bad("too few vertex lines".into()))?;
        let v: Vec<f64> =
            l.split_whitespace().map(|t| t.parse()).collect::<Result<_, _>>().map_err(|_| bad(format!("line {}", ln + 1)))?;
        if v.len() != 2 {
            return Err(bad(format!("line {}: expected `x y`", ln + 1)));
        }
        vertices.push(Point::new(v[0], v[1]));
    }
    let mut triangles = Vec::with_capacity(counts[1]);
    for _ in 0..counts[1] {
        let (ln, l) = lines.next().ok_or_else(|| bad("too few triangle lines".into()))?;
        let v: Vec<usize> =
            l.split_whitespace().map(|t| t.parse()).collect::<Result<_, _>>().map_err(|_| bad(format!("line {}", ln + 1)))?;
        if v.len() != 3 {
            return Err(bad(format!("line {}: expected `i j k`", ln + 1)));
        }
        triangles.push([v[0], v[1], v[2]]);
    }
    TriMesh::new(vertices, triangles, extension).map_err(|e| bad(e.to_string()))
}

/// ESRI ASCII raster; row 0 is the northernmost row.
#[derive(Debug, Clone, PartialEq)]
pub struct AsciiGrid {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl AsciiGrid {
    /// Square-celled grid covering `domain` with `ncols` columns.
    pub fn covering(domain: &Domain, ncols: usize, nrows: Option<usize>, nodata: f64) -> AsciiGrid {
        let (cellsize, nrows) = match nrows {
            Some(r) => ((domain.width() / ncols as f64).max(domain.height() / r as f64), r),
            None => {
                let c = domain.width() / ncols as f64;
                (c, ((domain.height() / c) - 1e-9).ceil().max(1.0) as usize)
            }
        };
        AsciiGrid { ncols, nrows, xllcorner: domain.x_min, yllcorner: domain.y_min, cellsize, nodata, values: Vec::new() }
    }

    pub fn n_cells(&self) -> usize {
        self.ncols * self.nrows
    }

    /// Cell centres in row-major order, north row first.
    pub fn centres(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.n_cells());
        for r in 0..self.nrows {
            let y = self.yllcorner + (self.nrows - r) as f64 * self.cellsize - 0.5 * self.cellsize;
            for c in 0..self.ncols {
                out.push(Point::new(self.xllcorner + (c as f64 + 0.5) * self.cellsize, y));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ncols {}", self.ncols);
        let _ = writeln!(s, "nrows {}", self.nrows);
        let _ = writeln!(s, "xllcorner {}", self.xllcorner);
        let _ = writeln!(s, "yllcorner {}", self.yllcorner);
        let _ = writeln!(s, "cellsize {}", self.cellsize);
        let _ = writeln!(s, "NODATA_value {}", self.nodata);
        for r in 0..self.nrows {
            let row: Vec<String> = self.values[r * self.ncols..(r + 1) * self.ncols].iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<AsciiGrid, CliError> {
        let bad = |m: &str| CliError::Config(format!("ASCII grid: {m}"));
        let mut tokens = text.split_whitespace();
        let mut header = std::collections::HashMap::new();
        for _ in 0..6 {
            let k = tokens.next().ok_or_else(|| bad("truncated header"))?.to_ascii_lowercase();
            let v: f64 = tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad header value"))?;
            header.insert(k, v);
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let ncols = get("ncols")? as usize;
        let nrows = get("nrows")? as usize;
        let values: Vec<f64> = tokens.map(|t| t.parse()).collect::<Result<_, _>>().map_err(|_| bad("non-numeric cell"))?;
        if values.len() != ncols * nrows {
            return Err(bad(&format!("expected {} cells, found {}", ncols * nrows, values.len())));
        }
        Ok(AsciiGrid {
            ncols,
            nrows,
            xllcorner: get("xllcorner")?,
            yllcorner: get("yllcorner")?,
            cellsize: get("cellsize")?,
            nodata: get("nodata_value")?,
            values,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    replicate: usize,
    model: String,
    beta_mean: Option<f64>,
    beta_sd: Option<f64>,
    q025: Option<f64>,
    q975: Option<f64>,
    dic: Option<f64>,
    waic: Option<f64>,
    k_selected: Option<usize>,
}

pub fn write_study_raw(path: &Path, fits: &[ReplicateFit]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    for f in fits {
        let o = f.outcome.as_ref();
        w.serialize(RawRow {
            replicate: f.replicate,
            model: f.model.clone(),
            beta_mean: o.map(|o| o.beta.mean),
            beta_sd: o.map(|o| o.beta.sd),
            q025: o.map(|o| o.beta.q025),
            q975: o.map(|o| o.beta.q975),
            dic: o.map(|o| o.dic),
            waic: o.map(|o| o.waic),
            k_selected: o.and_then(|o| o.k_kept),
        })
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_study_raw(path: &Path) -> Result<Vec<ReplicateFit>, CliError> {
    use geoconfound_core::criteria::FitOutcome;
    use geoconfound_core::inference::Summary;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<RawRow>() {
        let r = row.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let outcome = match (r.beta_mean, r.beta_sd, r.q025, r.q975, r.dic, r.waic) {
            (Some(mean), Some(sd), Some(q025), Some(q975), Some(dic), Some(waic)) => {
                Some(FitOutcome { beta: Summary { mean, sd, q025, q975 }, dic, waic, k_kept: r.k_selected })
            }
            _ => None,
        };
        out.push(ReplicateFit { replicate: r.replicate, model: r.model, outcome });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    beta_hat: f64,
    esd: f64,
    mean_se: f64,
    dic: f64,
    waic: f64,
    coverage: f64,
    n_fits: usize,
    n_failed: usize,
}

pub fn write_study_summary(path: &Path, s: &StudySummary) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    for r in &s.rows {
        w.serialize(SummaryRow {
            model: &r.model,
            beta_hat: r.beta_hat,
            esd: r.esd,
            mean_se: r.mean_se,
            dic: r.dic,
            waic: r.waic,
            coverage: r.coverage,
            n_fits: r.n_fits,
            n_failed: r.n_failed,
        })
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One row of `fits.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub model: String,
    pub beta_mean: f64,
    pub q025: f64,
    pub q975: f64,
    #[serde(rename = "DIC")]
    pub dic: f64,
    #[serde(rename = "WAIC")]
    pub waic: f64,
    #[serde(rename = "SE")]
    pub se: f64,
}

pub fn write_fits(path: &Path, rows: &[FitRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    for r in rows {
        w.serialize(r).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_fits(path: &Path) -> Result<Vec<FitRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    rdr.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_ksweep(path: &Path, table: &[KSweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(["k_kept", "waic"]).map_err(io_err(path))?;
    for r in table {
        w.write_record([r.k_kept.to_string(), r.waic.map(|v| v.to_string()).unwrap_or_default()]).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Mesh construction parameters, enough to rebuild the mesh bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub domain: Domain,
    pub max_edge: f64,
    pub extension: f64,
}

/// Everything `predict` needs from a `fit` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub model: ModelKind,
    pub dataset: Dataset,
    pub log_response: bool,
    pub mesh: Option<MeshSpec>,
    pub state: PredictiveState,
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(io_err(path))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_artifact(path: &Path) -> Result<FitArtifact, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read fit artifact {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// File-name friendly model tag.
pub fn slug(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Null => "null",
        ModelKind::Spatial => "spatial",
        ModelKind::Rsr => "rsr",
        ModelKind::SpatialPlus => "spatial_plus",
        ModelKind::SpatialPlus2 => "spatial_plus2",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use geoconfound_core::mesh::build_mesh;

    #[test]
    fn mesh_text_round_trip() {
        let m = build_mesh(&Domain::new(0.0, 1.0, 0.0, 2.0).unwrap(), 0.5, 0.25).unwrap();
        let back = mesh_from_text(&mesh_to_text(&m), 0.25).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
    }

    #[test]
    fn grid_round_trip_and_orientation() {
        let mut g = AsciiGrid::covering(&Domain::new(0.0, 4.0, 0.0, 2.0).unwrap(), 4, None, -9999.0);
        assert_eq!(g.nrows, 2);
        let c = g.centres();
        assert_eq!(c[0], Point::new(0.5, 1.5));
        assert_eq!(c[7], Point::new(3.5, 0.5));
        g.values = (0..8).map(|v| v as f64 * 0.5).collect();
        assert_eq!(AsciiGrid::parse(&g.to_text()).unwrap(), g);
    }
}
