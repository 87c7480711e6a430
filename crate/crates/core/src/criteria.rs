//! WAIC, DIC, Moran's I and replicate-ensemble summaries.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::inference::Summary;
use crate::mesh::Point;
use crate::special::log_sum_exp;

/// `n × d` log predictive densities (rows: observations, columns: draws),
/// stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseLogLik {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl PointwiseLogLik {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::InvalidInput(alloc::format!("{} values for a {n} x {d} matrix", values.len())));
        }
        Ok(PointwiseLogLik { n, d, values })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        PointwiseLogLik { n, d, values: vec![0.0; n * d] }
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_draws(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.d + j] = v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Waic {
    pub waic: f64,
    pub p_waic: f64,
    pub lppd: f64,
}

pub fn waic(ll: &PointwiseLogLik) -> Result<Waic> {
    if ll.d < 2 {
        return Err(Error::InvalidInput("WAIC needs at least two draws".into()));
    }
    if ll.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite pointwise log-likelihood".into()));
    }
    let d = ll.d as f64;
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for i in 0..ll.n {
        let row = ll.row(i);
        lppd += log_sum_exp(row) - libm::log(d);
        let mean = row.iter().sum::<f64>() / d;
        p_waic += row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (d - 1.0);
    }
    Ok(Waic { waic: -2.0 * (lppd - p_waic), p_waic, lppd })
}

/// `DIC = D(θ̄) + 2 p_D` with `p_D = mean(D) − D(θ̄)`.
pub fn dic(deviance_draws: &[f64], deviance_at_mean: f64) -> Result<f64> {
    if deviance_draws.len() < 2 {
        return Err(Error::InvalidInput("DIC needs at least two deviance draws".into()));
    }
    let mean = deviance_draws.iter().sum::<f64>() / deviance_draws.len() as f64;
    Ok(deviance_at_mean + 2.0 * (mean - deviance_at_mean))
}

/// Neighbour definition for Moran's I.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum NeighborRule {
    /// `k` nearest other locations (ties by index).
    KNearest(usize),
    /// Every other location within this distance.
    Distance(f64),
}

impl Default for NeighborRule {
    fn default() -> Self {
        NeighborRule::KNearest(8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MoranResult {
    pub i: f64,
    pub expected: f64,
    pub variance: f64,
    pub z_score: f64,
    pub p_value: f64,
}

/// Row-standardized spatial weights as neighbour lists.
pub fn neighbor_lists(locations: &[Point], rule: NeighborRule) -> Result<Vec<Vec<usize>>> {
    let n = locations.len();
    let mut out = Vec::with_capacity(n);
    match rule {
        NeighborRule::KNearest(k) => {
            if k == 0 || k >= n {
                return Err(Error::InvalidInput(alloc::format!("k = {k} nearest neighbours with {n} locations")));
            }
            let mut d: Vec<(f64, usize)> = Vec::with_capacity(n);
            for i in 0..n {
                d.clear();
                d.extend((0..n).filter(|&j| j != i).map(|j| (locations[i].distance(&locations[j]), j)));
                d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut nb: Vec<usize> = d[..k].iter().map(|e| e.1).collect();
                nb.sort_unstable();
                out.push(nb);
            }
        }
        NeighborRule::Distance(r) => {
            if !(r > 0.0) {
                return Err(Error::InvalidInput("distance threshold must be positive".into()));
            }
            for i in 0..n {
                out.push((0..n).filter(|&j| j != i && locations[i].distance(&locations[j]) <= r).collect());
            }
        }
    }
    if out.iter().all(|nb| nb.is_empty()) {
        return Err(Error::InvalidInput("spatial weight matrix is empty".into()));
    }
    Ok(out)
}

/// Moran's I with row-standardized weights, normality z-score and two-sided p.
pub fn morans_i(values: &[f64], locations: &[Point], rule: NeighborRule) -> Result<MoranResult> {
    let n = values.len();
    if n < 3 || locations.len() != n {
        return Err(Error::InvalidInput("Moran's I needs >= 3 values, one per location".into()));
    }
    let nb = neighbor_lists(locations, rule)?;
    morans_i_with(values, &nb)
}

/// Moran's I for precomputed neighbour lists.
pub fn morans_i_with(values: &[f64], nb: &[Vec<usize>]) -> Result<MoranResult> {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let m2: f64 = z.iter().map(|v| v * v).sum();
    if !(m2 > 1e-300) || !m2.is_finite() {
        return Err(Error::Undefined("Moran's I of a constant vector".into()));
    }
    // w_ij = 1/|N(i)|
    let mut s0 = 0.0;
    let mut num = 0.0;
    let mut col_sum = vec![0.0; n];
    let mut s1 = 0.0;
    for (i, list) in nb.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let w = 1.0 / list.len() as f64;
        s0 += 1.0;
        for &j in list {
            num += w * z[i] * z[j];
            col_sum[j] += w;
            let wji = if nb[j].binary_search(&i).is_ok() { 1.0 / nb[j].len() as f64 } else { 0.0 };
            s1 += 0.5 * (w + wji) * (w + wji);
        }
    }
    // pairs (i, j) with w_ij = 0 but w_ji > 0 also contribute to S1
    for (j, list) in nb.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let w = 1.0 / list.len() as f64;
        for &i in list {
            if nb[i].binary_search(&j).is_err() {
                s1 += 0.5 * w * w;
            }
        }
    }
    let s2: f64 = (0..n).map(|i| {
        let row = if nb[i].is_empty() { 0.0 } else { 1.0 };
        (row + col_sum[i]) * (row + col_sum[i])
    }).sum();
    let i_stat = nf / s0 * num / m2;
    let expected = -1.0 / (nf - 1.0);
    let variance = (nf * nf * s1 - nf * s2 + 3.0 * s0 * s0) / ((nf * nf - 1.0) * s0 * s0) - expected * expected;
    let z_score = (i_stat - expected) / libm::sqrt(variance);
    let p_value = libm::erfc(libm::fabs(z_score) / core::f64::consts::SQRT_2);
    Ok(MoranResult { i: i_stat, expected, variance, z_score, p_value })
}

/// One replicate × model outcome of a study.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicateFit {
    pub replicate: usize,
    pub model: String,
    /// `None` when the fit failed.
    pub outcome: Option<FitOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitOutcome {
    pub beta: Summary,
    pub dic: f64,
    pub waic: f64,
    /// Eigenvectors kept by the Spatial+ 2.0 selection.
    pub k_kept: Option<usize>,
}

/// One row of the Table-1 style summary.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSummary {
    pub model: String,
    pub beta_hat: f64,
    pub esd: f64,
    pub mean_se: f64,
    pub dic: f64,
    pub waic: f64,
    pub coverage: f64,
    pub n_fits: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudySummary {
    pub rows: Vec<ModelSummary>,
}

impl StudySummary {
    pub fn get(&self, model: &str) -> Option<&ModelSummary> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// Per-model means over replicates; models appear in first-seen order.
pub fn summarize_study(fits: &[ReplicateFit], true_beta: f64) -> StudySummary {
    let mut order: Vec<&str> = Vec::new();
    for f in fits {
        if !order.contains(&f.model.as_str()) {
            order.push(&f.model);
        }
    }
    let rows = order
        .into_iter()
        .map(|model| {
            let ok: Vec<&FitOutcome> = fits.iter().filter(|f| f.model == model).filter_map(|f| f.outcome.as_ref()).collect();
            let n_failed = fits.iter().filter(|f| f.model == model && f.outcome.is_none()).count();
            let k = ok.len() as f64;
            let mean = |g: &dyn Fn(&FitOutcome) -> f64| ok.iter().map(|o| g(o)).sum::<f64>() / k;
            let beta_hat = mean(&|o| o.beta.mean);
            let esd = if ok.len() >= 2 {
                libm::sqrt(ok.iter().map(|o| (o.beta.mean - beta_hat) * (o.beta.mean - beta_hat)).sum::<f64>() / (k - 1.0))
            } else {
                f64::NAN
            };
            let covered = ok.iter().filter(|o| o.beta.q025 <= true_beta && true_beta <= o.beta.q975).count();
            ModelSummary {
                model: model.into(),
                beta_hat,
                esd,
                mean_se: mean(&|o| o.beta.sd),
                dic: mean(&|o| o.dic),
                waic: mean(&|o| o.waic),
                coverage: if ok.is_empty() { f64::NAN } else { 100.0 * covered as f64 / k },
                n_fits: ok.len(),
                n_failed,
            }
        })
        .collect();
    StudySummary { rows }
}
