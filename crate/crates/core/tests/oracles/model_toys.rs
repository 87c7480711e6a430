//! Small random problems on which every estimator is recomputed by dense
//! algebra at fixed hyperparameters.

use geoconfound_core::inference::{LatentField, LinearLGM};
use geoconfound_core::mesh::{build_mesh, Domain, Point};
use geoconfound_core::models::{conditional_at, regressor_at, Dataset, ModelKind, SpatialSetup, SpectralBasis};
use geoconfound_core::spde::{build_precision, HyperParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bessel::k0_k1;
use super::dense_lgm::dense_oracle;

pub struct Toy {
    pub data: Dataset,
    pub setup: SpatialSetup,
    pub hp: HyperParams,
    pub stage1: HyperParams,
    pub rho_hat: f64,
    pub k: usize,
}

pub fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12 + (seed as usize * 7) % 19;
    let mesh = build_mesh(&Domain::new(0.0, 1.0, 0.0, 1.0).unwrap(), 0.3, 0.1).unwrap();
    let locations: Vec<Point> = (0..n).map(|_| Point::new(rng.random(), rng.random())).collect();
    let x: Vec<f64> = locations.iter().map(|p| (3.0 * p.x).sin() + rng.random::<f64>() - 0.5).collect();
    let y: Vec<f64> = x.iter().zip(&locations).map(|(v, p)| 1.5 * v + p.y * p.y + 0.4 * rng.random::<f64>()).collect();
    let intercept = seed % 3 != 0;
    let data = Dataset::new(locations.clone(), y, x, intercept).unwrap();
    let setup = SpatialSetup::new(mesh, &locations).unwrap();
    let mut hp = || {
        HyperParams::new(0.2 + rng.random::<f64>(), 0.3 + rng.random::<f64>(), 0.2 + 0.5 * rng.random::<f64>()).unwrap()
    };
    let (h, s1) = (hp(), hp());
    let rho_hat = 0.1 + 0.6 * rng.random::<f64>();
    let k = rng.random_range(0..n);
    Toy { data, setup, hp: h, stage1: s1, rho_hat, k }
}

fn design(data: &Dataset, cov: Option<&[f64]>) -> DMatrix<f64> {
    let n = data.n();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if data.intercept {
        cols.push(vec![1.0; n]);
    }
    if let Some(c) = cov {
        cols.push(c.to_vec());
    }
    DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r])
}

fn lgm(t: &Toy, y: &[f64], f: DMatrix<f64>, hp: &HyperParams, field: bool, restricted: bool) -> LinearLGM {
    let field = field.then(|| LatentField {
        a: t.setup.a.clone(),
        q: build_precision(&t.setup.fem, hp).unwrap().q,
        restricted,
    });
    LinearLGM { y: y.to_vec(), f, field, sigma_eps: hp.sigma_eps, beta_sd: 1000.0 }
}

/// `Z` from an eigendecomposition of the dense Matérn correlation (ν = 1)
/// evaluated with the big-integer Bessel series.
fn oracle_z(locations: &[Point], rho: f64, x: &[f64], k: usize) -> Vec<f64> {
    let n = locations.len();
    let s8 = 8f64.sqrt();
    let mut sigma = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        let s = s8 * locations[i].distance(&locations[j]) / rho;
        s * k0_k1(s).1
    });
    for i in 0..n {
        sigma[(i, i)] += 1e-8;
    }
    let eig = sigma.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let xv = DVector::from_column_slice(x);
    let mut z = xv.clone();
    for &c in &order[..k] {
        let s = eig.eigenvectors.column(c);
        z -= s * s.dot(&xv);
    }
    z.as_slice().to_vec()
}

/// Oracle regressor of each model.
fn oracle_regressor(t: &Toy, kind: ModelKind) -> Vec<f64> {
    let d = &t.data;
    match kind {
        ModelKind::SpatialPlus => {
            let f0 = design(d, None);
            let p0 = f0.ncols();
            let (mean, _, _) = dense_oracle(&lgm(t, &d.x, f0.clone(), &t.stage1, true, false));
            let u = DVector::from_iterator(mean.len() - p0, mean.iter().skip(p0).copied());
            let smooth = t.setup.a.to_dense() * u + f0 * DVector::from_iterator(p0, mean.iter().take(p0).copied());
            d.x.iter().zip(smooth.iter()).map(|(x, s)| x - s).collect()
        }
        ModelKind::SpatialPlus2 => oracle_z(&d.locations, t.rho_hat, &d.x, t.k),
        _ => d.x.clone(),
    }
}

/// Worst relative discrepancy of `(regressor, β mean, β sd)` between the
/// library and the dense oracle for `kind`.
pub fn discrepancy(t: &Toy, kind: ModelKind) -> (f64, f64, f64) {
    let d = &t.data;
    let basis = SpectralBasis::new(&d.locations, t.rho_hat).unwrap();
    let reg = regressor_at(kind, d, &t.setup, &t.stage1, Some((&basis, t.k)), 1000.0).unwrap();
    let oracle_reg = oracle_regressor(t, kind);
    let scale = oracle_reg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let reg_err = reg.iter().zip(&oracle_reg).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;

    let post = conditional_at(kind, d, &t.setup, &reg, &t.hp, 1000.0).unwrap();
    let f = design(d, Some(&oracle_reg));
    let field = kind != ModelKind::Null;
    let (mean, cov, _) = dense_oracle(&lgm(t, &d.y, f, &t.hp, field, kind == ModelKind::Rsr));
    let c = d.covariate_index();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    (reg_err, rel(post.beta_mean[c], mean[c]), rel(post.beta_cov[(c, c)].sqrt(), cov[(c, c)].sqrt()))
}
