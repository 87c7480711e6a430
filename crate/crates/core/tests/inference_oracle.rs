//! Sparse inference against a dense joint-Gaussian brute force.

mod oracles;

use geoconfound_core::inference::{conditional_posterior, LatentField, LinearLGM};
use geoconfound_core::mesh::{build_mesh, Domain, Point};
use geoconfound_core::spde::{assemble_fem, build_precision, HyperParams};
use nalgebra::DMatrix;
use oracles::dense_lgm::dense_oracle;
use rand::{Rng, SeedableRng};

struct Toy {
    model: LinearLGM,
}

fn toy(seed: u64, restricted: bool, intercept: bool) -> Toy {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dom = Domain::new(0.0, 1.0, 0.0, 1.0).unwrap();
    let mesh = build_mesh(&dom, 0.3, 0.1).unwrap();
    assert!(mesh.n_vertices() <= 25, "{}", mesh.n_vertices());
    let n = 30;
    let pts: Vec<Point> = (0..n).map(|_| Point::new(rng.random(), rng.random())).collect();
    let a = mesh.project(&pts).unwrap().to_csc();
    let fem = assemble_fem(&mesh).unwrap();
    let hp = HyperParams::new(0.3 + rng.random::<f64>(), 0.5 + rng.random::<f64>(), 0.3 + rng.random::<f64>()).unwrap();
    let q = build_precision(&fem, &hp).unwrap().q;
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + rng.random::<f64>() - 0.5).collect();
    let f = if intercept {
        DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r] })
    } else {
        DMatrix::from_fn(n, 1, |r, _| x[r])
    };
    Toy {
        model: LinearLGM { y, f, field: Some(LatentField { a, q, restricted }), sigma_eps: hp.sigma_eps, beta_sd: 1000.0 },
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn spatial_and_restricted_match_dense_oracle() {
    for seed in 0..8u64 {
        for &(restricted, intercept) in &[(false, false), (false, true), (true, false), (true, true)] {
            let t = toy(seed, restricted, intercept);
            let post = conditional_posterior(&t.model).unwrap();
            let (mean, cov, lml) = dense_oracle(&t.model);
            let p = t.model.f.ncols();
            for i in 0..p {
                assert!(rel(post.beta_mean[i], mean[i]) < 1e-8, "beta mean {seed} {restricted}");
                assert!(rel(post.beta_cov[(i, i)], cov[(i, i)]) < 1e-8, "beta var {seed} {restricted}");
            }
            for j in 0..post.u_mean.len() {
                assert!((post.u_mean[j] - mean[p + j]).abs() < 1e-8 * (1.0 + mean[p + j].abs()));
            }
            assert!(rel(post.log_marginal, lml) < 1e-9, "log marginal {} vs {}", post.log_marginal, lml);
            let pc = post.covariance().unwrap();
            for j in 0..post.u_mean.len() {
                assert!(rel(pc.field(j, j).unwrap(), cov[(p + j, p + j)]) < 1e-8);
                assert!((pc.field_fixed(j, 0) - cov[(p + j, 0)]).abs() < 1e-8 * cov[(0, 0)].sqrt() * cov[(p + j, p + j)].sqrt());
            }
        }
    }
}
