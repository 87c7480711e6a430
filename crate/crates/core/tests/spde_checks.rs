//! Finite elements and GMRF precision against dense linear algebra.

use geoconfound_core::matern::{matern_cov, MaternParams};
use geoconfound_core::mesh::{build_mesh, Domain, TriMesh};
use geoconfound_core::spde::{assemble_fem, build_precision, sample_field, FemMatrices, HyperParams};
use nalgebra::{DMatrix, DVector};

fn mesh(side: f64, max_edge: f64) -> TriMesh {
    build_mesh(&Domain::new(0.0, side, 0.0, side).unwrap(), max_edge, 0.0).unwrap()
}

fn dense_cov(fem: &FemMatrices, hp: &HyperParams) -> DMatrix<f64> {
    build_precision(fem, hp).unwrap().q.to_dense().try_inverse().unwrap()
}

#[test]
fn stiffness_annihilates_constants() {
    for &(side, h) in &[(1.0, 0.1), (10.0, 0.37), (2e5, 9e3)] {
        let fem = assemble_fem(&mesh(side, h)).unwrap();
        let g1 = fem.g().mul_vec(&vec![1.0; fem.n()]);
        let scale = fem.g().diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(g1.iter().all(|v| v.abs() < 1e-10 * scale.max(1.0)), "side {side}");
    }
}

#[test]
fn precision_spd_on_hyperparameter_grid() {
    let m = mesh(10.0, 0.5);
    let fem = assemble_fem(&m).unwrap();
    let rhos = [0.2, 0.7, 1.5, 4.0, 12.0];
    let sigmas = [0.05, 0.3, 1.0, 3.0, 20.0];
    for &rho in &rhos {
        for &sigma in &sigmas {
            let q = build_precision(&fem, &HyperParams::new(rho, sigma, 1.0).unwrap()).unwrap();
            assert!(q.q.is_symmetric(0.0));
            let f = q.factor().unwrap_or_else(|e| panic!("rho {rho} sigma {sigma}: {e}"));
            assert!(f.logdet().is_finite());
        }
    }
}

#[test]
fn sparse_solve_matches_dense_solve() {
    let m = mesh(1.0, 0.15);
    assert!(m.n_vertices() <= 64);
    let fem = assemble_fem(&m).unwrap();
    let q = build_precision(&fem, &HyperParams::new(0.4, 1.3, 1.0).unwrap()).unwrap();
    let b: Vec<f64> = (0..fem.n()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let x = q.factor().unwrap().solve(&b);
    let dense = q.q.to_dense().lu().solve(&DVector::from_column_slice(&b)).unwrap();
    let norm = dense.norm();
    let err = (DVector::from_column_slice(&x) - dense).norm();
    assert!(err < 1e-8 * norm, "{err}");
}

#[test]
fn interior_variance_and_correlation_match_matern() {
    // 7 × 7 lattice, spacing 1, range 2
    let m = mesh(6.0, 1.0);
    assert!(m.n_vertices() <= 60);
    let fem = assemble_fem(&m).unwrap();
    let hp = HyperParams::new(2.0, 1.5, 1.0).unwrap();
    let cov = dense_cov(&fem, &hp);
    let verts = m.vertices();
    let interior: Vec<usize> = (0..verts.len())
        .filter(|&i| verts[i].x >= 2.0 && verts[i].x <= 4.0 && verts[i].y >= 2.0 && verts[i].y <= 4.0)
        .collect();
    assert!(!interior.is_empty());
    for &i in &interior {
        let v = cov[(i, i)];
        assert!((v / 2.25 - 1.0).abs() < 0.15, "variance {v} at node {i}");
    }
    let centre = (0..verts.len()).find(|&i| verts[i].x == 3.0 && verts[i].y == 3.0).unwrap();
    let other = (0..verts.len()).find(|&i| verts[i].x == 5.0 && verts[i].y == 3.0).unwrap();
    let corr = cov[(centre, other)] / (cov[(centre, centre)] * cov[(other, other)]).sqrt();
    let target = matern_cov(2.0, &MaternParams::correlation(2.0).unwrap());
    assert!((corr - target).abs() < 0.05, "correlation {corr} vs {target}");
}

#[test]
fn monte_carlo_covariance_within_five_standard_errors() {
    let m = mesh(1.0, 0.25);
    let fem = assemble_fem(&m).unwrap();
    let hp = HyperParams::new(0.5, 1.0, 1.0).unwrap();
    let q = build_precision(&fem, &hp).unwrap();
    let cov = dense_cov(&fem, &hp);
    let mm = fem.n();
    let draws = 2000;
    let mut acc = DMatrix::<f64>::zeros(mm, mm);
    for s in 0..draws {
        let u = DVector::from_vec(sample_field(&q, 1000 + s as u64).unwrap());
        acc += &u * u.transpose();
    }
    acc /= draws as f64;
    let mut worst = 0.0f64;
    for i in 0..mm {
        for j in 0..=i {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)] * cov[(i, j)]) / draws as f64).sqrt();
            worst = worst.max((acc[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    assert!(worst < 5.0, "largest deviation {worst:.2} standard errors");
}

#[test]
fn quadrupled_precision_halves_sample_sd() {
    let m = mesh(1.0, 0.25);
    let fem = assemble_fem(&m).unwrap();
    let q1 = build_precision(&fem, &HyperParams::new(0.5, 1.0, 1.0).unwrap()).unwrap();
    let mut q4 = q1.clone();
    q4.q.scale(4.0);
    let a = sample_field(&q1, 5).unwrap();
    let b = sample_field(&q4, 5).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x / 2.0 - y).abs() < 1e-12 * (1.0 + x.abs()));
    }
}
