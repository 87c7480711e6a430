//! Every estimator at fixed hyperparameters against dense brute force.

mod oracles;

use geoconfound_core::models::ModelKind;
use oracles::model_toys::{discrepancy, toy};

#[test]
fn every_model_matches_the_dense_oracle() {
    for seed in 0..20u64 {
        let t = toy(seed);
        assert!(t.data.n() <= 30 && t.setup.mesh.n_vertices() <= 25);
        for kind in ModelKind::ALL {
            let (reg, mean, sd) = discrepancy(&t, kind);
            assert!(reg < 1e-8, "{kind} seed {seed}: regressor {reg:.2e}");
            assert!(mean < 1e-8 && sd < 1e-8, "{kind} seed {seed}: mean {mean:.2e} sd {sd:.2e}");
        }
    }
}
