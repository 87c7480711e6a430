//! Geostatistical regression with latent Gaussian Markov random fields and
//! three spatial-confounding adjustments: restricted spatial regression,
//! Spatial+ and its single-stage spectral variant ("Spatial+ 2.0").
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches a
//! filesystem, a thread pool or a command line lives in the `geoconfound`
//! companion crate.
//!
//! Layout, bottom-up:
//!
//! * [`mesh`]: structured triangulations and the observation-to-mesh projector.
//! * [`matern`] / [`special`]: the Matérn covariance and modified Bessel `K_ν`.
//! * [`sparse`]: compressed-column matrices and a fill-reducing sparse Cholesky
//!   with selected inversion.
//! * [`spde`]: P1 finite elements and the SPDE precision for `ν = 1`.
//! * [`inference`]: exact conjugate-Gaussian posteriors, PC priors and the
//!   hyperparameter grid.
//! * [`models`]: Null, Spatial, RSR, Spatial+ and Spatial+ 2.0 estimators.
//! * [`criteria`]: WAIC, DIC, Moran's I and replicate-ensemble summaries.
//! * [`simstudy`]: the confounded data-generating process and study driver.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod criteria;
pub mod error;
pub mod inference;
pub mod matern;
pub mod mesh;
pub mod models;
pub mod rng;
pub mod simstudy;
pub mod sparse;
pub mod spde;
pub mod special;

mod dense;

pub use error::{Error, Result};
pub use mesh::{Domain, Point, Projector, TriMesh};
