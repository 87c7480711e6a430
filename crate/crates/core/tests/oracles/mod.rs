//! Independent reference implementations shared by the test suites.
#![allow(dead_code)]

pub mod bessel;
pub mod dense_lgm;
pub mod model_toys;
pub mod quadrature;
