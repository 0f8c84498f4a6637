//! Estimation of additive-noise structural causal models from pooled
//! observational and joint-interventional data, and disentangled prediction
//! of single-intervention effects under correlated Gaussian noise.

pub mod estimate;
pub mod experiments;
pub mod gaussian;
pub mod identify;
pub mod infer;
pub mod io;
pub mod model;
pub mod rng;
