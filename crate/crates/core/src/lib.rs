//! Multi-source domain-generalization trainer for cross-scene raster
//! classification, built on a self-contained f64 autodiff engine.

pub mod adversary;
pub mod error;
pub mod ops;
pub mod rng;
pub mod tensor;
