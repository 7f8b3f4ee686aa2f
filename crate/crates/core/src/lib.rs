//! Graph convolutional networks with trainable dropout retention
//! probabilities, regularized by a Rademacher-complexity bound, together with
//! fixed-rate dropout baselines, bound calculators and experiment sweeps.

pub mod autodiff;
pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rademacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
