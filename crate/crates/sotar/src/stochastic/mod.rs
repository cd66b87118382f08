//! Travel-time distributions: Gamma marginals, the correlated bivariate
//! model for adjacent links, and discretized conditional kernels.

pub mod special;

mod bivariate;
mod kernel;

pub use bivariate::{gamma_from_moments, BivariatePair, GammaMarginal, JointForm};
pub use kernel::{build_conditional_kernel, ConditionalKernel, KernelStore};

use crate::network::Link;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("shape and rate must be positive, got shape {0}, rate {1}")]
    InvalidGamma(f64, f64),
    #[error("mean and variance must be positive, got mean {0}, variance {1}")]
    InvalidMoments(f64, f64),
    #[error("correlation must lie in [0, 1), got {0}")]
    InvalidCorrelation(f64),
    #[error(
        "correlation {rho} with shapes ({shape_w}, {shape_y}) implies eta {eta}, outside (0, 1)"
    )]
    EtaOutOfRange {
        rho: f64,
        shape_w: f64,
        shape_y: f64,
        eta: f64,
    },
    #[error("density series did not converge within {0} terms")]
    SeriesDivergence(usize),
    #[error("conditioning density at y = {0} is below the supported floor")]
    ConditioningFloor(f64),
    #[error("kernel row {0} is not a probability vector: {1}")]
    BadKernelRow(usize, String),
    #[error("kernel for pair {up:?} -> {down:?}: {source}")]
    PairKernel {
        up: Link,
        down: Link,
        #[source]
        source: Box<StochasticError>,
    },
}
