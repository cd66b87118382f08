//! Reliability dynamic programming: arrival-probability tables and
//! routing policies by successive approximation.
//!
//! The state of the DP is (incoming edge, remaining budget cell,
//! realized upstream cell). Classic solving maximizes the probability
//! of on-time arrival over successors; robust solving replaces the max
//! by a weighted mean of the sorted successor values while keeping the
//! argmax policy.

mod solution_io;
mod solver;
mod weights;

pub use solution_io::{load_solution, save_solution, SolutionIoError, SOLUTION_MAGIC};
pub use solver::{
    compute_a, default_max_iter, query, solve_classic, solve_robust, EdgeTable, Solution,
    SourceTable, DEFAULT_EPSILON,
};
pub use weights::{robust_value, RobustnessWeights};

use crate::network::{Link, NodeId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("robustness weights must be nonempty")]
    EmptyWeights,
    #[error("weights must be nonnegative and nonincreasing, got {0:?}")]
    NotNonincreasing(Vec<f64>),
    #[error("weights must sum to 1 within 1e-9, got {0}")]
    BadWeightSum(f64),
    #[error("weight vector has length {got} but the network needs {expected}")]
    WeightsLength { expected: usize, got: usize },
    #[error("no conditional kernel for pair {up:?} -> {down:?}")]
    MissingPairKernel { up: Link, down: Link },
    #[error("no source kernel for link {0:?}")]
    MissingSourceKernel(Link),
    #[error("kernel for {context} spans {kernel_cells} cells but the grid has {grid_cells}")]
    KernelShape {
        context: String,
        kernel_cells: usize,
        grid_cells: usize,
    },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("max_iter must be at least 1")]
    BadMaxIter,
    #[error("node {0} does not exist in the network")]
    UnknownNode(NodeId),
    #[error("budget {budget} outside [0, {horizon}]")]
    BudgetOutOfRange { budget: f64, horizon: f64 },
}

/// Spacing of the value lattice: every stored probability is a multiple
/// of 2⁻⁴⁰. Snapping table values onto a fixed absolute lattice makes
/// differences of stored values exact in floating point, which in turn
/// makes the monotonicity guarantees of the solver hold exactly rather
/// than up to rounding.
pub(crate) const VALUE_LATTICE: f64 = 1099511627776.0; // 2^40

pub(crate) fn quantize(v: f64) -> f64 {
    (v * VALUE_LATTICE).floor() / VALUE_LATTICE
}
