//! Reliability-optimal routing on networks with stochastic, correlated
//! link travel times.
//!
//! The library discretizes link travel-time distributions onto a shared
//! time grid, builds conditional transition kernels that capture the
//! correlation between consecutive links, and solves for the maximal
//! probability of on-time arrival by successive approximation. A robust
//! variant hedges the routing policy against model error by averaging
//! the best successor candidates with a decreasing weight profile.
//!
//! The main entry points are:
//!
//! * [`network::Network`] and [`network::LinkParams`] describe the road
//!   network and the per-link travel-time moments.
//! * [`stochastic::KernelStore`] holds the discretized conditional
//!   kernels for every link pair.
//! * [`reliability::solve_classic`] and [`reliability::solve_robust`]
//!   compute arrival-probability tables and routing policies.
//! * [`evaluation`] simulates trips under a solved policy, extracts
//!   reliability curves, and compares policies against each other.

pub mod evaluation;
pub mod grid;
pub mod network;
pub mod reliability;
pub mod stochastic;

pub use grid::TimeGrid;
pub use network::{LinkParams, Network, NodeId};
pub use reliability::{solve_classic, solve_robust, RobustnessWeights, Solution};
pub use stochastic::{BivariatePair, ConditionalKernel, GammaMarginal, KernelStore};
