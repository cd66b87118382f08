//! Successive approximation over edge-state value tables.
//!
//! Every edge (k, i) carries a table over (remaining budget cells,
//! realized upstream cells). One Jacobi sweep recomputes every table
//! from the previous iterate, so sweeps parallelize over edges and the
//! result is independent of scheduling. Edges into the destination are
//! the fixed boundary with value 1; everything else starts at 0 and
//! grows monotonically toward the fixed point.

use super::weights::{weighted_sorted, RobustnessWeights};
use super::{quantize, SolveError};
use crate::grid::TimeGrid;
use crate::network::{Link, Network, NodeId};
use crate::stochastic::{ConditionalKernel, KernelStore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::num::NonZeroU32;

pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Iteration cap used when the caller does not pick one: four sweeps
/// per node, far beyond the longest-path bound that acyclic networks
/// actually need.
pub fn default_max_iter(net: &Network) -> usize {
    4 * net.node_count() as usize
}

/// Value and policy table of one edge state, indexed by remaining
/// budget (row) and realized upstream duration (column), both counted
/// in grid cells including the zero boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTable {
    nt: usize,
    values: Vec<f64>,
    policy: Vec<Option<NonZeroU32>>,
}

impl EdgeTable {
    fn filled(nt: usize, value: f64) -> Self {
        Self {
            nt,
            values: vec![value; nt * nt],
            policy: vec![None; nt * nt],
        }
    }

    /// Probability of on-time arrival with `t_idx` budget cells left,
    /// given that the upstream link took `y_idx` cells.
    pub fn value(&self, t_idx: usize, y_idx: usize) -> f64 {
        self.values[t_idx * self.nt + y_idx]
    }

    /// Recommended next node in the same state, when one exists.
    pub fn successor(&self, t_idx: usize, y_idx: usize) -> Option<NodeId> {
        self.policy[t_idx * self.nt + y_idx].map(NonZeroU32::get)
    }

    /// Points per axis: grid cells plus the zero boundary.
    pub fn axis_len(&self) -> usize {
        self.nt
    }
}

/// Value and policy table of a virtual source at one node: the trip has
/// not traversed anything yet, so there is no upstream duration to
/// condition on and the table is one-dimensional in the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTable {
    values: Vec<f64>,
    policy: Vec<Option<NonZeroU32>>,
}

impl SourceTable {
    pub fn value(&self, t_idx: usize) -> f64 {
        self.values[t_idx]
    }

    pub fn successor(&self, t_idx: usize) -> Option<NodeId> {
        self.policy[t_idx].map(NonZeroU32::get)
    }

    pub fn axis_len(&self) -> usize {
        self.values.len()
    }
}

/// Converged (or best-effort) output of a solve: per-edge tables,
/// per-node source tables, and the iteration trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    network: Network,
    grid: TimeGrid,
    weights: Option<RobustnessWeights>,
    epsilon: f64,
    max_iter: usize,
    iterations: usize,
    converged: bool,
    residuals: Vec<f64>,
    edges: Vec<EdgeTable>,
    sources: Vec<SourceTable>,
}

impl Solution {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// The robustness weights the solve used, or none for a classic
    /// (pure maximum) solve.
    pub fn weights(&self) -> Option<&RobustnessWeights> {
        self.weights.as_ref()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Sup-norm change of the tables after each sweep, in sweep order.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn edge_table(&self, link: Link) -> Option<&EdgeTable> {
        self.network.link_index(link).map(|idx| &self.edges[idx])
    }

    pub fn source_table(&self, node: NodeId) -> Option<&SourceTable> {
        if node == 0 || node > self.network.node_count() {
            None
        } else {
            Some(&self.sources[(node - 1) as usize])
        }
    }

    /// Shape consistency between the tables and the network and grid;
    /// used when loading solutions from disk.
    pub(crate) fn check_shape(&self) -> Result<(), String> {
        let nt = self.grid.cells() + 1;
        if self.edges.len() != self.network.links().len() {
            return Err(format!(
                "{} edge tables for {} links",
                self.edges.len(),
                self.network.links().len()
            ));
        }
        if self.sources.len() != self.network.node_count() as usize {
            return Err(format!(
                "{} source tables for {} nodes",
                self.sources.len(),
                self.network.node_count()
            ));
        }
        for (idx, edge) in self.edges.iter().enumerate() {
            if edge.nt != nt || edge.values.len() != nt * nt || edge.policy.len() != nt * nt {
                return Err(format!("edge table {idx} does not match the grid"));
            }
        }
        for (idx, source) in self.sources.iter().enumerate() {
            if source.values.len() != nt || source.policy.len() != nt {
                return Err(format!("source table {idx} does not match the grid"));
            }
        }
        Ok(())
    }
}

/// Probability of on-time arrival when committing to one successor:
/// the conditional kernel row at `y_idx` folded against the downstream
/// edge table along the diagonal of compatible states. A travel time in
/// cell c consumes c+1 budget cells and is recorded as c+1 realized
/// cells, the conservative upper edge.
pub fn compute_a(
    kernel: &ConditionalKernel,
    downstream: &EdgeTable,
    t_idx: usize,
    y_idx: usize,
) -> f64 {
    let row = kernel.row(y_idx);
    let mut acc = 0.0;
    for (c, &mass) in row.iter().enumerate().take(t_idx) {
        acc += mass * downstream.value(t_idx - c - 1, c + 1);
    }
    quantize(acc.min(1.0))
}

/// Solves for the policy maximizing the probability of on-time arrival.
pub fn solve_classic(
    net: &Network,
    kernels: &KernelStore,
    grid: TimeGrid,
    epsilon: f64,
    max_iter: usize,
) -> Result<Solution, SolveError> {
    solve_inner(net, kernels, grid, None, epsilon, max_iter)
}

/// Solves the robust variant: the policy still follows the best
/// successor, but propagated values hedge across successors with the
/// given weights, discounting options whose alternatives are poor.
pub fn solve_robust(
    net: &Network,
    kernels: &KernelStore,
    grid: TimeGrid,
    weights: &RobustnessWeights,
    epsilon: f64,
    max_iter: usize,
) -> Result<Solution, SolveError> {
    let expected = net.max_out_degree();
    if weights.len() != expected {
        return Err(SolveError::WeightsLength {
            expected,
            got: weights.len(),
        });
    }
    solve_inner(net, kernels, grid, Some(weights.clone()), epsilon, max_iter)
}

struct SuccEntry<'a> {
    node: NodeId,
    kernel: &'a ConditionalKernel,
    link_pos: usize,
}

struct LinkUpdate {
    values: Vec<f64>,
    policy: Vec<Option<NonZeroU32>>,
    residual: f64,
}

fn solve_inner(
    net: &Network,
    kernels: &KernelStore,
    grid: TimeGrid,
    weights: Option<RobustnessWeights>,
    epsilon: f64,
    max_iter: usize,
) -> Result<Solution, SolveError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(SolveError::BadEpsilon(epsilon));
    }
    if max_iter == 0 {
        return Err(SolveError::BadMaxIter);
    }
    check_kernels(net, kernels, grid)?;

    let n = grid.cells();
    let nt = n + 1;
    let dest = net.destination();
    let links = net.links();

    let mut edges: Vec<EdgeTable> = links
        .iter()
        .map(|&(_, head)| EdgeTable::filled(nt, if head == dest { 1.0 } else { 0.0 }))
        .collect();

    let succ_entries: Vec<Vec<SuccEntry>> = links
        .iter()
        .map(|&(k, i)| {
            if i == dest {
                return Vec::new();
            }
            net.successors(i)
                .iter()
                .map(|&j| SuccEntry {
                    node: j,
                    kernel: kernels
                        .pair((k, i), (i, j))
                        .expect("checked above")
                        .as_ref(),
                    link_pos: net.link_index((i, j)).expect("successor link exists"),
                })
                .collect()
        })
        .collect();

    let robust = weights.as_ref().filter(|w| !w.is_classic());
    let mut residuals = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for sweep in 1..=max_iter {
        let diag = gather_diagonals(&edges, n, nt);
        let updates: Vec<Option<LinkUpdate>> = links
            .par_iter()
            .enumerate()
            .map(|(li, _)| {
                let entries = &succ_entries[li];
                if entries.is_empty() {
                    return None;
                }
                Some(update_edge(entries, &diag, &edges[li], nt, robust))
            })
            .collect();

        let mut residual = 0.0f64;
        for (li, update) in updates.into_iter().enumerate() {
            if let Some(u) = update {
                residual = residual.max(u.residual);
                edges[li].values = u.values;
                edges[li].policy = u.policy;
            }
        }
        residuals.push(residual);
        iterations = sweep;
        if residual <= epsilon {
            converged = true;
            break;
        }
    }

    let sources = compute_sources(net, kernels, nt, &edges, robust);

    Ok(Solution {
        network: net.clone(),
        grid,
        weights,
        epsilon,
        max_iter,
        iterations,
        converged,
        residuals,
        edges,
        sources,
    })
}

/// One Jacobi update of a single edge table from the previous iterate.
fn update_edge(
    entries: &[SuccEntry],
    diag: &[Vec<f64>],
    previous: &EdgeTable,
    nt: usize,
    robust: Option<&RobustnessWeights>,
) -> LinkUpdate {
    let mut values = vec![0.0; nt * nt];
    let mut policy = vec![None; nt * nt];
    let mut a_buf = vec![0.0f64; entries.len()];
    let mut sort_buf = vec![0.0f64; entries.len()];
    let mut residual = 0.0f64;
    for t in 0..nt {
        let off = (t * t - t) / 2;
        for y in 0..nt {
            let mut best = f64::NEG_INFINITY;
            let mut best_node = 0u32;
            for (si, entry) in entries.iter().enumerate() {
                let row = entry.kernel.row(y);
                let seg = &diag[entry.link_pos][off..off + t];
                let mut acc = 0.0;
                for c in 0..t {
                    acc += row[c] * seg[c];
                }
                let a = quantize(acc.min(1.0));
                a_buf[si] = a;
                if a > best {
                    best = a;
                    best_node = entry.node;
                }
            }
            let value = match robust {
                None => best,
                Some(w) => {
                    sort_buf.copy_from_slice(&a_buf);
                    sort_buf.sort_unstable_by(|x, y| y.total_cmp(x));
                    weighted_sorted(&sort_buf, w)
                }
            };
            let idx = t * nt + y;
            residual = residual.max((value - previous.values[idx]).abs());
            values[idx] = value;
            policy[idx] = NonZeroU32::new(best_node);
        }
    }
    LinkUpdate {
        values,
        policy,
        residual,
    }
}

/// Rearranges each edge table into budget-major diagonals: for budget t
/// the compatible downstream states are (t-1-c, c+1) for travel cells
/// c < t. Gathering them once per sweep turns the inner products of
/// the update into contiguous scans.
fn gather_diagonals(edges: &[EdgeTable], n: usize, nt: usize) -> Vec<Vec<f64>> {
    edges
        .par_iter()
        .map(|edge| {
            let mut buf = vec![0.0; n * (n + 1) / 2];
            for t in 1..=n {
                let off = (t * t - t) / 2;
                for c in 0..t {
                    buf[off + c] = edge.values[(t - 1 - c) * nt + (c + 1)];
                }
            }
            buf
        })
        .collect()
}

/// Tables for trips that start at a node with no upstream history. The
/// first hop uses the source (unconditioned) kernel of the chosen link;
/// afterwards the trip is in an ordinary edge state.
fn compute_sources(
    net: &Network,
    kernels: &KernelStore,
    nt: usize,
    edges: &[EdgeTable],
    robust: Option<&RobustnessWeights>,
) -> Vec<SourceTable> {
    (1..=net.node_count())
        .into_par_iter()
        .map(|node| {
            if node == net.destination() {
                return SourceTable {
                    values: vec![1.0; nt],
                    policy: vec![None; nt],
                };
            }
            let mut values = vec![0.0; nt];
            let mut policy = vec![None; nt];
            let succs = net.successors(node);
            if succs.is_empty() {
                return SourceTable { values, policy };
            }
            let entries: Vec<(NodeId, &ConditionalKernel, usize)> = succs
                .iter()
                .map(|&j| {
                    let link = (node, j);
                    (
                        j,
                        kernels.source(link).expect("checked above").as_ref(),
                        net.link_index(link).expect("successor link exists"),
                    )
                })
                .collect();
            let mut a_buf = vec![0.0f64; entries.len()];
            let mut sort_buf = vec![0.0f64; entries.len()];
            for t in 0..nt {
                let mut best = f64::NEG_INFINITY;
                let mut best_node = 0u32;
                for (si, &(j, kernel, pos)) in entries.iter().enumerate() {
                    let row = kernel.row(0);
                    let mut acc = 0.0;
                    for (c, &mass) in row.iter().enumerate().take(t) {
                        acc += mass * edges[pos].values[(t - c - 1) * nt + (c + 1)];
                    }
                    let a = quantize(acc.min(1.0));
                    a_buf[si] = a;
                    if a > best {
                        best = a;
                        best_node = j;
                    }
                }
                values[t] = match robust {
                    None => best,
                    Some(w) => {
                        sort_buf.copy_from_slice(&a_buf);
                        sort_buf.sort_unstable_by(|x, y| y.total_cmp(x));
                        weighted_sorted(&sort_buf, w)
                    }
                };
                policy[t] = NonZeroU32::new(best_node);
            }
            SourceTable { values, policy }
        })
        .collect()
}

fn check_kernels(net: &Network, kernels: &KernelStore, grid: TimeGrid) -> Result<(), SolveError> {
    let n = grid.cells();
    let shape_ok = |kernel: &ConditionalKernel, context: &dyn Fn() -> String| {
        if kernel.w_cells() != n {
            Err(SolveError::KernelShape {
                context: context(),
                kernel_cells: kernel.w_cells(),
                grid_cells: n,
            })
        } else {
            Ok(())
        }
    };
    for node in 1..=net.node_count() {
        for &pred in net.predecessors(node) {
            for &succ in net.successors(node) {
                let up = (pred, node);
                let down = (node, succ);
                let kernel = kernels
                    .pair(up, down)
                    .ok_or(SolveError::MissingPairKernel { up, down })?;
                shape_ok(kernel, &|| format!("pair {up:?} -> {down:?}"))?;
            }
        }
    }
    for &link in net.links() {
        let kernel = kernels
            .source(link)
            .ok_or(SolveError::MissingSourceKernel(link))?;
        shape_ok(kernel, &|| format!("source {link:?}"))?;
    }
    Ok(())
}

/// Looks up the on-time arrival probability and first move for a trip
/// starting at `origin` with the given time budget. Budgets between
/// grid points round down to the guaranteed side.
pub fn query(
    sol: &Solution,
    origin: NodeId,
    budget: f64,
) -> Result<(f64, Option<NodeId>), SolveError> {
    if origin == 0 || origin > sol.network.node_count() {
        return Err(SolveError::UnknownNode(origin));
    }
    if !budget.is_finite() || budget < 0.0 || budget > sol.grid.horizon() {
        return Err(SolveError::BudgetOutOfRange {
            budget,
            horizon: sol.grid.horizon(),
        });
    }
    let t_idx = sol.grid.floor_index(budget);
    let table = &sol.sources[(origin - 1) as usize];
    Ok((table.value(t_idx), table.successor(t_idx)))
}
