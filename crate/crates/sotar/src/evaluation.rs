//! Policy evaluation: Monte Carlo trip simulation (with optional link
//! failures), reliability-curve extraction, and head-to-head policy
//! comparison.
//!
//! The simulator walks the same discretized state space as the solver:
//! budgets and realized durations are whole cell counts, and travel
//! times are drawn from the conditional kernel rows by inverse CDF. A
//! trip therefore estimates exactly the quantity the tables store.

use crate::network::{Link, Network, NodeId};
use crate::reliability::{compute_a, solve_classic, solve_robust, RobustnessWeights, Solution};
use crate::stochastic::KernelStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("link {0:?} is not in the network")]
    UnknownLink(Link),
    #[error("node {0} is not in the network")]
    UnknownNode(NodeId),
    #[error("realized duration {y} outside [0, {horizon}]")]
    YOutOfRange { y: f64, horizon: f64 },
    #[error("budget {budget} outside [0, {horizon}]")]
    BudgetOutOfRange { budget: f64, horizon: f64 },
    #[error("failure time {0} must be nonnegative and finite")]
    BadFailureTime(f64),
    #[error("at least one trip is required")]
    NoTrips,
    #[error("no kernel available for {0}")]
    MissingKernel(String),
    #[error("the two solutions cover different networks or grids")]
    MismatchedSolutions,
}

/// Where a simulated trip begins: at a node with no history, or on an
/// edge with the upstream travel time already realized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TripStart {
    Origin(NodeId),
    EdgeState { edge: Link, y: f64 },
}

/// One link becoming untraversable at an absolute time since the start
/// of the trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub link: Link,
    pub at: f64,
}

/// What a trip does when its chosen link turns out to have failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplanMode {
    /// Re-solve the tables on the network without the failed links:
    /// expensive but exact.
    Subgraph,
    /// Divert to the best surviving successor according to the already
    /// solved tables: cheap but ignores failures further downstream.
    NextBest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub events: Vec<FailureEvent>,
    pub mode: ReplanMode,
}

/// Aggregate outcome of a batch of simulated trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripStats {
    pub trips: u64,
    pub on_time: u64,
    /// Trips that reached the destination at all, on time or late.
    pub reached: u64,
    /// Trips that ran out of usable successors after failures.
    pub trapped: u64,
    pub probability: f64,
    /// Half-width of the 99% normal-approximation confidence interval
    /// around `probability`.
    pub ci99_half_width: f64,
    /// Mean realized travel time over trips that reached the
    /// destination; zero when none did.
    pub mean_travel_time: f64,
}

/// One point of a reliability curve at fixed realized upstream time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub u: f64,
    pub successor: Option<NodeId>,
}

/// Head-to-head comparison of two solutions on the same state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Reliability of the first solution minus the second at the fixed
    /// budget.
    pub probability_gap: f64,
    /// Smallest budget at which each solution reaches the reliability
    /// target; none if the target is unattainable within the horizon.
    pub budget_first: Option<f64>,
    pub budget_second: Option<f64>,
    /// Extra budget the second solution needs: second minus first, when
    /// both attain the target.
    pub budget_gap: Option<f64>,
}

const Z_99: f64 = 2.5758293035489004;

/// Runs `trips` independent trips under the solved policy and reports
/// on-time statistics. Deterministic given `seed`: each trip uses its
/// own counter-derived random stream, so results do not depend on
/// thread scheduling.
pub fn simulate_trips(
    kernels: &KernelStore,
    sol: &Solution,
    start: TripStart,
    budget: f64,
    trips: u64,
    seed: u64,
    failures: Option<&FailureSpec>,
) -> Result<TripStats, EvalError> {
    if trips == 0 {
        return Err(EvalError::NoTrips);
    }
    let net = sol.network();
    let grid = sol.grid();
    if !budget.is_finite() || budget < 0.0 || budget > grid.horizon() {
        return Err(EvalError::BudgetOutOfRange {
            budget,
            horizon: grid.horizon(),
        });
    }
    match start {
        TripStart::Origin(node) => {
            if node == 0 || node > net.node_count() {
                return Err(EvalError::UnknownNode(node));
            }
        }
        TripStart::EdgeState { edge, y } => {
            if !net.contains_link(edge) {
                return Err(EvalError::UnknownLink(edge));
            }
            if !y.is_finite() || y < 0.0 || y > grid.horizon() {
                return Err(EvalError::YOutOfRange {
                    y,
                    horizon: grid.horizon(),
                });
            }
        }
    }
    validate_kernels(net, kernels)?;
    let plan = failures
        .map(|spec| FailurePlan::build(spec, sol, kernels))
        .transpose()?;
    let ctx = SimContext {
        kernels,
        sol,
        start,
        t0: grid.floor_index(budget) as i64,
        plan,
    };
    let totals = (0..trips)
        .into_par_iter()
        .map(|trip| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trip);
            run_trip(&ctx, rng)
        })
        .reduce(Outcome::default, Outcome::merge);

    let probability = totals.on_time as f64 / trips as f64;
    Ok(TripStats {
        trips,
        on_time: totals.on_time,
        reached: totals.reached,
        trapped: totals.trapped,
        probability,
        ci99_half_width: Z_99 * (probability * (1.0 - probability) / trips as f64).sqrt(),
        mean_travel_time: if totals.reached > 0 {
            totals.travel_cells as f64 * grid.step() / totals.reached as f64
        } else {
            0.0
        },
    })
}

/// Reliability and policy as a function of the budget, on one edge with
/// the realized upstream duration fixed to its enclosing cell.
pub fn extract_curve(sol: &Solution, edge: Link, y: f64) -> Result<Vec<CurvePoint>, EvalError> {
    let grid = sol.grid();
    let table = sol.edge_table(edge).ok_or(EvalError::UnknownLink(edge))?;
    if !y.is_finite() || y < 0.0 || y > grid.horizon() {
        return Err(EvalError::YOutOfRange {
            y,
            horizon: grid.horizon(),
        });
    }
    let y_idx = grid.upper_index(y);
    Ok((0..=grid.cells())
        .map(|t_idx| CurvePoint {
            t: t_idx as f64 * grid.step(),
            u: table.value(t_idx, y_idx),
            successor: table.successor(t_idx, y_idx),
        })
        .collect())
}

/// Budgets at which the recommended successor changes, with the
/// successor on each side of the change.
pub fn policy_switches(curve: &[CurvePoint]) -> Vec<(f64, Option<NodeId>, Option<NodeId>)> {
    curve
        .windows(2)
        .filter(|w| w[1].successor != w[0].successor)
        .map(|w| (w[1].t, w[0].successor, w[1].successor))
        .collect()
}

/// Compares two solutions on the same edge state: the reliability gap
/// at a fixed budget and the extra budget the second solution needs to
/// reach a reliability target.
pub fn price_of_robustness(
    first: &Solution,
    second: &Solution,
    edge: Link,
    y: f64,
    budget: f64,
    target: f64,
) -> Result<RobustnessReport, EvalError> {
    if first.network() != second.network() || first.grid() != second.grid() {
        return Err(EvalError::MismatchedSolutions);
    }
    let grid = first.grid();
    if !budget.is_finite() || budget < 0.0 || budget > grid.horizon() {
        return Err(EvalError::BudgetOutOfRange {
            budget,
            horizon: grid.horizon(),
        });
    }
    let table_first = first.edge_table(edge).ok_or(EvalError::UnknownLink(edge))?;
    let table_second = second
        .edge_table(edge)
        .ok_or(EvalError::UnknownLink(edge))?;
    if !y.is_finite() || y < 0.0 || y > grid.horizon() {
        return Err(EvalError::YOutOfRange {
            y,
            horizon: grid.horizon(),
        });
    }
    let y_idx = grid.upper_index(y);
    let t_idx = grid.floor_index(budget);
    let probability_gap = table_first.value(t_idx, y_idx) - table_second.value(t_idx, y_idx);
    let first_reaching = |table: &crate::reliability::EdgeTable| {
        (0..=grid.cells())
            .find(|&t| table.value(t, y_idx) >= target)
            .map(|t| t as f64 * grid.step())
    };
    let budget_first = first_reaching(table_first);
    let budget_second = first_reaching(table_second);
    let budget_gap = match (budget_first, budget_second) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    Ok(RobustnessReport {
        probability_gap,
        budget_first,
        budget_second,
        budget_gap,
    })
}

#[derive(Default, Clone, Copy)]
struct Outcome {
    on_time: u64,
    reached: u64,
    trapped: u64,
    travel_cells: u64,
}

impl Outcome {
    fn merge(self, other: Self) -> Self {
        Self {
            on_time: self.on_time + other.on_time,
            reached: self.reached + other.reached,
            trapped: self.trapped + other.trapped,
            travel_cells: self.travel_cells + other.travel_cells,
        }
    }
}

struct SimContext<'a> {
    kernels: &'a KernelStore,
    sol: &'a Solution,
    start: TripStart,
    t0: i64,
    plan: Option<FailurePlan>,
}

struct FailurePlan {
    /// (link, first elapsed cell at which it is unusable), ascending.
    events: Vec<(Link, u64)>,
    mode: ReplanMode,
    /// Re-solved tables per prefix of activated failures; index p
    /// covers the first p events. None where the reduced network
    /// cannot reach the destination any more.
    subgraphs: Vec<Option<Solution>>,
}

impl FailurePlan {
    fn build(spec: &FailureSpec, sol: &Solution, kernels: &KernelStore) -> Result<Self, EvalError> {
        let net = sol.network();
        let step = sol.grid().step();
        let mut events = Vec::with_capacity(spec.events.len());
        for event in &spec.events {
            if !net.contains_link(event.link) {
                return Err(EvalError::UnknownLink(event.link));
            }
            if !event.at.is_finite() || event.at < 0.0 {
                return Err(EvalError::BadFailureTime(event.at));
            }
            let scaled = event.at / step;
            let at_cells = (scaled - 1e-9 * scaled.max(1.0)).ceil().max(0.0) as u64;
            events.push((event.link, at_cells));
        }
        events.sort_unstable_by_key(|&(link, at)| (at, link));
        let mut subgraphs = vec![None];
        if spec.mode == ReplanMode::Subgraph {
            for p in 1..=events.len() {
                let removed: Vec<Link> = events[..p].iter().map(|&(l, _)| l).collect();
                let sub = net
                    .remove_links(&removed)
                    .ok()
                    .and_then(|sub| solve_like(sol, &sub, kernels));
                subgraphs.push(sub);
            }
        } else {
            subgraphs.resize_with(events.len() + 1, || None);
        }
        Ok(Self {
            events,
            mode: spec.mode,
            subgraphs,
        })
    }

    fn is_failed(&self, link: Link, elapsed: u64) -> bool {
        self.events
            .iter()
            .any(|&(l, at)| l == link && elapsed >= at)
    }

    fn prefix_at(&self, elapsed: u64) -> usize {
        self.events
            .iter()
            .take_while(|&&(_, at)| at <= elapsed)
            .count()
    }
}

/// Re-solves on a reduced network with the same settings as the
/// original solution. If removing links lowered the maximum out-degree,
/// the weight vector is truncated and renormalized to fit.
fn solve_like(sol: &Solution, sub: &Network, kernels: &KernelStore) -> Option<Solution> {
    let grid = sol.grid();
    match sol.weights() {
        None => solve_classic(sub, kernels, grid, sol.epsilon(), sol.max_iter()).ok(),
        Some(w) => {
            let lambda = sub.max_out_degree();
            let weights = if lambda == w.len() {
                w.clone()
            } else {
                let head = &w.weights()[..lambda.min(w.len())];
                let total: f64 = head.iter().sum();
                if total <= 0.0 {
                    return None;
                }
                RobustnessWeights::new(head.iter().map(|&x| x / total).collect()).ok()?
            };
            solve_robust(sub, kernels, grid, &weights, sol.epsilon(), sol.max_iter()).ok()
        }
    }
}

fn validate_kernels(net: &Network, kernels: &KernelStore) -> Result<(), EvalError> {
    for node in 1..=net.node_count() {
        for &pred in net.predecessors(node) {
            for &succ in net.successors(node) {
                if kernels.pair((pred, node), (node, succ)).is_none() {
                    return Err(EvalError::MissingKernel(format!(
                        "pair ({pred}, {node}) -> ({node}, {succ})"
                    )));
                }
            }
        }
    }
    for &link in net.links() {
        if kernels.source(link).is_none() {
            return Err(EvalError::MissingKernel(format!("source {link:?}")));
        }
    }
    Ok(())
}

fn lookup(
    sol: &Solution,
    prev: Option<Link>,
    node: NodeId,
    t_idx: usize,
    y_idx: usize,
) -> Option<NodeId> {
    if let Some(edge) = prev {
        if let Some(table) = sol.edge_table(edge) {
            return table.successor(t_idx, y_idx);
        }
    }
    sol.source_table(node)?.successor(t_idx)
}

/// Best surviving successor according to the already solved tables,
/// recomputing the committed-successor value on the fly.
fn next_best(
    ctx: &SimContext,
    prev: Option<Link>,
    node: NodeId,
    t_idx: usize,
    y_idx: usize,
    plan: &FailurePlan,
    elapsed: u64,
) -> Option<NodeId> {
    let mut best = f64::NEG_INFINITY;
    let mut pick = None;
    for &j in ctx.sol.network().successors(node) {
        let link = (node, j);
        if plan.is_failed(link, elapsed) {
            continue;
        }
        let table = ctx.sol.edge_table(link)?;
        let a = match prev {
            Some(up) => compute_a(
                ctx.kernels.pair(up, link).expect("validated upfront"),
                table,
                t_idx,
                y_idx,
            ),
            None => compute_a(
                ctx.kernels.source(link).expect("validated upfront"),
                table,
                t_idx,
                0,
            ),
        };
        if a > best {
            best = a;
            pick = Some(j);
        }
    }
    pick
}

fn sample_cell(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

fn run_trip(ctx: &SimContext, mut rng: ChaCha8Rng) -> Outcome {
    let dest = ctx.sol.network().destination();
    let grid = ctx.sol.grid();
    let (mut node, mut prev, mut y_idx) = match ctx.start {
        TripStart::Origin(node) => (node, None, 0),
        TripStart::EdgeState { edge, y } => (edge.1, Some(edge), grid.upper_index(y)),
    };
    let mut t_rem = ctx.t0;
    let mut elapsed = 0u64;
    let mut active = ctx.sol;
    let mut out = Outcome::default();
    loop {
        if node == dest {
            out.reached = 1;
            out.travel_cells = elapsed;
            if t_rem >= 0 {
                out.on_time = 1;
            }
            return out;
        }
        if t_rem <= 0 {
            return out;
        }
        let t_idx = t_rem as usize;
        let Some(mut next) = lookup(active, prev, node, t_idx, y_idx) else {
            out.trapped = 1;
            return out;
        };
        if let Some(plan) = &ctx.plan {
            if plan.is_failed((node, next), elapsed) {
                match plan.mode {
                    ReplanMode::Subgraph => {
                        let Some(sub) = plan.subgraphs[plan.prefix_at(elapsed)].as_ref() else {
                            out.trapped = 1;
                            return out;
                        };
                        active = sub;
                        match lookup(active, prev, node, t_idx, y_idx) {
                            Some(j) if !plan.is_failed((node, j), elapsed) => next = j,
                            _ => {
                                out.trapped = 1;
                                return out;
                            }
                        }
                    }
                    ReplanMode::NextBest => {
                        match next_best(ctx, prev, node, t_idx, y_idx, plan, elapsed) {
                            Some(j) => next = j,
                            None => {
                                out.trapped = 1;
                                return out;
                            }
                        }
                    }
                }
            }
        }
        let link = (node, next);
        let row = match prev {
            Some(up) => ctx
                .kernels
                .pair(up, link)
                .expect("validated upfront")
                .row(y_idx),
            None => ctx.kernels.source(link).expect("validated upfront").row(0),
        };
        let cell = sample_cell(row, rng.random::<f64>());
        let w = (cell + 1) as i64;
        elapsed += w as u64;
        t_rem -= w;
        y_idx = cell + 1;
        prev = Some(link);
        node = next;
    }
}
