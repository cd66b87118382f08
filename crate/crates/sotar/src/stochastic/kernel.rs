//! Discretization of conditional travel-time densities onto the shared
//! time grid, and the store that holds one kernel per adjacent link
//! pair.
//!
//! A kernel row `y_idx` holds the probability masses of the downstream
//! travel time falling into each w cell, conditioned on the upstream
//! travel time being exactly `y_idx * step` (upstream realizations are
//! recorded at cell upper edges, so conditioning values land on grid
//! points). Row 0 conditions on y = 0, where the upstream density
//! underflows for shapes above one and the row falls back to the
//! unconditional downstream marginal.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::bivariate::{
    gamma_from_moments, ln_phi_grouped, BivariatePair, GammaMarginal, CONDITIONING_LN_FLOOR,
};
use super::StochasticError;
use crate::grid::TimeGrid;
use crate::network::{Link, LinkParams, Network};

/// A raw conditional row whose total mass falls below this floor is
/// numerically meaningless and is replaced by the marginal fallback.
const KERNEL_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum KernelData {
    /// One row per conditioning cell, flattened row-major.
    PerRow(Vec<f64>),
    /// All rows identical (independent pairs and virtual sources).
    Shared(Vec<f64>),
}

/// Row-stochastic matrix of downstream cell masses conditioned on the
/// upstream cell.
#[derive(Debug, Clone)]
pub struct ConditionalKernel {
    w_cells: usize,
    y_rows: usize,
    data: KernelData,
}

impl ConditionalKernel {
    /// Wraps explicit rows (one per conditioning cell, `grid.cells()+1`
    /// of them); each row is validated and renormalized to sum to 1.
    pub fn from_rows(grid: &TimeGrid, rows: Vec<Vec<f64>>) -> Result<Self, StochasticError> {
        let w_cells = grid.cells();
        let y_rows = w_cells + 1;
        if rows.len() != y_rows {
            return Err(StochasticError::BadKernelRow(
                rows.len(),
                format!("expected {y_rows} rows, got {}", rows.len()),
            ));
        }
        let mut flat = Vec::with_capacity(y_rows * w_cells);
        for (idx, row) in rows.into_iter().enumerate() {
            flat.extend(normalize_row(idx, row, w_cells)?);
        }
        Ok(Self {
            w_cells,
            y_rows,
            data: KernelData::PerRow(flat),
        })
    }

    /// Wraps a single row shared by every conditioning cell.
    pub fn from_shared_row(grid: &TimeGrid, row: Vec<f64>) -> Result<Self, StochasticError> {
        let w_cells = grid.cells();
        Ok(Self {
            w_cells,
            y_rows: w_cells + 1,
            data: KernelData::Shared(normalize_row(0, row, w_cells)?),
        })
    }

    pub fn w_cells(&self) -> usize {
        self.w_cells
    }

    pub fn y_rows(&self) -> usize {
        self.y_rows
    }

    /// Masses of the downstream travel-time cells given upstream cell
    /// `y_idx`.
    pub fn row(&self, y_idx: usize) -> &[f64] {
        match &self.data {
            KernelData::PerRow(flat) => &flat[y_idx * self.w_cells..(y_idx + 1) * self.w_cells],
            KernelData::Shared(row) => row,
        }
    }
}

fn normalize_row(
    idx: usize,
    mut row: Vec<f64>,
    w_cells: usize,
) -> Result<Vec<f64>, StochasticError> {
    if row.len() != w_cells {
        return Err(StochasticError::BadKernelRow(
            idx,
            format!("expected {w_cells} cells, got {}", row.len()),
        ));
    }
    let mut sum = 0.0;
    for &v in &row {
        if !(v.is_finite() && v >= 0.0) {
            return Err(StochasticError::BadKernelRow(idx, format!("entry {v}")));
        }
        sum += v;
    }
    if sum < KERNEL_MASS_FLOOR {
        return Err(StochasticError::BadKernelRow(
            idx,
            format!("total mass {sum}"),
        ));
    }
    for v in &mut row {
        *v /= sum;
    }
    Ok(row)
}

/// Downstream-marginal cell masses from CDF differences, renormalized.
/// Serves as the virtual-source row and as the fallback for conditioning
/// cells the model cannot support.
fn marginal_row(marginal: GammaMarginal, grid: &TimeGrid) -> Vec<f64> {
    let n = grid.cells();
    let mut row = Vec::with_capacity(n);
    let mut prev = 0.0;
    for c in 0..n {
        let next = marginal.cdf(grid.upper_edge(c));
        row.push((next - prev).max(0.0));
        prev = next;
    }
    let sum: f64 = row.iter().sum();
    if sum < KERNEL_MASS_FLOOR {
        // The link cannot be traversed within the horizon; all mass goes
        // to the last cell so downstream values treat it as horizon-long.
        row.fill(0.0);
        row[n - 1] = 1.0;
        return row;
    }
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// Discretizes the conditional density of a pair onto the grid: entry
/// [y][w] is the conditional density at the w-cell midpoint times the
/// step, then each row is renormalized to sum to exactly one.
pub fn build_conditional_kernel(
    pair: &BivariatePair,
    grid: &TimeGrid,
) -> Result<ConditionalKernel, StochasticError> {
    let n = grid.cells();
    if pair.correlation() == 0.0 {
        return ConditionalKernel::from_shared_row(grid, marginal_row(pair.downstream(), grid));
    }
    let fallback = marginal_row(pair.downstream(), grid);
    let rows: Vec<Result<Vec<f64>, StochasticError>> = (0..=n)
        .into_par_iter()
        .map(|y_idx| conditional_row(pair, grid, y_idx, &fallback))
        .collect();
    let mut flat = Vec::with_capacity((n + 1) * n);
    for row in rows {
        flat.extend(row?);
    }
    Ok(ConditionalKernel {
        w_cells: n,
        y_rows: n + 1,
        data: KernelData::PerRow(flat),
    })
}

fn conditional_row(
    pair: &BivariatePair,
    grid: &TimeGrid,
    y_idx: usize,
    fallback: &[f64],
) -> Result<Vec<f64>, StochasticError> {
    let n = grid.cells();
    let y = y_idx as f64 * grid.step();
    let ln_fy = pair.upstream().ln_pdf(y);
    if ln_fy < CONDITIONING_LN_FLOOR {
        return Ok(fallback.to_vec());
    }
    let mut row = Vec::with_capacity(n);
    let mut sum = 0.0;
    for c in 0..n {
        let w = grid.midpoint(c);
        let p = pair.series_point(w, y);
        let mass = if p.ln_prefactor == f64::NEG_INFINITY {
            0.0
        } else {
            let ln_phi = ln_phi_grouped(p.mu, p.nu, p.a_tilde, p.b_tilde)?;
            (p.ln_prefactor + ln_phi - ln_fy).exp() * grid.step()
        };
        sum += mass;
        row.push(mass);
    }
    if sum < KERNEL_MASS_FLOOR {
        return Ok(fallback.to_vec());
    }
    for v in &mut row {
        *v /= sum;
    }
    Ok(row)
}

/// Conditional kernels for every adjacent link pair of a network, plus
/// the unconditional first-link kernels used at trip starts. Kernels
/// are deduplicated by parameter set, so networks with repeated link
/// statistics build only a handful of distinct matrices.
#[derive(Debug, Clone, Default)]
pub struct KernelStore {
    pair_kernels: HashMap<(Link, Link), Arc<ConditionalKernel>>,
    source_kernels: HashMap<Link, Arc<ConditionalKernel>>,
}

impl KernelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds all kernels a solver run over `net` needs.
    pub fn build(
        net: &Network,
        params: &LinkParams,
        grid: &TimeGrid,
    ) -> Result<Self, StochasticError> {
        let mut store = Self::new();
        let mut pair_memo: HashMap<[u64; 5], Arc<ConditionalKernel>> = HashMap::new();
        for node in 1..=net.node_count() {
            for &pred in net.predecessors(node) {
                for &succ in net.successors(node) {
                    let up = (pred, node);
                    let down = (node, succ);
                    let key = [
                        params.mean(up).to_bits(),
                        params.variance(up).to_bits(),
                        params.mean(down).to_bits(),
                        params.variance(down).to_bits(),
                        params.covariance(up, down).to_bits(),
                    ];
                    let kernel = match pair_memo.get(&key) {
                        Some(k) => Arc::clone(k),
                        None => {
                            let k = Arc::new(Self::pair_kernel(params, up, down, grid).map_err(
                                |e| StochasticError::PairKernel {
                                    up,
                                    down,
                                    source: Box::new(e),
                                },
                            )?);
                            pair_memo.insert(key, Arc::clone(&k));
                            k
                        }
                    };
                    store.pair_kernels.insert((up, down), kernel);
                }
            }
        }
        let mut source_memo: HashMap<[u64; 2], Arc<ConditionalKernel>> = HashMap::new();
        for &link in net.links() {
            let key = [params.mean(link).to_bits(), params.variance(link).to_bits()];
            let kernel = match source_memo.get(&key) {
                Some(k) => Arc::clone(k),
                None => {
                    let marginal = gamma_from_moments(params.mean(link), params.variance(link))?;
                    let k = Arc::new(ConditionalKernel::from_shared_row(
                        grid,
                        marginal_row(marginal, grid),
                    )?);
                    source_memo.insert(key, Arc::clone(&k));
                    k
                }
            };
            store.source_kernels.insert(link, kernel);
        }
        Ok(store)
    }

    fn pair_kernel(
        params: &LinkParams,
        up: Link,
        down: Link,
        grid: &TimeGrid,
    ) -> Result<ConditionalKernel, StochasticError> {
        let upstream = gamma_from_moments(params.mean(up), params.variance(up))?;
        let downstream = gamma_from_moments(params.mean(down), params.variance(down))?;
        let rho =
            params.covariance(up, down) / (params.variance(up) * params.variance(down)).sqrt();
        let pair = BivariatePair::new(upstream, downstream, rho)?;
        build_conditional_kernel(&pair, grid)
    }

    /// Kernel for traversing `down` after having traversed `up`.
    pub fn pair(&self, up: Link, down: Link) -> Option<&Arc<ConditionalKernel>> {
        self.pair_kernels.get(&(up, down))
    }

    /// Unconditional kernel for `link` as the first link of a trip.
    pub fn source(&self, link: Link) -> Option<&Arc<ConditionalKernel>> {
        self.source_kernels.get(&link)
    }

    /// Registers a hand-built pair kernel (used by tests and synthetic
    /// networks with non-Gamma link laws).
    pub fn insert_pair(&mut self, up: Link, down: Link, kernel: Arc<ConditionalKernel>) {
        self.pair_kernels.insert((up, down), kernel);
    }

    pub fn insert_source(&mut self, link: Link, kernel: Arc<ConditionalKernel>) {
        self.source_kernels.insert(link, kernel);
    }

    pub fn pair_links(&self) -> impl Iterator<Item = (&(Link, Link), &Arc<ConditionalKernel>)> {
        self.pair_kernels.iter()
    }

    pub fn source_links(&self) -> impl Iterator<Item = (&Link, &Arc<ConditionalKernel>)> {
        self.source_kernels.iter()
    }
}
