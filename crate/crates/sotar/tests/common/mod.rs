//! Oracles shared by the integration suites. Everything here is
//! computed by routes independent of the library internals: composite
//! Simpson quadrature, closed forms for integer-shape Gamma laws, and
//! an exhaustive solver for networks with discrete link distributions.

// Each integration test target compiles this module separately and
// uses only a subset of it.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use sotar::network::Link;
use sotar::{ConditionalKernel, KernelStore, Network, TimeGrid};

/// Composite Simpson rule; `steps` is rounded up to an even count.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let steps = steps + steps % 2;
    let h = (hi - lo) / steps as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

/// Iterated Simpson rule over a rectangle.
pub fn simpson2(
    f: impl Fn(f64, f64) -> f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    steps: usize,
) -> f64 {
    simpson(
        |y| simpson(|x| f(x, y), x_range.0, x_range.1, steps),
        y_range.0,
        y_range.1,
        steps,
    )
}

/// Erlang (integer-shape Gamma) distribution function,
/// 1 − e^{−βx} Σ_{k<α} (βx)^k / k!, evaluated without any special
/// functions.
pub fn erlang_cdf(shape: u64, rate: f64, x: f64) -> f64 {
    assert!(shape >= 1 && x >= 0.0);
    let z = rate * x;
    let mut term = 1.0;
    let mut partial = 1.0;
    for k in 1..shape {
        term *= z / k as f64;
        partial += term;
    }
    1.0 - (-z).exp() * partial
}

/// A small network whose link travel times are discrete distributions
/// over grid cells: `mass[c]` is the probability that the link consumes
/// cells 0..=c, i.e. `c + 1` budget indices.
#[derive(Debug)]
pub struct DiscreteNet {
    pub nodes: u32,
    pub destination: u32,
    pub links: Vec<(Link, Vec<f64>)>,
}

impl DiscreteNet {
    fn successors(&self, node: u32) -> Vec<u32> {
        self.links
            .iter()
            .filter(|(link, _)| link.0 == node)
            .map(|(link, _)| link.1)
            .collect()
    }

    fn mass(&self, link: Link) -> &[f64] {
        &self
            .links
            .iter()
            .find(|(l, _)| *l == link)
            .expect("link exists")
            .1
    }

    pub fn network(&self) -> Network {
        let links = self.links.iter().map(|(l, _)| *l).collect();
        Network::new(self.nodes, links, self.destination).expect("valid discrete network")
    }

    /// Wraps the discrete distributions as conditional kernels. Links
    /// are independent, so every pair kernel row is the downstream
    /// marginal.
    pub fn kernel_store(&self, grid: &TimeGrid) -> KernelStore {
        let net = self.network();
        let mut store = KernelStore::new();
        let mut shared: HashMap<Link, Arc<ConditionalKernel>> = HashMap::new();
        for &(link, ref mass) in &self.links {
            let mut row = mass.clone();
            assert!(row.len() <= grid.cells(), "support must fit the grid");
            row.resize(grid.cells(), 0.0);
            let kernel =
                Arc::new(ConditionalKernel::from_shared_row(grid, row).expect("valid row"));
            shared.insert(link, Arc::clone(&kernel));
            store.insert_source(link, kernel);
        }
        for &(down, _) in &self.links {
            for &pred in net.predecessors(down.0) {
                store.insert_pair((pred, down.0), down, Arc::clone(&shared[&down]));
            }
        }
        store
    }

    /// Optimal on-time arrival probabilities by plain backward
    /// induction over (node, budget index). Links are independent, so
    /// the realized upstream time carries no information and the state
    /// space collapses to node and remaining budget.
    pub fn backward_induction(&self, n_cells: usize) -> HashMap<u32, Vec<f64>> {
        let mut values: HashMap<u32, Vec<f64>> = (1..=self.nodes)
            .map(|node| {
                let init = if node == self.destination { 1.0 } else { 0.0 };
                (node, vec![init; n_cells + 1])
            })
            .collect();
        for t in 1..=n_cells {
            for node in 1..=self.nodes {
                if node == self.destination {
                    continue;
                }
                let mut best = 0.0f64;
                for succ in self.successors(node) {
                    let mass = self.mass((node, succ));
                    let mut a = 0.0;
                    for (c, &m) in mass.iter().enumerate().take(t) {
                        a += m * values[&succ][t - 1 - c];
                    }
                    best = best.max(a);
                }
                values.get_mut(&node).unwrap()[t] = best;
            }
        }
        values
    }

    /// Cross-check of `backward_induction` by brute force: enumerates
    /// every deterministic policy over the decision states and takes
    /// the pointwise maximum of the evaluated tables. Only feasible
    /// when (choices per node)^(decision states) stays small.
    pub fn enumerate_policies(&self, n_cells: usize) -> HashMap<u32, Vec<f64>> {
        let decisions: Vec<(u32, usize, Vec<u32>)> = (1..=self.nodes)
            .filter(|&node| node != self.destination)
            .flat_map(|node| {
                let succs = self.successors(node);
                (1..=n_cells).map(move |t| (node, t, succs.clone()))
            })
            .filter(|(_, _, succs)| succs.len() > 1)
            .collect();
        let combos: usize = decisions.iter().map(|(_, _, s)| s.len()).product();
        assert!(combos <= 1 << 14, "policy space too large to enumerate");
        let mut best: HashMap<u32, Vec<f64>> = (1..=self.nodes)
            .map(|node| (node, vec![0.0; n_cells + 1]))
            .collect();
        for combo in 0..combos {
            let mut choice: HashMap<(u32, usize), u32> = HashMap::new();
            let mut rest = combo;
            for (node, t, succs) in &decisions {
                choice.insert((*node, *t), succs[rest % succs.len()]);
                rest /= succs.len();
            }
            let table = self.evaluate_policy(n_cells, &choice);
            for (node, row) in &mut best {
                for (t, slot) in row.iter_mut().enumerate() {
                    *slot = slot.max(table[node][t]);
                }
            }
        }
        best
    }

    fn evaluate_policy(
        &self,
        n_cells: usize,
        choice: &HashMap<(u32, usize), u32>,
    ) -> HashMap<u32, Vec<f64>> {
        let mut values: HashMap<u32, Vec<f64>> = (1..=self.nodes)
            .map(|node| {
                let init = if node == self.destination { 1.0 } else { 0.0 };
                (node, vec![init; n_cells + 1])
            })
            .collect();
        for t in 1..=n_cells {
            for node in 1..=self.nodes {
                if node == self.destination {
                    continue;
                }
                let succs = self.successors(node);
                let succ = match succs.len() {
                    0 => continue,
                    1 => succs[0],
                    _ => choice[&(node, t)],
                };
                let mass = self.mass((node, succ));
                let mut a = 0.0;
                for (c, &m) in mass.iter().enumerate().take(t) {
                    a += m * values[&succ][t - 1 - c];
                }
                values.get_mut(&node).unwrap()[t] = a;
            }
        }
        values
    }
}

/// Longest path length, in links, from any node to the destination of
/// an acyclic network.
pub fn longest_path_links(net: &Network) -> usize {
    fn depth(net: &Network, node: u32, memo: &mut HashMap<u32, usize>) -> usize {
        if node == net.destination() {
            return 0;
        }
        if let Some(&d) = memo.get(&node) {
            return d;
        }
        let d = net
            .successors(node)
            .iter()
            .map(|&succ| 1 + depth(net, succ, memo))
            .max()
            .unwrap_or(0);
        memo.insert(node, d);
        d
    }
    let mut memo = HashMap::new();
    (1..=net.node_count())
        .map(|node| depth(net, node, &mut memo))
        .max()
        .unwrap_or(0)
}
