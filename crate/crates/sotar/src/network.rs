//! Directed road-network representation and per-link travel-time moments.
//!
//! Nodes are numbered `1..=node_count`. Links are ordered pairs of node
//! ids; parallel links and self-loops are rejected. The destination is a
//! distinguished node that every routing query targets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

/// Directed link as a (tail, head) pair.
pub type Link = (NodeId, NodeId);

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network must have at least one node")]
    NoNodes,
    #[error("link ({0}, {1}) references a node outside 1..={2}")]
    NodeOutOfRange(NodeId, NodeId, u32),
    #[error("duplicate link ({0}, {1})")]
    DuplicateLink(NodeId, NodeId),
    #[error("self-loop at node {0}")]
    SelfLoop(NodeId),
    #[error("destination {0} is not a valid node id")]
    BadDestination(NodeId),
    #[error("destination {0} has no incoming link")]
    UnreachableDestination(NodeId),
    #[error("link ({0}, {1}) has no travel-time parameters")]
    MissingParams(NodeId, NodeId),
    #[error("link ({0}, {1}) mean must be positive, got {2}")]
    NonPositiveMean(NodeId, NodeId, f64),
    #[error("link ({0}, {1}) variance must be positive, got {2}")]
    NonPositiveVariance(NodeId, NodeId, f64),
    #[error("covariance for pair ({0:?}, {1:?}) must be nonnegative, got {2}")]
    NegativeCovariance(Link, Link, f64),
    #[error("pair ({0:?}, {1:?}) implies correlation {2}, outside [0, 1)")]
    CorrelationOutOfRange(Link, Link, f64),
    #[error("covariance override references non-adjacent pair ({0:?}, {1:?})")]
    NonAdjacentOverride(Link, Link),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Immutable directed graph with a destination node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NetworkShadow", into = "NetworkShadow")]
pub struct Network {
    node_count: u32,
    destination: NodeId,
    links: Vec<Link>,
    link_index: HashMap<Link, usize>,
    successors: Vec<Vec<NodeId>>,
    predecessors: Vec<Vec<NodeId>>,
}

impl Network {
    /// Builds a network from a link list, validating node ranges,
    /// duplicates, self-loops, and destination reachability.
    pub fn new(
        node_count: u32,
        mut links: Vec<Link>,
        destination: NodeId,
    ) -> Result<Self, NetworkError> {
        if node_count == 0 {
            return Err(NetworkError::NoNodes);
        }
        if destination == 0 || destination > node_count {
            return Err(NetworkError::BadDestination(destination));
        }
        links.sort_unstable();
        let mut link_index = HashMap::with_capacity(links.len());
        let mut successors = vec![Vec::new(); node_count as usize];
        let mut predecessors = vec![Vec::new(); node_count as usize];
        for (idx, &(tail, head)) in links.iter().enumerate() {
            if tail == 0 || tail > node_count || head == 0 || head > node_count {
                return Err(NetworkError::NodeOutOfRange(tail, head, node_count));
            }
            if tail == head {
                return Err(NetworkError::SelfLoop(tail));
            }
            if link_index.insert((tail, head), idx).is_some() {
                return Err(NetworkError::DuplicateLink(tail, head));
            }
            successors[(tail - 1) as usize].push(head);
            predecessors[(head - 1) as usize].push(tail);
        }
        if predecessors[(destination - 1) as usize].is_empty() {
            return Err(NetworkError::UnreachableDestination(destination));
        }
        for list in successors.iter_mut().chain(predecessors.iter_mut()) {
            list.sort_unstable();
        }
        Ok(Self {
            node_count,
            destination,
            links,
            link_index,
            successors,
            predecessors,
        })
    }

    pub fn node_count(&self) -> u32 {
        self.node_count
    }

    pub fn destination(&self) -> NodeId {
        self.destination
    }

    /// All links in ascending (tail, head) order.
    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Position of `link` in the sorted link list.
    pub fn link_index(&self, link: Link) -> Option<usize> {
        self.link_index.get(&link).copied()
    }

    pub fn contains_link(&self, link: Link) -> bool {
        self.link_index.contains_key(&link)
    }

    /// Heads of links leaving `node`, ascending.
    pub fn successors(&self, node: NodeId) -> &[NodeId] {
        &self.successors[(node - 1) as usize]
    }

    /// Tails of links entering `node`, ascending.
    pub fn predecessors(&self, node: NodeId) -> &[NodeId] {
        &self.predecessors[(node - 1) as usize]
    }

    /// Maximum out-degree over non-destination nodes.
    pub fn max_out_degree(&self) -> usize {
        (1..=self.node_count)
            .filter(|&n| n != self.destination)
            .map(|n| self.successors(n).len())
            .max()
            .unwrap_or(0)
    }

    /// Copy of this network with the given links removed. Fails if the
    /// destination becomes unreachable.
    pub fn remove_links(&self, removed: &[Link]) -> Result<Self, NetworkError> {
        let removed: HashSet<Link> = removed.iter().copied().collect();
        let kept: Vec<Link> = self
            .links
            .iter()
            .copied()
            .filter(|l| !removed.contains(l))
            .collect();
        Self::new(self.node_count, kept, self.destination)
    }
}

/// Serialized form of [`Network`]; deserializing revalidates through
/// [`Network::new`].
#[derive(Serialize, Deserialize)]
struct NetworkShadow {
    nodes: u32,
    destination: NodeId,
    links: Vec<Link>,
}

impl From<Network> for NetworkShadow {
    fn from(net: Network) -> Self {
        Self {
            nodes: net.node_count,
            destination: net.destination,
            links: net.links,
        }
    }
}

impl TryFrom<NetworkShadow> for Network {
    type Error = NetworkError;

    fn try_from(shadow: NetworkShadow) -> Result<Self, NetworkError> {
        Network::new(shadow.nodes, shadow.links, shadow.destination)
    }
}

/// Per-link travel-time moments plus covariances between the travel
/// times of adjacent link pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "LinkParamsShadow", into = "LinkParamsShadow")]
pub struct LinkParams {
    means: BTreeMap<Link, f64>,
    variances: BTreeMap<Link, f64>,
    default_covariance: f64,
    covariance_overrides: BTreeMap<(Link, Link), f64>,
}

impl LinkParams {
    /// Starts an empty parameter set with a covariance applied to every
    /// adjacent link pair unless overridden.
    pub fn new(default_covariance: f64) -> Self {
        Self {
            means: BTreeMap::new(),
            variances: BTreeMap::new(),
            default_covariance,
            covariance_overrides: BTreeMap::new(),
        }
    }

    pub fn set_link(&mut self, link: Link, mean: f64, variance: f64) {
        self.means.insert(link, mean);
        self.variances.insert(link, variance);
    }

    /// Overrides the covariance for one adjacent pair (upstream link
    /// followed by downstream link).
    pub fn set_covariance(&mut self, upstream: Link, downstream: Link, cov: f64) {
        self.covariance_overrides
            .insert((upstream, downstream), cov);
    }

    pub fn mean(&self, link: Link) -> f64 {
        self.means[&link]
    }

    pub fn variance(&self, link: Link) -> f64 {
        self.variances[&link]
    }

    pub fn covariance(&self, upstream: Link, downstream: Link) -> f64 {
        self.covariance_overrides
            .get(&(upstream, downstream))
            .copied()
            .unwrap_or(self.default_covariance)
    }

    /// Correlation implied by the covariance of the pair.
    pub fn correlation(&self, upstream: Link, downstream: Link) -> f64 {
        self.covariance(upstream, downstream)
            / (self.variance(upstream) * self.variance(downstream)).sqrt()
    }

    /// Checks that every network link has positive moments, that
    /// covariances are nonnegative, that every adjacent pair implies a
    /// correlation in [0, 1), and that overrides reference adjacent
    /// pairs.
    pub fn validate_for(&self, net: &Network) -> Result<(), NetworkError> {
        for &link in net.links() {
            let (tail, head) = link;
            let mean = *self
                .means
                .get(&link)
                .ok_or(NetworkError::MissingParams(tail, head))?;
            let var = *self
                .variances
                .get(&link)
                .ok_or(NetworkError::MissingParams(tail, head))?;
            if !(mean.is_finite() && mean > 0.0) {
                return Err(NetworkError::NonPositiveMean(tail, head, mean));
            }
            if !(var.is_finite() && var > 0.0) {
                return Err(NetworkError::NonPositiveVariance(tail, head, var));
            }
        }
        for (&(up, down), &cov) in &self.covariance_overrides {
            if !(net.contains_link(up) && net.contains_link(down) && up.1 == down.0) {
                return Err(NetworkError::NonAdjacentOverride(up, down));
            }
            if cov < 0.0 {
                return Err(NetworkError::NegativeCovariance(up, down, cov));
            }
        }
        if self.default_covariance < 0.0 {
            return Err(NetworkError::NegativeCovariance(
                (0, 0),
                (0, 0),
                self.default_covariance,
            ));
        }
        for node in 1..=net.node_count() {
            for &pred in net.predecessors(node) {
                for &succ in net.successors(node) {
                    let up = (pred, node);
                    let down = (node, succ);
                    let rho = self.correlation(up, down);
                    if !(0.0..1.0).contains(&rho) {
                        return Err(NetworkError::CorrelationOutOfRange(up, down, rho));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Serialized form of [`LinkParams`]; maps become sorted entry lists so
/// the JSON stays byte-deterministic and map keys stay simple.
#[derive(Serialize, Deserialize)]
struct LinkParamsShadow {
    default_covariance: f64,
    links: Vec<(Link, f64, f64)>,
    overrides: Vec<(Link, Link, f64)>,
}

impl From<LinkParams> for LinkParamsShadow {
    fn from(params: LinkParams) -> Self {
        let links = params
            .means
            .iter()
            .map(|(&link, &mean)| (link, mean, params.variances[&link]))
            .collect();
        let overrides = params
            .covariance_overrides
            .iter()
            .map(|(&(up, down), &cov)| (up, down, cov))
            .collect();
        Self {
            default_covariance: params.default_covariance,
            links,
            overrides,
        }
    }
}

impl From<LinkParamsShadow> for LinkParams {
    fn from(shadow: LinkParamsShadow) -> Self {
        let mut params = LinkParams::new(shadow.default_covariance);
        for (link, mean, variance) in shadow.links {
            params.set_link(link, mean, variance);
        }
        for (up, down, cov) in shadow.overrides {
            params.set_covariance(up, down, cov);
        }
        params
    }
}

const GRID_SIDE: u32 = 5;

/// Built-in 25-node benchmark network: a 5×5 grid numbered row-major,
/// with directed east and south links and the south link out of node 4
/// removed (39 links). The destination is the bottom-right corner. All
/// links have mean 9 and variance 3 except link (3, 4) with mean 5;
/// adjacent link pairs share covariance 1.5.
pub fn benchmark_grid() -> (Network, LinkParams) {
    build_grid(false)
}

/// Variant of [`benchmark_grid`] that restores the link count to 40 by
/// adding a compensating diagonal link (5, 9). Maximum out-degree stays
/// at 2 and the graph remains acyclic.
pub fn benchmark_grid_compensated() -> (Network, LinkParams) {
    build_grid(true)
}

fn build_grid(compensated: bool) -> (Network, LinkParams) {
    let node = |r: u32, c: u32| r * GRID_SIDE + c + 1;
    let mut links = Vec::new();
    for r in 0..GRID_SIDE {
        for c in 0..GRID_SIDE - 1 {
            links.push((node(r, c), node(r, c + 1)));
        }
    }
    for r in 0..GRID_SIDE - 1 {
        for c in 0..GRID_SIDE {
            if node(r, c) == 4 {
                continue;
            }
            links.push((node(r, c), node(r + 1, c)));
        }
    }
    if compensated {
        links.push((5, 9));
    }
    let destination = node(GRID_SIDE - 1, GRID_SIDE - 1);
    let net = Network::new(GRID_SIDE * GRID_SIDE, links, destination)
        .expect("benchmark grid is statically valid");
    let mut params = LinkParams::new(1.5);
    for &link in net.links() {
        let mean = if link == (3, 4) { 5.0 } else { 9.0 };
        params.set_link(link, mean, 3.0);
    }
    (net, params)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    nodes: u32,
    destination: NodeId,
    links: Vec<LinkEntry>,
    pair_covariance: PairCovariance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    tail: NodeId,
    head: NodeId,
    mean: f64,
    variance: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairCovariance {
    default: f64,
    #[serde(default)]
    overrides: Vec<CovOverride>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovOverride {
    upstream: [NodeId; 2],
    downstream: [NodeId; 2],
    cov: f64,
}

/// Loads a network and its parameters from a JSON file and validates
/// every structural and parameter invariant.
pub fn load_network(path: &Path) -> Result<(Network, LinkParams), NetworkError> {
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: NetworkFile = serde_json::from_str(&text).map_err(|source| NetworkError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    let links: Vec<Link> = file.links.iter().map(|l| (l.tail, l.head)).collect();
    let net = Network::new(file.nodes, links, file.destination)?;
    let mut params = LinkParams::new(file.pair_covariance.default);
    for l in &file.links {
        params.set_link((l.tail, l.head), l.mean, l.variance);
    }
    for o in &file.pair_covariance.overrides {
        params.set_covariance(
            (o.upstream[0], o.upstream[1]),
            (o.downstream[0], o.downstream[1]),
            o.cov,
        );
    }
    params.validate_for(&net)?;
    Ok((net, params))
}

/// Writes a network and its parameters as JSON in the same schema that
/// [`load_network`] reads.
pub fn save_network(path: &Path, net: &Network, params: &LinkParams) -> Result<(), NetworkError> {
    let file = NetworkFile {
        nodes: net.node_count(),
        destination: net.destination(),
        links: net
            .links()
            .iter()
            .map(|&(tail, head)| LinkEntry {
                tail,
                head,
                mean: params.mean((tail, head)),
                variance: params.variance((tail, head)),
            })
            .collect(),
        pair_covariance: PairCovariance {
            default: params.default_covariance,
            overrides: params
                .covariance_overrides
                .iter()
                .map(|(&(up, down), &cov)| CovOverride {
                    upstream: [up.0, up.1],
                    downstream: [down.0, down.1],
                    cov,
                })
                .collect(),
        },
    };
    let text = serde_json::to_string_pretty(&file).expect("schema serializes");
    std::fs::write(path, text).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_expected_shape() {
        let (net, params) = benchmark_grid();
        assert_eq!(net.node_count(), 25);
        assert_eq!(net.links().len(), 39);
        assert_eq!(net.destination(), 25);
        assert_eq!(net.successors(3), &[4, 8]);
        assert_eq!(net.successors(4), &[5]);
        assert_eq!(net.successors(8), &[9, 13]);
        assert_eq!(net.successors(25), &[] as &[NodeId]);
        assert_eq!(net.max_out_degree(), 2);
        assert!(!net.contains_link((4, 9)));
        assert_eq!(params.mean((3, 4)), 5.0);
        assert_eq!(params.mean((1, 2)), 9.0);
        assert_eq!(params.variance((3, 4)), 3.0);
        assert_eq!(params.covariance((2, 3), (3, 4)), 1.5);
        assert!((params.correlation((2, 3), (3, 8)) - 0.5).abs() < 1e-15);
        params.validate_for(&net).unwrap();
    }

    #[test]
    fn compensated_grid_restores_link_count() {
        let (net, params) = benchmark_grid_compensated();
        assert_eq!(net.links().len(), 40);
        assert_eq!(net.successors(5), &[9, 10]);
        assert_eq!(net.max_out_degree(), 2);
        params.validate_for(&net).unwrap();
    }

    #[test]
    fn successors_and_predecessors_are_inverse() {
        let (net, _) = benchmark_grid();
        for node in 1..=net.node_count() {
            for &succ in net.successors(node) {
                assert!(net.predecessors(succ).contains(&node));
            }
            for &pred in net.predecessors(node) {
                assert!(net.successors(pred).contains(&node));
            }
        }
    }

    #[test]
    fn grid_is_deterministic() {
        let (a, pa) = benchmark_grid();
        let (b, pb) = benchmark_grid();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn rejects_structural_violations() {
        assert!(matches!(
            Network::new(3, vec![(1, 2), (2, 2)], 3),
            Err(NetworkError::SelfLoop(2))
        ));
        assert!(matches!(
            Network::new(3, vec![(1, 2), (1, 2), (2, 3)], 3),
            Err(NetworkError::DuplicateLink(1, 2))
        ));
        assert!(matches!(
            Network::new(3, vec![(1, 4)], 3),
            Err(NetworkError::NodeOutOfRange(1, 4, 3))
        ));
        assert!(matches!(
            Network::new(3, vec![(1, 2)], 3),
            Err(NetworkError::UnreachableDestination(3))
        ));
        assert!(matches!(
            Network::new(3, vec![(1, 2), (2, 3)], 5),
            Err(NetworkError::BadDestination(5))
        ));
    }

    #[test]
    fn single_link_chain_out_degree() {
        let net = Network::new(3, vec![(1, 2), (2, 3)], 3).unwrap();
        assert_eq!(net.max_out_degree(), 1);
        let star = Network::new(5, vec![(1, 2), (1, 3), (1, 4), (1, 5)], 5).unwrap();
        assert_eq!(star.max_out_degree(), 4);
    }

    #[test]
    fn remove_links_produces_subgraph() {
        let (net, _) = benchmark_grid();
        let sub = net.remove_links(&[(3, 4)]).unwrap();
        assert_eq!(sub.links().len(), 38);
        assert_eq!(sub.successors(3), &[8]);
        assert!(net.remove_links(&[(20, 25), (24, 25)]).is_err());
    }

    #[test]
    fn correlation_validation_catches_bad_covariance() {
        let net = Network::new(3, vec![(1, 2), (2, 3)], 3).unwrap();
        let mut params = LinkParams::new(5.0);
        params.set_link((1, 2), 9.0, 3.0);
        params.set_link((2, 3), 9.0, 3.0);
        assert!(matches!(
            params.validate_for(&net),
            Err(NetworkError::CorrelationOutOfRange(..))
        ));
        params.set_covariance((1, 2), (2, 3), 1.5);
        params.validate_for(&net).unwrap();
    }

    #[test]
    fn file_round_trip_matches_builder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        let (net, params) = benchmark_grid();
        save_network(&path, &net, &params).unwrap();
        let (net2, params2) = load_network(&path).unwrap();
        assert_eq!(net, net2);
        assert_eq!(params, params2);
    }

    #[test]
    fn load_rejects_duplicate_link() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.json");
        std::fs::write(
            &path,
            r#"{ "nodes": 2, "destination": 2,
                 "links": [ { "tail": 1, "head": 2, "mean": 9.0, "variance": 3.0 },
                            { "tail": 1, "head": 2, "mean": 9.0, "variance": 3.0 } ],
                 "pair_covariance": { "default": 0.0 } }"#,
        )
        .unwrap();
        let err = load_network(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate link"));
    }

    #[test]
    fn load_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.json");
        std::fs::write(
            &path,
            r#"{ "nodes": 2, "destination": 2, "speed": 3,
                 "links": [ { "tail": 1, "head": 2, "mean": 9.0, "variance": 3.0 } ],
                 "pair_covariance": { "default": 0.0 } }"#,
        )
        .unwrap();
        assert!(matches!(
            load_network(&path),
            Err(NetworkError::Parse { .. })
        ));
    }

    #[test]
    fn load_minimal_two_node_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.json");
        std::fs::write(
            &path,
            r#"{ "nodes": 2, "destination": 2,
                 "links": [ { "tail": 1, "head": 2, "mean": 9.0, "variance": 3.0 } ],
                 "pair_covariance": { "default": 0.0 } }"#,
        )
        .unwrap();
        let (net, params) = load_network(&path).unwrap();
        assert_eq!(net.max_out_degree(), 1);
        assert_eq!(params.mean((1, 2)), 9.0);
    }
}
