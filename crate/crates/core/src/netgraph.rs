//! Road network storage, coordinate snapping and shortest-path routing.
//!
//! Networks are directed: a two-way road is two edges. Nodes are kept sorted
//! by id so that internal indices order the same way as external ids, which
//! makes every tie-break below an id tie-break.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const EARTH_RADIUS_M: f64 = 6_371_008.8;
const METERS_PER_DEGREE_LAT: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("edge on line {line} references undefined node {node}")]
    DanglingEndpoint { line: u64, node: NodeId },
    #[error("edge on line {line} has non-positive length {length}")]
    NonPositiveLength { line: u64, length: f64 },
    #[error("node {0} is defined twice")]
    DuplicateNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("network has no nodes")]
    Empty,
}

/// A shortest route between two nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub distance: f64,
    pub node_sequence: Vec<NodeId>,
    /// Distance from the source to each node of `node_sequence`.
    pub cumulative_m: Vec<f64>,
}

impl PathResult {
    pub fn source(&self) -> NodeId {
        self.node_sequence[0]
    }

    pub fn target(&self) -> NodeId {
        *self.node_sequence.last().expect("path is never empty")
    }
}

/// Where a vehicle following `route` at constant `speed` is after `elapsed`
/// seconds: the last node it has passed and the meters covered so far.
pub fn position_along_route(route: &PathResult, elapsed: f64, speed: f64) -> (NodeId, f64) {
    let traveled = (elapsed.max(0.0) * speed).min(route.distance);
    // Last index whose cumulative distance has been reached.
    let passed = route.cumulative_m.partition_point(|&c| c <= traveled) - 1;
    (route.node_sequence[passed], traveled)
}

/// Great-circle distance in meters.
pub fn haversine_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    // CSR adjacency, each row sorted by target index.
    offsets: Vec<usize>,
    targets: Vec<u32>,
    lengths: Vec<f64>,
}

#[derive(Deserialize)]
struct NodeRow {
    node_id: u64,
    lon: f64,
    lat: f64,
}

#[derive(Deserialize)]
struct EdgeRow {
    from_id: u64,
    to_id: u64,
    length_m: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(
    path: &Path,
    header: &[&str],
) -> Result<Vec<(u64, T)>, NetworkError> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => NetworkError::Io { path: file.clone(), source },
            other => NetworkError::Parse { file: file.clone(), line: 1, message: format!("{other:?}") },
        })?;
    let headers = reader.headers().map_err(|e| NetworkError::Parse {
        file: file.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != header {
        return Err(NetworkError::Parse {
            file,
            line: 1,
            message: format!("expected header `{}`", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<T>() {
        match record {
            Ok(row) => rows.push((rows.len() as u64 + 2, row)),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(rows.len() as u64 + 2);
                return Err(NetworkError::Parse { file, line, message: e.to_string() });
            }
        }
    }
    Ok(rows)
}

/// Reads a `nodes.csv` / `edges.csv` pair.
pub fn load_network(nodes_csv: &Path, edges_csv: &Path) -> Result<RoadNetwork, NetworkError> {
    let nodes = read_rows::<NodeRow>(nodes_csv, &["node_id", "lon", "lat"])?
        .into_iter()
        .map(|(_, r)| Node { id: NodeId(r.node_id), lon: r.lon, lat: r.lat })
        .collect();
    let edges = read_rows::<EdgeRow>(edges_csv, &["from_id", "to_id", "length_m"])?
        .into_iter()
        .map(|(line, r)| {
            (line, Edge { from: NodeId(r.from_id), to: NodeId(r.to_id), length_m: r.length_m })
        })
        .collect::<Vec<_>>();
    RoadNetwork::build(nodes, edges)
}

impl RoadNetwork {
    /// Validates and indexes a network. Edge line numbers in errors are the
    /// 1-based positions in `edges` plus one (as if read after a header).
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, NetworkError> {
        let numbered = edges.into_iter().enumerate().map(|(i, e)| (i as u64 + 2, e)).collect();
        Self::build(nodes, numbered)
    }

    fn build(mut nodes: Vec<Node>, edges: Vec<(u64, Edge)>) -> Result<Self, NetworkError> {
        nodes.sort_by_key(|n| n.id);
        if let Some(w) = nodes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(NetworkError::DuplicateNode(w[0].id));
        }
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut adjacency: Vec<Vec<(u32, f64)>> = vec![Vec::new(); nodes.len()];
        for (line, e) in edges {
            let from = *index.get(&e.from).ok_or(NetworkError::DanglingEndpoint { line, node: e.from })?;
            let to = *index.get(&e.to).ok_or(NetworkError::DanglingEndpoint { line, node: e.to })?;
            if !(e.length_m > 0.0) || !e.length_m.is_finite() {
                return Err(NetworkError::NonPositiveLength { line, length: e.length_m });
            }
            adjacency[from].push((to as u32, e.length_m));
        }
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut targets = Vec::new();
        let mut lengths = Vec::new();
        offsets.push(0);
        for mut row in adjacency {
            row.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            // Parallel edges: only the shortest matters for routing.
            row.dedup_by_key(|e| e.0);
            for (t, l) in row {
                targets.push(t);
                lengths.push(l);
            }
            offsets.push(targets.len());
        }
        Ok(Self { nodes, index, offsets, targets, lengths })
    }

    /// A `rows × cols` lattice of two-way streets `spacing_m` apart whose
    /// south-west corner sits at (`lon0`, `lat0`). Node ids are `row * cols + col`.
    pub fn grid(rows: usize, cols: usize, spacing_m: f64, lon0: f64, lat0: f64) -> Self {
        let dlat = spacing_m / METERS_PER_DEGREE_LAT;
        let dlon = spacing_m / (METERS_PER_DEGREE_LAT * lat0.to_radians().cos());
        let id = |r: usize, c: usize| NodeId((r * cols + c) as u64);
        let mut nodes = Vec::with_capacity(rows * cols);
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                nodes.push(Node { id: id(r, c), lon: lon0 + c as f64 * dlon, lat: lat0 + r as f64 * dlat });
                if c + 1 < cols {
                    edges.push(Edge { from: id(r, c), to: id(r, c + 1), length_m: spacing_m });
                    edges.push(Edge { from: id(r, c + 1), to: id(r, c), length_m: spacing_m });
                }
                if r + 1 < rows {
                    edges.push(Edge { from: id(r, c), to: id(r + 1, c), length_m: spacing_m });
                    edges.push(Edge { from: id(r + 1, c), to: id(r, c), length_m: spacing_m });
                }
            }
        }
        Self::new(nodes, edges).expect("lattice is well formed")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, ix: usize) -> &Node {
        &self.nodes[ix]
    }

    pub fn index_of(&self, id: NodeId) -> Result<usize, NetworkError> {
        self.index.get(&id).copied().ok_or(NetworkError::UnknownNode(id))
    }

    pub fn id_of(&self, ix: usize) -> NodeId {
        self.nodes[ix].id
    }

    /// Outgoing `(target index, length)` pairs of node `ix`.
    pub fn out_edges(&self, ix: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[ix]..self.offsets[ix + 1];
        self.targets[range.clone()].iter().map(|&t| t as usize).zip(self.lengths[range].iter().copied())
    }

    pub fn edge_length(&self, from: usize, to: usize) -> Option<f64> {
        let range = self.offsets[from]..self.offsets[from + 1];
        let row = &self.targets[range.clone()];
        row.binary_search(&(to as u32)).ok().map(|k| self.lengths[range.start + k])
    }

    /// (min lon, min lat, max lon, max lat).
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.nodes.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), n| (a.min(n.lon), b.min(n.lat), c.max(n.lon), d.max(n.lat)),
        )
    }

    /// Nearest node by great-circle distance; ties go to the smaller id.
    pub fn snap_to_node(&self, lon: f64, lat: f64) -> Result<NodeId, NetworkError> {
        self.snap_index(lon, lat).map(|ix| self.nodes[ix].id)
    }

    pub(crate) fn snap_index(&self, lon: f64, lat: f64) -> Result<usize, NetworkError> {
        let mut best: Option<(f64, usize)> = None;
        for (ix, n) in self.nodes.iter().enumerate() {
            let d = haversine_m(lon, lat, n.lon, n.lat);
            // Strict comparison keeps the first (smallest id) among equals.
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, ix));
            }
        }
        best.map(|(_, ix)| ix).ok_or(NetworkError::Empty)
    }

    /// Shortest directed route, or `None` when `target` is unreachable.
    pub fn shortest_path(&self, source: NodeId, target: NodeId) -> Result<Option<PathResult>, NetworkError> {
        let s = self.index_of(source)?;
        let t = self.index_of(target)?;
        Ok(self.tree_from(s).path_to(self, t))
    }

    /// Full single-source Dijkstra tree. Equal-length alternatives keep the
    /// predecessor with the smaller node id.
    pub fn tree_from(&self, source: usize) -> ShortestPathTree {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![NO_PRED; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: source });
        while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for (v, len) in self.out_edges(u) {
                if done[v] {
                    continue;
                }
                let nd = d + len;
                if nd < dist[v] {
                    dist[v] = nd;
                    pred[v] = u as u32;
                    heap.push(HeapEntry { dist: nd, node: v });
                } else if nd == dist[v] && (u as u32) < pred[v] {
                    pred[v] = u as u32;
                }
            }
        }
        ShortestPathTree { source, dist, pred }
    }
}

const NO_PRED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (dist, node).
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct ShortestPathTree {
    source: usize,
    dist: Vec<f64>,
    pred: Vec<u32>,
}

impl ShortestPathTree {
    pub fn source(&self) -> usize {
        self.source
    }

    pub fn distance(&self, target: usize) -> Option<f64> {
        let d = self.dist[target];
        d.is_finite().then_some(d)
    }

    /// Node indices from the source to `target`, inclusive.
    pub fn node_path(&self, target: usize) -> Option<Vec<usize>> {
        self.distance(target)?;
        let mut path = vec![target];
        let mut cur = target;
        while cur != self.source {
            cur = self.pred[cur] as usize;
            path.push(cur);
        }
        path.reverse();
        Some(path)
    }

    pub fn path_to(&self, network: &RoadNetwork, target: usize) -> Option<PathResult> {
        let nodes = self.node_path(target)?;
        let cumulative_m = nodes.iter().map(|&ix| self.dist[ix]).collect::<Vec<_>>();
        Some(PathResult {
            distance: self.dist[target],
            node_sequence: nodes.iter().map(|&ix| network.id_of(ix)).collect(),
            cumulative_m,
        })
    }
}

/// Memoizing router over a shared network. Trees are cached per source in
/// LRU shards so concurrent workers rarely contend on the same lock.
pub struct Router {
    network: Arc<RoadNetwork>,
    shards: Vec<Mutex<LruCache<usize, Arc<ShortestPathTree>>>>,
}

const ROUTER_SHARDS: usize = 16;

impl Router {
    /// `capacity` is the total number of trees kept across all shards.
    pub fn new(network: Arc<RoadNetwork>, capacity: usize) -> Self {
        let per_shard = NonZeroUsize::new(capacity.div_ceil(ROUTER_SHARDS).max(1)).unwrap();
        let shards = (0..ROUTER_SHARDS).map(|_| Mutex::new(LruCache::new(per_shard))).collect();
        Self { network, shards }
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn shared_network(&self) -> Arc<RoadNetwork> {
        Arc::clone(&self.network)
    }

    pub fn tree(&self, source: usize) -> Arc<ShortestPathTree> {
        let shard = &self.shards[source % ROUTER_SHARDS];
        if let Some(tree) = shard.lock().unwrap().get(&source) {
            return Arc::clone(tree);
        }
        let tree = Arc::new(self.network.tree_from(source));
        shard.lock().unwrap().put(source, Arc::clone(&tree));
        tree
    }

    pub fn distance(&self, from: usize, to: usize) -> Option<f64> {
        if from == to {
            return Some(0.0);
        }
        self.tree(from).distance(to)
    }

    pub fn node_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        self.tree(from).node_path(to)
    }

    pub fn path(&self, from: usize, to: usize) -> Option<PathResult> {
        self.tree(from).path_to(&self.network, to)
    }
}
