//! Orders, the price/detour elasticity table and the customer service choice.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::{NetworkError, NodeId, RoadNetwork, Router};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderId(pub u64);

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One customer request. `request_time` is seconds after midnight of the
/// first day in the demand stream; `trip_distance` is the shortest
/// origin-to-destination distance in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub origin: NodeId,
    pub destination: NodeId,
    pub request_time: f64,
    pub trip_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceChoice {
    Solo,
    Share,
}

impl fmt::Display for ServiceChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceChoice::Solo => "solo",
            ServiceChoice::Share => "share",
        })
    }
}

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: cannot parse timestamp `{value}`")]
    Timestamp { line: u64, value: String },
    #[error("order file has no records")]
    Empty,
    #[error("sample fraction {0} outside (0, 1]")]
    SampleFraction(f64),
    #[error("node weights are malformed: {0}")]
    Weights(String),
    #[error("elasticity table is malformed: {0}")]
    Table(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Acceptance probabilities of ride-sharing over a (detour, discount) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityTable {
    detour_grid: Vec<f64>,
    discount_grid: Vec<f64>,
    /// Row-major: `acceptance[detour_row][discount_col]`.
    acceptance: Vec<Vec<f64>>,
}

const DEFAULT_ELASTICITY: &str = include_str!("../data/elasticity.csv");

impl Default for ElasticityTable {
    /// The calibrated surface shipped in `data/elasticity.csv`.
    fn default() -> Self {
        Self::from_reader(DEFAULT_ELASTICITY.as_bytes()).expect("shipped table is valid")
    }
}

#[derive(Deserialize)]
struct ElasticityRow {
    detour_ratio: f64,
    discount_ratio: f64,
    acceptance_prob: f64,
}

impl ElasticityTable {
    pub fn new(detour_grid: Vec<f64>, discount_grid: Vec<f64>, acceptance: Vec<Vec<f64>>) -> Result<Self, DemandError> {
        let bad = |m: &str| Err(DemandError::Table(m.to_string()));
        if detour_grid.is_empty() || discount_grid.is_empty() {
            return bad("empty grid");
        }
        if !detour_grid.windows(2).all(|w| w[0] < w[1]) || !discount_grid.windows(2).all(|w| w[0] < w[1]) {
            return bad("grid axes must be strictly increasing");
        }
        if acceptance.len() != detour_grid.len() || acceptance.iter().any(|r| r.len() != discount_grid.len()) {
            return bad("acceptance matrix does not match the grid");
        }
        for row in &acceptance {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad("probabilities must lie in [0, 1]");
            }
            if !row.windows(2).all(|w| w[0] <= w[1]) {
                return bad("acceptance must be non-decreasing in discount");
            }
        }
        if let Some(zero) = discount_grid.iter().position(|&d| d == 0.0) {
            if acceptance.iter().any(|r| r[zero] != 0.0) {
                return bad("acceptance at zero discount must be 0");
            }
        }
        Ok(Self { detour_grid, discount_grid, acceptance })
    }

    /// Parses `detour_ratio,discount_ratio,acceptance_prob` rows; every grid
    /// cell must be present exactly once.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DemandError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut cells = Vec::new();
        for (i, row) in rdr.deserialize::<ElasticityRow>().enumerate() {
            let row = row.map_err(|e| DemandError::Parse { line: i as u64 + 2, message: e.to_string() })?;
            cells.push(row);
        }
        let axis = |f: fn(&ElasticityRow) -> f64| {
            let mut v: Vec<f64> = cells.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let detours = axis(|r| r.detour_ratio);
        let discounts = axis(|r| r.discount_ratio);
        let mut matrix = vec![vec![f64::NAN; discounts.len()]; detours.len()];
        for c in &cells {
            let i = detours.iter().position(|&d| d == c.detour_ratio).unwrap();
            let j = discounts.iter().position(|&d| d == c.discount_ratio).unwrap();
            if !matrix[i][j].is_nan() {
                return Err(DemandError::Table(format!("duplicate cell ({}, {})", c.detour_ratio, c.discount_ratio)));
            }
            matrix[i][j] = c.acceptance_prob;
        }
        if matrix.iter().flatten().any(|p| p.is_nan()) {
            return Err(DemandError::Table("grid is incomplete".into()));
        }
        Self::new(detours, discounts, matrix)
    }

    pub fn load(path: &Path) -> Result<Self, DemandError> {
        let file = std::fs::File::open(path).map_err(|source| DemandError::Io { path: path.display().to_string(), source })?;
        Self::from_reader(file)
    }

    pub fn detour_grid(&self) -> &[f64] {
        &self.detour_grid
    }

    pub fn discount_grid(&self) -> &[f64] {
        &self.discount_grid
    }

    pub fn entry(&self, detour_row: usize, discount_col: usize) -> f64 {
        self.acceptance[detour_row][discount_col]
    }

    /// Probability that a customer accepts ride-sharing for a promised
    /// maximum detour and an offered discount. Bilinear inside the grid,
    /// clamped to the nearest edge outside it, and 0 without a discount.
    pub fn acceptance_probability(&self, detour_guarantee: f64, discount: f64) -> f64 {
        if discount <= 0.0 {
            return 0.0;
        }
        let (i0, i1, ti) = bracket(&self.detour_grid, detour_guarantee);
        let (j0, j1, tj) = bracket(&self.discount_grid, discount);
        let a = &self.acceptance;
        let low = a[i0][j0] + (a[i0][j1] - a[i0][j0]) * tj;
        let high = a[i1][j0] + (a[i1][j1] - a[i1][j0]) * tj;
        (low + (high - low) * ti).clamp(0.0, 1.0)
    }
}

/// Lower index, upper index and interpolation weight of `x` on `grid`.
fn bracket(grid: &[f64], x: f64) -> (usize, usize, f64) {
    let last = grid.len() - 1;
    if x <= grid[0] {
        return (0, 0, 0.0);
    }
    if x >= grid[last] {
        return (last, last, 0.0);
    }
    let hi = grid.partition_point(|&g| g <= x);
    let lo = hi - 1;
    (lo, hi, (x - grid[lo]) / (grid[hi] - grid[lo]))
}

/// One draw from `rng`: `Share` with probability `p_accept`.
pub fn choose_service<R: Rng + ?Sized>(p_accept: f64, rng: &mut R) -> ServiceChoice {
    let u: f64 = rng.random();
    if u < p_accept {
        ServiceChoice::Share
    } else {
        ServiceChoice::Solo
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub orders: Vec<Order>,
    pub sampled_out: usize,
    /// Records whose endpoints snap to the same node.
    pub dropped_same_node: usize,
    pub dropped_unreachable: usize,
}

#[derive(Deserialize)]
struct OrderRow {
    order_id: u64,
    origin_lon: f64,
    origin_lat: f64,
    dest_lon: f64,
    dest_lat: f64,
    request_time_iso8601: String,
}

fn parse_timestamp(value: &str) -> Option<NaiveDateTime> {
    // Offsets are ignored: the wall-clock time as written is what counts.
    if let Ok(dt) = DateTime::parse_from_rfc3339(value) {
        return Some(dt.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(value, fmt).ok())
}

/// Reads `orders.csv`, keeps each record with probability `sample_fraction`,
/// snaps endpoints to nodes and routes them. The output is sorted by
/// request time, then order id.
pub fn ingest_orders<R: Rng + ?Sized>(
    path: &Path,
    router: &Router,
    sample_fraction: f64,
    rng: &mut R,
) -> Result<IngestReport, DemandError> {
    let file = std::fs::File::open(path).map_err(|source| DemandError::Io { path: path.display().to_string(), source })?;
    ingest_orders_from(file, router, sample_fraction, rng)
}

pub fn ingest_orders_from<Rd: Read, R: Rng + ?Sized>(
    reader: Rd,
    router: &Router,
    sample_fraction: f64,
    rng: &mut R,
) -> Result<IngestReport, DemandError> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(DemandError::SampleFraction(sample_fraction));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut parsed = Vec::new();
    for (i, row) in rdr.deserialize::<OrderRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| DemandError::Parse { line, message: e.to_string() })?;
        let ts = parse_timestamp(&row.request_time_iso8601)
            .ok_or_else(|| DemandError::Timestamp { line, value: row.request_time_iso8601.clone() })?;
        parsed.push((row, ts));
    }
    if parsed.is_empty() {
        return Err(DemandError::Empty);
    }
    let day0: NaiveDate = parsed.iter().map(|(_, ts)| ts.date()).min().unwrap();
    let midnight = day0.and_hms_opt(0, 0, 0).unwrap();

    let mut report = IngestReport::default();
    let network = router.network();
    // One Bernoulli draw per record in file order, before any filtering.
    let total = parsed.len();
    let kept: Vec<_> = parsed.into_iter().filter(|_| rng.random::<f64>() < sample_fraction).collect();
    report.sampled_out = total - kept.len();
    let mut orders = Vec::with_capacity(kept.len());
    for (row, ts) in &kept {
        let o = network.snap_index(row.origin_lon, row.origin_lat)?;
        let d = network.snap_index(row.dest_lon, row.dest_lat)?;
        if o == d {
            report.dropped_same_node += 1;
            continue;
        }
        let Some(distance) = router.distance(o, d) else {
            report.dropped_unreachable += 1;
            continue;
        };
        let request_time = (*ts - midnight).num_milliseconds() as f64 / 1000.0;
        orders.push(Order {
            id: OrderId(row.order_id),
            origin: network.id_of(o),
            destination: network.id_of(d),
            request_time,
            trip_distance: distance,
        });
    }
    orders.sort_by(|a, b| a.request_time.total_cmp(&b.request_time).then(a.id.cmp(&b.id)));
    report.orders = orders;
    Ok(report)
}

/// Parameters of the synthetic Poisson demand generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDemand {
    pub start_s: f64,
    pub end_s: f64,
    pub arrival_rate_per_hour: f64,
    /// One weight per network node (by index); must sum to 1.
    pub node_weights: Vec<f64>,
    /// Optional inclusive bounds on trip distance in meters.
    pub distance_filter: Option<(f64, f64)>,
}

const MAX_DESTINATION_DRAWS: usize = 10_000;

pub(crate) fn validate_weights(weights: &[f64], node_count: usize) -> Result<WeightedIndex<f64>, DemandError> {
    if weights.len() != node_count {
        return Err(DemandError::Weights(format!("{} weights for {} nodes", weights.len(), node_count)));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(DemandError::Weights("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(DemandError::Weights(format!("weights sum to {total}, not 1")));
    }
    WeightedIndex::new(weights).map_err(|e| DemandError::Weights(e.to_string()))
}

/// Homogeneous Poisson arrivals with origins and destinations drawn
/// independently from the node weights.
pub fn generate_synthetic_orders<R: Rng + ?Sized>(
    params: &SyntheticDemand,
    router: &Router,
    rng: &mut R,
) -> Result<Vec<Order>, DemandError> {
    if !(params.arrival_rate_per_hour >= 0.0) || !params.arrival_rate_per_hour.is_finite() {
        return Err(DemandError::Weights(format!("arrival rate {} is invalid", params.arrival_rate_per_hour)));
    }
    let network = router.network();
    let sampler = validate_weights(&params.node_weights, network.node_count())?;
    if params.node_weights.iter().filter(|&&w| w > 0.0).count() < 2 {
        return Err(DemandError::Weights("need at least two nodes with positive weight".into()));
    }
    let mut orders = Vec::new();
    if params.arrival_rate_per_hour == 0.0 {
        return Ok(orders);
    }
    let gaps = Exp::new(params.arrival_rate_per_hour / 3600.0).expect("positive rate");
    let mut t = params.start_s;
    loop {
        t += gaps.sample(rng);
        if t > params.end_s {
            break;
        }
        let origin = sampler.sample(rng);
        let mut trip = None;
        for _ in 0..MAX_DESTINATION_DRAWS {
            let dest = sampler.sample(rng);
            if dest == origin {
                continue;
            }
            let Some(d) = router.distance(origin, dest) else { continue };
            if params.distance_filter.is_some_and(|(lo, hi)| d < lo || d > hi) {
                continue;
            }
            trip = Some((dest, d));
            break;
        }
        let Some((dest, distance)) = trip else { continue };
        orders.push(Order {
            id: OrderId(orders.len() as u64),
            origin: network.id_of(origin),
            destination: network.id_of(dest),
            request_time: t,
            trip_distance: distance,
        });
    }
    Ok(orders)
}

/// Uniform weights over all nodes.
pub fn uniform_weights(network: &RoadNetwork) -> Vec<f64> {
    let n = network.node_count();
    vec![1.0 / n as f64; n]
}

/// Share of order origins per node, used to seed the fleet where demand is.
pub fn origin_weights(network: &RoadNetwork, orders: &[Order]) -> Vec<f64> {
    if orders.is_empty() {
        return uniform_weights(network);
    }
    let mut counts: HashMap<NodeId, usize> = HashMap::new();
    for o in orders {
        *counts.entry(o.origin).or_default() += 1;
    }
    network
        .nodes()
        .iter()
        .map(|n| counts.get(&n.id).copied().unwrap_or(0) as f64 / orders.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn shipped_table_anchors() {
        let t = ElasticityTable::default();
        assert!((t.acceptance_probability(0.10, 0.15) - 0.60).abs() <= 0.05);
        assert!(t.acceptance_probability(0.10, 0.05) <= 0.10);
        assert!(t.acceptance_probability(0.50, 0.50) <= 0.30);
        for d in [0.05, 0.1, 0.37, 0.9] {
            assert_eq!(t.acceptance_probability(d, 0.0), 0.0);
        }
    }

    #[test]
    fn grid_points_return_entries() {
        let t = ElasticityTable::default();
        for (i, &d) in t.detour_grid().iter().enumerate() {
            for (j, &k) in t.discount_grid().iter().enumerate() {
                assert_eq!(t.acceptance_probability(d, k), t.entry(i, j));
            }
        }
    }

    #[test]
    fn clamps_outside_grid() {
        let t = ElasticityTable::default();
        assert_eq!(t.acceptance_probability(0.01, 0.15), t.acceptance_probability(0.10, 0.15));
        assert_eq!(t.acceptance_probability(0.9, 0.9), t.acceptance_probability(0.5, 0.5));
    }

    #[test]
    fn rejects_non_monotone_table() {
        let err = ElasticityTable::new(vec![0.1], vec![0.0, 0.1], vec![vec![0.0, -0.1]]);
        assert!(err.is_err());
        let err = ElasticityTable::new(vec![0.1], vec![0.1, 0.2], vec![vec![0.5, 0.4]]);
        assert!(err.is_err());
        let err = ElasticityTable::new(vec![0.1], vec![0.0, 0.2], vec![vec![0.1, 0.4]]);
        assert!(err.is_err());
    }

    #[test]
    fn choice_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(choose_service(1.0, &mut rng), ServiceChoice::Share);
            assert_eq!(choose_service(0.0, &mut rng), ServiceChoice::Solo);
        }
    }

    #[test]
    fn choice_frequency_within_binomial_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let shares = (0..n).filter(|_| choose_service(0.6, &mut rng) == ServiceChoice::Share).count();
        let sigma = (n as f64 * 0.6 * 0.4).sqrt();
        assert!((shares as f64 - 6000.0).abs() <= 3.0 * sigma, "{shares}");
    }

    fn router() -> Router {
        Router::new(Arc::new(RoadNetwork::grid(5, 5, 200.0, 104.0, 30.6)), 64)
    }

    #[test]
    fn zero_rate_is_empty() {
        let r = router();
        let params = SyntheticDemand {
            start_s: 0.0,
            end_s: 3600.0,
            arrival_rate_per_hour: 0.0,
            node_weights: uniform_weights(r.network()),
            distance_filter: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(generate_synthetic_orders(&params, &r, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn support_restricted_to_weighted_nodes() {
        let r = router();
        let mut w = vec![0.0; 25];
        w[3] = 0.5;
        w[17] = 0.5;
        let params = SyntheticDemand { start_s: 0.0, end_s: 3600.0, arrival_rate_per_hour: 300.0, node_weights: w, distance_filter: None };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let orders = generate_synthetic_orders(&params, &r, &mut rng).unwrap();
        assert!(!orders.is_empty());
        for o in orders {
            let pair = (o.origin.0, o.destination.0);
            assert!(pair == (3, 17) || pair == (17, 3));
        }
    }

    #[test]
    fn malformed_weights_rejected() {
        let r = router();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = SyntheticDemand { start_s: 0.0, end_s: 10.0, arrival_rate_per_hour: 1.0, node_weights: vec![0.5; 25], distance_filter: None };
        assert!(matches!(generate_synthetic_orders(&params, &r, &mut rng), Err(DemandError::Weights(_))));
        params.node_weights = vec![0.5; 3];
        assert!(matches!(generate_synthetic_orders(&params, &r, &mut rng), Err(DemandError::Weights(_))));
    }

    #[test]
    fn distance_filter_respected() {
        let r = router();
        let params = SyntheticDemand {
            start_s: 0.0,
            end_s: 3600.0,
            arrival_rate_per_hour: 500.0,
            node_weights: uniform_weights(r.network()),
            distance_filter: Some((600.0, 1000.0)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let orders = generate_synthetic_orders(&params, &r, &mut rng).unwrap();
        assert!(orders.iter().all(|o| (600.0..=1000.0).contains(&o.trip_distance)));
    }

    #[test]
    fn timestamps_parse_in_common_layouts() {
        for v in ["2024-05-01T06:30:00", "2024-05-01 06:30:00", "2024-05-01T06:30:00+08:00", "2024-05-01T06:30"] {
            let ts = parse_timestamp(v).unwrap();
            assert_eq!(ts.time().to_string(), "06:30:00");
        }
        assert!(parse_timestamp("yesterday").is_none());
    }
}
