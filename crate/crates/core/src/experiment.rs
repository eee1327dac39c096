//! Experiment grids: configuration, cell planning, parallel execution and
//! result files.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::demand::{
    generate_synthetic_orders, ingest_orders, origin_weights, uniform_weights, ElasticityTable, Order, SyntheticDemand,
};
use crate::engine::{rng_stream, run_simulation, ServiceMode, SimConfig, STREAM_DEMAND, STREAM_SAMPLE};
use crate::metrics::{zone_stats, ZoneClass, ZoneGrid};
use crate::netgraph::{haversine_m, load_network, NodeId, RoadNetwork, Router};
use crate::par;

/// Scenario label of the discount-0 runs.
pub const BASELINE_LABEL: &str = "pure-solo";

/// `C2-D30` for a 0.3 detour guarantee.
pub fn scenario_label(detour: f64) -> String {
    format!("C2-D{}", (detour * 100.0).round() as i64)
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("cannot read metrics table: {0}")]
    Metrics(String),
}

fn write_err(path: &Path, e: impl ToString) -> ExperimentError {
    ExperimentError::Write { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkSource {
    /// Two-way lattice; node ids are `row * cols + col`.
    Grid {
        rows: usize,
        cols: usize,
        spacing_m: f64,
        #[serde(default = "default_lon")]
        lon0: f64,
        #[serde(default = "default_lat")]
        lat0: f64,
    },
    Files { nodes: PathBuf, edges: PathBuf },
}

fn default_lon() -> f64 {
    104.06
}

fn default_lat() -> f64 {
    30.66
}

/// A share of demand concentrated on the nodes within `radius_m` of `node`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hotspot {
    pub node: u64,
    pub radius_m: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DemandSource {
    Synthetic {
        arrival_rate_per_hour: f64,
        #[serde(default)]
        hotspots: Vec<Hotspot>,
        #[serde(default)]
        distance_filter: Option<[f64; 2]>,
    },
    Orders {
        path: PathBuf,
        #[serde(default = "one")]
        sample_fraction: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FleetPlacement {
    /// Proportional to order origins.
    #[default]
    Demand,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub network: NetworkSource,
    pub demand: DemandSource,
    #[serde(default)]
    pub fleet_placement: FleetPlacement,
    /// Overrides the engine fleet size for this profile.
    #[serde(default)]
    pub fleet_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_discounts")]
    pub discounts: Vec<f64>,
    #[serde(default = "default_detours")]
    pub detours: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_cache")]
    pub route_cache_trees: usize,
    #[serde(default = "default_zones")]
    pub zone_grid: [usize; 2],
    #[serde(default)]
    pub engine: SimConfig,
    pub profiles: Vec<Profile>,
}

fn default_discounts() -> Vec<f64> {
    vec![0.0, 0.1, 0.15, 0.2, 0.3, 0.4]
}

fn default_detours() -> Vec<f64> {
    vec![0.2, 0.3, 0.4]
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_cache() -> usize {
    1024
}

fn default_zones() -> [usize; 2] {
    [10, 10]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.discounts.is_empty() {
            return bad("discounts must not be empty".into());
        }
        if let Some(t) = self.discounts.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return bad(format!("discount {t} outside [0, 1)"));
        }
        if self.detours.is_empty() {
            return bad("detours must not be empty".into());
        }
        if let Some(d) = self.detours.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return bad(format!("detour guarantee {d} outside (0, 1)"));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.route_cache_trees == 0 || self.zone_grid.contains(&0) {
            return bad("route_cache_trees and zone_grid must be positive".into());
        }
        if self.profiles.is_empty() {
            return bad("at least one profile is required".into());
        }
        let mut names = HashSet::new();
        for p in &self.profiles {
            if p.name.is_empty() || !p.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("profile name `{}` must be non-empty [A-Za-z0-9_-]", p.name));
            }
            if !names.insert(&p.name) {
                return bad(format!("duplicate profile `{}`", p.name));
            }
            if let DemandSource::Synthetic { arrival_rate_per_hour, hotspots, .. } = &p.demand {
                if !(*arrival_rate_per_hour >= 0.0) {
                    return bad(format!("profile {}: arrival rate must be non-negative", p.name));
                }
                let total: f64 = hotspots.iter().map(|h| h.share).sum();
                if hotspots.iter().any(|h| !(h.share > 0.0) || !(h.radius_m >= 0.0)) || total > 1.0 + 1e-9 {
                    return bad(format!("profile {}: hotspot shares must be positive and sum to at most 1", p.name));
                }
            }
            if p.fleet_size == Some(0) {
                return bad(format!("profile {}: fleet_size must be positive", p.name));
            }
        }
        let mut probe = self.engine.clone();
        probe.max_detour = self.detours[0];
        probe.validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// SHA-256 of the config text.
    pub config_sha256: String,
    /// Relative input paths resolve against this directory.
    pub base_dir: PathBuf,
}

impl Experiment {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        Ok(Self {
            config: ExperimentConfig::from_toml(text)?,
            config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Read { path: path.into(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    /// Replaces the seed list with a single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.config.seeds = vec![seed];
    }

    /// Every cell to run, baseline first within each (profile, seed).
    pub fn cells(&self) -> Vec<Cell> {
        let cfg = &self.config;
        let mut cells = Vec::new();
        for profile in 0..cfg.profiles.len() {
            for &seed in &cfg.seeds {
                if cfg.discounts.contains(&0.0) {
                    cells.push(Cell { profile, discount: 0.0, detour: None, seed });
                }
                for &discount in cfg.discounts.iter().filter(|&&t| t > 0.0) {
                    for &detour in &cfg.detours {
                        cells.push(Cell { profile, discount, detour: Some(detour), seed });
                    }
                }
            }
        }
        cells
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }
}

/// One simulation of the grid. The discount-0 baseline has no detour
/// guarantee: nobody is offered ride-sharing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub profile: usize,
    pub discount: f64,
    pub detour: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn scenario(&self) -> String {
        self.detour.map_or_else(|| BASELINE_LABEL.to_string(), scenario_label)
    }
}

/// One row of metrics.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub profile: String,
    pub scenario: String,
    pub discount: f64,
    pub detour: Option<f64>,
    pub seed: u64,
    pub admitted: usize,
    pub delivered: usize,
    pub abandoned: usize,
    pub revenue: f64,
    pub service_rate: f64,
    pub avg_scheduled_requests: f64,
    pub emission_factor: f64,
    pub total_co2_g: f64,
    pub vehicle_km: f64,
    pub occupied_km: f64,
    pub pickup_km: f64,
    pub reposition_km: f64,
    pub delivered_km: f64,
    pub mean_matching_time: f64,
    pub mean_pickup_time: f64,
    pub mean_waiting_time: f64,
    pub share_customers: usize,
    pub pooled_customers: usize,
    pub ssr: f64,
    pub sdr: f64,
    pub ddr: f64,
    pub sdr_mean_of_ratios: f64,
    pub ddr_mean_of_ratios: f64,
    pub mean_saved_distance: f64,
    pub mean_saved_co2: f64,
    /// Largest realized detour ratio among delivered pooled customers.
    pub max_pooled_detour: f64,
    pub ssr_cold: Option<f64>,
    pub sdr_cold: Option<f64>,
    pub ddr_cold: Option<f64>,
    pub ssr_normal: Option<f64>,
    pub sdr_normal: Option<f64>,
    pub ddr_normal: Option<f64>,
    pub ssr_hot: Option<f64>,
    pub sdr_hot: Option<f64>,
    pub ddr_hot: Option<f64>,
    pub end_time: f64,
}

impl MetricsRow {
    /// Numeric column by name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "revenue" => self.revenue,
            "service_rate" => self.service_rate,
            "avg_scheduled_requests" => self.avg_scheduled_requests,
            "emission_factor" => self.emission_factor,
            "total_co2_g" => self.total_co2_g,
            "vehicle_km" => self.vehicle_km,
            "mean_matching_time" => self.mean_matching_time,
            "mean_pickup_time" => self.mean_pickup_time,
            "mean_waiting_time" => self.mean_waiting_time,
            "ssr" => self.ssr,
            "sdr" => self.sdr,
            "ddr" => self.ddr,
            "mean_saved_distance" => self.mean_saved_distance,
            "mean_saved_co2" => self.mean_saved_co2,
            "ssr_cold" => self.ssr_cold?,
            "sdr_cold" => self.sdr_cold?,
            "ddr_cold" => self.ddr_cold?,
            "ssr_normal" => self.ssr_normal?,
            "sdr_normal" => self.sdr_normal?,
            "ddr_normal" => self.ddr_normal?,
            "ssr_hot" => self.ssr_hot?,
            "sdr_hot" => self.sdr_hot?,
            "ddr_hot" => self.ddr_hot?,
            _ => return None,
        })
    }
}

/// One row of zones.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRow {
    pub profile: String,
    pub scenario: String,
    pub discount: f64,
    pub detour: Option<f64>,
    pub seed: u64,
    pub slot: usize,
    pub row: usize,
    pub col: usize,
    pub arrivals_per_hour: f64,
    pub mean_distance_km: f64,
    pub vehicles: f64,
    pub speed_kmh: f64,
    pub load: f64,
    pub class: ZoneClass,
    pub share_customers: usize,
    pub ssr: Option<f64>,
    pub sdr: Option<f64>,
    pub ddr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub profile: String,
    pub scenario: String,
    pub discount: f64,
    pub detour: Option<f64>,
    pub seed: u64,
    pub error: String,
}

/// Output of one successful cell.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub metrics: MetricsRow,
    pub zones: Vec<ZoneRow>,
    pub events: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub emit_events: bool,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
    pub files: Vec<PathBuf>,
}

impl GridOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    package_version: &'a str,
    config_sha256: &'a str,
    seeds: &'a [u64],
    cells: usize,
    succeeded: usize,
    failed: usize,
    files: Vec<String>,
}

/// Loaded network and router of one profile.
struct Prepared {
    router: Arc<Router>,
    demand_weights: Vec<f64>,
}

fn hotspot_weights(net: &RoadNetwork, hotspots: &[Hotspot]) -> Result<Vec<f64>, String> {
    let n = net.node_count();
    let rest = 1.0 - hotspots.iter().map(|h| h.share).sum::<f64>();
    let mut w = vec![rest / n as f64; n];
    for h in hotspots {
        let center = net.index_of(NodeId(h.node)).map_err(|e| e.to_string())?;
        let c = net.node(center);
        let members: Vec<usize> =
            (0..n).filter(|&i| haversine_m(c.lon, c.lat, net.node(i).lon, net.node(i).lat) <= h.radius_m).collect();
        for &i in &members {
            w[i] += h.share / members.len() as f64;
        }
    }
    Ok(w)
}

fn prepare(exp: &Experiment, profile: &Profile) -> Result<Prepared, String> {
    let net = match &profile.network {
        NetworkSource::Grid { rows, cols, spacing_m, lon0, lat0 } => {
            if *rows == 0 || *cols == 0 || !(*spacing_m > 0.0) {
                return Err("grid needs positive rows, cols and spacing".into());
            }
            RoadNetwork::grid(*rows, *cols, *spacing_m, *lon0, *lat0)
        }
        NetworkSource::Files { nodes, edges } => {
            load_network(&exp.resolve(nodes), &exp.resolve(edges)).map_err(|e| e.to_string())?
        }
    };
    let demand_weights = match &profile.demand {
        DemandSource::Synthetic { hotspots, .. } => hotspot_weights(&net, hotspots)?,
        DemandSource::Orders { .. } => uniform_weights(&net),
    };
    Ok(Prepared { router: Arc::new(Router::new(Arc::new(net), exp.config.route_cache_trees)), demand_weights })
}

fn orders_for(exp: &Experiment, profile: &Profile, prep: &Prepared, seed: u64) -> Result<Vec<Order>, String> {
    let (start, end) = exp.config.engine.horizon;
    match &profile.demand {
        DemandSource::Synthetic { arrival_rate_per_hour, distance_filter, .. } => {
            let demand = SyntheticDemand {
                start_s: start,
                end_s: end,
                arrival_rate_per_hour: *arrival_rate_per_hour,
                node_weights: prep.demand_weights.clone(),
                distance_filter: distance_filter.map(|[lo, hi]| (lo, hi)),
            };
            generate_synthetic_orders(&demand, &prep.router, &mut rng_stream(seed, STREAM_DEMAND)).map_err(|e| e.to_string())
        }
        DemandSource::Orders { path, sample_fraction } => {
            let report =
                ingest_orders(&exp.resolve(path), &prep.router, *sample_fraction, &mut rng_stream(seed, STREAM_SAMPLE))
                    .map_err(|e| e.to_string())?;
            Ok(report.orders)
        }
    }
}

fn run_cell(
    exp: &Experiment,
    cell: &Cell,
    prep: &Prepared,
    orders: &[Order],
    elasticity: &ElasticityTable,
    emit_events: bool,
) -> Result<CellOutput, String> {
    let cfg = &exp.config;
    let profile = &cfg.profiles[cell.profile];
    let mut sim = cfg.engine.clone();
    sim.seed = cell.seed;
    sim.pricing.discount = cell.discount;
    sim.max_detour = cell.detour.unwrap_or(cfg.detours[0]);
    sim.service = if cell.detour.is_some() { ServiceMode::Mixed } else { ServiceMode::Solo };
    if let Some(n) = profile.fleet_size {
        sim.fleet_size = n;
    }
    let net = prep.router.network();
    let weights = match profile.fleet_placement {
        FleetPlacement::Demand => match &profile.demand {
            DemandSource::Synthetic { .. } => prep.demand_weights.clone(),
            DemandSource::Orders { .. } => origin_weights(net, orders),
        },
        FleetPlacement::Uniform => uniform_weights(net),
    };
    let out = run_simulation(&sim, orders, &prep.router, elasticity, &weights).map_err(|e| e.to_string())?;
    let grid = ZoneGrid::new(net, cfg.zone_grid[0], cfg.zone_grid[1], sim.horizon.0, sim.horizon.1, 1800.0);
    let zones = zone_stats(&out.records, &out.fleet, net, &grid, sim.vehicle_speed);
    let m = &out.metrics;
    let class = |c: ZoneClass| zones.class(c).copied();
    let (cold, normal, hot) = (class(ZoneClass::Cold), class(ZoneClass::Normal), class(ZoneClass::Hot));
    let scenario = cell.scenario();
    let metrics = MetricsRow {
        profile: profile.name.clone(),
        scenario: scenario.clone(),
        discount: cell.discount,
        detour: cell.detour,
        seed: cell.seed,
        admitted: m.admitted,
        delivered: m.delivered,
        abandoned: m.admitted - m.delivered,
        revenue: m.revenue,
        service_rate: m.service_rate,
        avg_scheduled_requests: m.avg_scheduled_requests,
        emission_factor: m.emission_factor,
        total_co2_g: m.total_co2_g,
        vehicle_km: m.vehicle_km,
        occupied_km: out.fleet.occupied_m / 1000.0,
        pickup_km: out.fleet.pickup_m / 1000.0,
        reposition_km: out.fleet.reposition_m / 1000.0,
        delivered_km: m.delivered_km,
        mean_matching_time: m.mean_matching_time,
        mean_pickup_time: m.mean_pickup_time,
        mean_waiting_time: m.mean_waiting_time,
        share_customers: m.sharing.share_customers,
        pooled_customers: m.sharing.pooled_customers,
        ssr: m.sharing.ssr,
        sdr: m.sharing.sdr,
        ddr: m.sharing.ddr,
        sdr_mean_of_ratios: m.sharing.sdr_mean_of_ratios,
        ddr_mean_of_ratios: m.sharing.ddr_mean_of_ratios,
        mean_saved_distance: m.mean_saved_distance,
        mean_saved_co2: m.mean_saved_co2,
        max_pooled_detour: out.records.iter().filter(|r| r.pooled).map(|r| r.detour_ratio()).fold(0.0, f64::max),
        ssr_cold: cold.map(|s| s.ssr),
        sdr_cold: cold.map(|s| s.sdr),
        ddr_cold: cold.map(|s| s.ddr),
        ssr_normal: normal.map(|s| s.ssr),
        sdr_normal: normal.map(|s| s.sdr),
        ddr_normal: normal.map(|s| s.ddr),
        ssr_hot: hot.map(|s| s.ssr),
        sdr_hot: hot.map(|s| s.sdr),
        ddr_hot: hot.map(|s| s.ddr),
        end_time: out.end_time,
    };
    let zones = zones
        .cells
        .iter()
        .map(|z| {
            let has = z.sharing.share_customers > 0;
            ZoneRow {
                profile: profile.name.clone(),
                scenario: scenario.clone(),
                discount: cell.discount,
                detour: cell.detour,
                seed: cell.seed,
                slot: z.slot,
                row: z.row,
                col: z.col,
                arrivals_per_hour: z.arrivals_per_hour,
                mean_distance_km: z.mean_distance_km,
                vehicles: z.vehicles,
                speed_kmh: z.speed_kmh,
                load: z.load,
                class: z.class,
                share_customers: z.sharing.share_customers,
                ssr: has.then_some(z.sharing.ssr),
                sdr: has.then_some(z.sharing.sdr),
                ddr: has.then_some(z.sharing.ddr),
            }
        })
        .collect();
    Ok(CellOutput { metrics, zones, events: emit_events.then(|| out.log.to_jsonl()) })
}

/// Runs every cell, independent cells in parallel. Failures are collected,
/// never fatal to the rest of the grid.
pub fn run_cells(exp: &Experiment, cells: &[Cell], emit_events: bool) -> Vec<(Cell, Result<CellOutput, String>)> {
    let cfg = &exp.config;
    let elasticity = ElasticityTable::default();
    let prepared: Vec<Result<Prepared, String>> = par::map(&cfg.profiles, |p| prepare(exp, p));
    let mut inputs: Vec<(usize, u64)> = cells.iter().map(|c| (c.profile, c.seed)).collect();
    inputs.sort();
    inputs.dedup();
    let orders: Vec<(_, Result<Vec<Order>, String>)> = par::map(&inputs, |&(p, seed)| {
        let o = prepared[p].as_ref().map_err(Clone::clone).and_then(|prep| orders_for(exp, &cfg.profiles[p], prep, seed));
        ((p, seed), o)
    });
    let results = par::map(cells, |cell| {
        let prep = prepared[cell.profile].as_ref().map_err(Clone::clone);
        let ords = orders.iter().find(|(k, _)| *k == (cell.profile, cell.seed)).expect("planned").1.as_ref();
        let result = prep.and_then(|prep| {
            let ords = ords.map_err(Clone::clone)?;
            run_cell(exp, cell, prep, ords, &elasticity, emit_events)
        });
        (*cell, result)
    });
    results
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path).map_err(|e| write_err(path, e))?;
    if rows.is_empty() {
        w.write_record(header).map_err(|e| write_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

/// Runs the whole grid and writes metrics.csv, zones.csv, failures.csv,
/// manifest.json and, on request, one events file per cell.
pub fn run_experiment_grid(exp: &Experiment, opts: &RunOptions) -> Result<GridOutcome, ExperimentError> {
    let cells = exp.cells();
    let results = par::with_jobs(opts.jobs, || run_cells(exp, &cells, opts.emit_events))
        .map_err(|e| ExperimentError::Config(format!("cannot start worker pool: {e}")))?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| write_err(out, e))?;
    let mut rows = Vec::new();
    let mut zones = Vec::new();
    let mut failures = Vec::new();
    let mut files = Vec::new();
    if opts.emit_events {
        fs::create_dir_all(out.join("events")).map_err(|e| write_err(out, e))?;
    }
    for (cell, result) in results {
        let profile = exp.config.profiles[cell.profile].name.clone();
        match result {
            Ok(output) => {
                if let Some(events) = output.events {
                    let name = format!(
                        "{profile}_{}_t{}_s{}.jsonl",
                        cell.scenario().to_lowercase(),
                        (cell.discount * 100.0).round() as i64,
                        cell.seed
                    );
                    let path = out.join("events").join(name);
                    fs::write(&path, events).map_err(|e| write_err(&path, e))?;
                    files.push(path);
                }
                rows.push(output.metrics);
                zones.extend(output.zones);
            }
            Err(error) => {
                log::error!("cell {profile} {} discount {} seed {} failed: {error}", cell.scenario(), cell.discount, cell.seed);
                failures.push(Failure {
                    profile,
                    scenario: cell.scenario(),
                    discount: cell.discount,
                    detour: cell.detour,
                    seed: cell.seed,
                    error,
                });
            }
        }
    }
    let metrics_path = out.join("metrics.csv");
    write_csv(&metrics_path, &rows, &["profile", "scenario", "discount", "detour", "seed"])?;
    let zones_path = out.join("zones.csv");
    write_csv(&zones_path, &zones, &["profile", "scenario", "discount", "detour", "seed", "slot", "row", "col"])?;
    let failures_path = out.join("failures.csv");
    write_csv(&failures_path, &failures, &["profile", "scenario", "discount", "detour", "seed", "error"])?;
    files.splice(0..0, [metrics_path, zones_path, failures_path]);
    let manifest = Manifest {
        package_version: env!("CARGO_PKG_VERSION"),
        config_sha256: &exp.config_sha256,
        seeds: &exp.config.seeds,
        cells: cells.len(),
        succeeded: rows.len(),
        failed: failures.len(),
        files: files.iter().filter_map(|f| f.strip_prefix(out).ok()).map(|f| f.display().to_string()).collect(),
    };
    let manifest_path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| write_err(&manifest_path, e))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| write_err(&manifest_path, e))?;
    files.push(manifest_path);
    Ok(GridOutcome { rows, failures, files })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    let file = File::open(path).map_err(|source| ExperimentError::Read { path: path.into(), source })?;
    csv::Reader::from_reader(BufReader::new(file))
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| ExperimentError::Metrics(e.to_string()))
}
