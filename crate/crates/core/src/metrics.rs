//! Per-trip distance accounting, system and ride-sharing metrics, CO2
//! emissions and the zone-level demand/supply analysis.

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{OrderId, ServiceChoice};
use crate::netgraph::{NodeId, RoadNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("speed must be positive, got {0} m/s")]
    NonPositiveSpeed(f64),
    #[error("distance must be non-negative, got {0} m")]
    NegativeDistance(f64),
    #[error("zone has no vehicle supply")]
    ZeroSupply,
    #[error("emission curve is malformed: {0}")]
    Curve(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Delivered,
    Abandoned,
}

/// Final ledger entry for one admitted customer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub order_id: OrderId,
    pub origin: NodeId,
    pub request_time: f64,
    pub choice: ServiceChoice,
    pub outcome: Outcome,
    pub matching_time: Option<f64>,
    pub pickup_time: Option<f64>,
    pub original_distance: f64,
    pub in_vehicle_distance: f64,
    pub shared_distance: f64,
    pub detour_distance: f64,
    /// This customer's half of the pair's saved distance.
    pub saved_distance: f64,
    /// Fare actually charged (0 unless delivered).
    pub fare: f64,
    pub pooled: bool,
    pub partner: Option<OrderId>,
}

impl TripRecord {
    pub fn detour_ratio(&self) -> f64 {
        self.detour_distance / self.original_distance
    }
}

/// Odometer readings of one customer's ride.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberLeg {
    pub pickup_m: f64,
    pub dropoff_m: f64,
    pub original_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberDistances {
    pub in_vehicle: f64,
    pub shared: f64,
    pub detour: f64,
    pub saved: f64,
}

/// Shared, detour and saved distance for the members of one vehicle trip,
/// given where along the vehicle's odometer each was picked up and dropped
/// off. Shared distance is the stretch both ride together; a pair's saved
/// distance is the sum of their original distances minus the distance the
/// vehicle drove from the first pickup to the last dropoff, split evenly.
pub fn trip_distances(members: &[MemberLeg]) -> Vec<MemberDistances> {
    let in_vehicle = |m: &MemberLeg| {
        let d = m.dropoff_m - m.pickup_m;
        // Odometer rounding can leave a shortest ride a hair under its length.
        if d < m.original_m && m.original_m - d <= 1e-6 * m.original_m.max(1.0) {
            m.original_m
        } else {
            d
        }
    };
    match members {
        [a, b] => {
            let overlap = (a.dropoff_m.min(b.dropoff_m) - a.pickup_m.max(b.pickup_m)).max(0.0);
            let span = a.dropoff_m.max(b.dropoff_m) - a.pickup_m.min(b.pickup_m);
            let saved = if overlap > 0.0 { (a.original_m + b.original_m - span) / 2.0 } else { 0.0 };
            [a, b]
                .iter()
                .map(|m| {
                    let iv = in_vehicle(m);
                    MemberDistances { in_vehicle: iv, shared: overlap, detour: (iv - m.original_m).max(0.0), saved }
                })
                .collect()
        }
        _ => members
            .iter()
            .map(|m| {
                let iv = in_vehicle(m);
                MemberDistances { in_vehicle: iv, shared: 0.0, detour: (iv - m.original_m).max(0.0), saved: 0.0 }
            })
            .collect(),
    }
}

/// Rational speed curve `(a + c v + e v^2) / (1 + b v + d v^2)` in g/km,
/// with `v` in km/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

const DEFAULT_CURVE: &str = include_str!("../data/emission_curve.csv");

impl SpeedCurve {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, MetricsError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let mut coeffs = [None; 5];
        for row in rdr.records() {
            let row = row.map_err(|e| MetricsError::Curve(e.to_string()))?;
            let slot = match &row[0] {
                "a" => 0,
                "b" => 1,
                "c" => 2,
                "d" => 3,
                "e" => 4,
                other => return Err(MetricsError::Curve(format!("unknown coefficient `{other}`"))),
            };
            coeffs[slot] = Some(row[1].parse::<f64>().map_err(|e| MetricsError::Curve(e.to_string()))?);
        }
        let [Some(a), Some(b), Some(c), Some(d), Some(e)] = coeffs else {
            return Err(MetricsError::Curve("coefficients a..e are required".into()));
        };
        let curve = Self { a, b, c, d, e };
        // Must stay positive over the supported speed range (0, 40] m/s.
        if (1..=1440).map(|k| k as f64 / 10.0).any(|v| !(curve.factor_kmh(v) > 0.0)) {
            return Err(MetricsError::Curve("factor must be positive up to 144 km/h".into()));
        }
        Ok(curve)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let file = std::fs::File::open(path).map_err(|e| MetricsError::Curve(e.to_string()))?;
        Self::from_reader(file)
    }

    pub fn factor_kmh(&self, v: f64) -> f64 {
        (self.a + self.c * v + self.e * v * v) / (1.0 + self.b * v + self.d * v * v)
    }
}

impl Default for SpeedCurve {
    fn default() -> Self {
        Self::from_reader(DEFAULT_CURVE.as_bytes()).expect("shipped curve is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EmissionModel {
    Constant { g_per_km: f64 },
    Curve(SpeedCurve),
}

impl Default for EmissionModel {
    fn default() -> Self {
        EmissionModel::Curve(SpeedCurve::default())
    }
}

impl EmissionModel {
    /// Emission factor in g/km at `speed` m/s.
    pub fn factor(&self, speed: f64) -> f64 {
        match self {
            EmissionModel::Constant { g_per_km } => *g_per_km,
            EmissionModel::Curve(c) => c.factor_kmh(speed * 3.6),
        }
    }
}

/// Grams of CO2 for driving `distance_m` at a constant `speed` (m/s).
pub fn co2_for_leg(model: &EmissionModel, distance_m: f64, speed: f64) -> Result<f64, MetricsError> {
    if !(speed > 0.0) {
        return Err(MetricsError::NonPositiveSpeed(speed));
    }
    if distance_m < 0.0 {
        return Err(MetricsError::NegativeDistance(distance_m));
    }
    Ok(distance_m / 1000.0 * model.factor(speed))
}

/// Where the fleet was and what it drove during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FleetHistory {
    /// Vehicle positions (network node indices) sampled at every batch.
    pub snapshots: Vec<(f64, Vec<u32>)>,
    /// Mean scheduled customers per vehicle after each assignment.
    pub scheduled_after_assignment: Vec<f64>,
    pub occupied_m: f64,
    pub pickup_m: f64,
    pub reposition_m: f64,
}

impl FleetHistory {
    pub fn total_m(&self) -> f64 {
        self.occupied_m + self.pickup_m + self.reposition_m
    }
}

/// SSR, SDR and DDR over the ride-sharing customers of a record set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SharingStats {
    pub share_customers: usize,
    pub pooled_customers: usize,
    pub ssr: f64,
    pub sdr: f64,
    pub ddr: f64,
    /// Mean of per-customer ratios, for comparison with the ratio-of-sums.
    pub sdr_mean_of_ratios: f64,
    pub ddr_mean_of_ratios: f64,
}

impl SharingStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a TripRecord>) -> Self {
        let mut s = SharingStats::default();
        let (mut shared, mut detour, mut original) = (0.0, 0.0, 0.0);
        let (mut sdr_sum, mut ddr_sum) = (0.0, 0.0);
        for r in records.into_iter().filter(|r| r.choice == ServiceChoice::Share) {
            s.share_customers += 1;
            if r.pooled {
                s.pooled_customers += 1;
            }
            shared += r.shared_distance;
            detour += r.detour_distance;
            original += r.original_distance;
            sdr_sum += r.shared_distance / r.original_distance;
            ddr_sum += r.detour_distance / r.original_distance;
        }
        if s.share_customers > 0 {
            let n = s.share_customers as f64;
            s.ssr = s.pooled_customers as f64 / n;
            s.sdr = shared / original;
            s.ddr = detour / original;
            s.sdr_mean_of_ratios = sdr_sum / n;
            s.ddr_mean_of_ratios = ddr_sum / n;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub admitted: usize,
    pub delivered: usize,
    pub revenue: f64,
    pub service_rate: f64,
    pub avg_scheduled_requests: f64,
    /// Fleet grams of CO2 per delivered kilometer of original trip distance.
    pub emission_factor: f64,
    pub total_co2_g: f64,
    pub vehicle_km: f64,
    pub delivered_km: f64,
    pub mean_matching_time: f64,
    pub mean_pickup_time: f64,
    pub mean_waiting_time: f64,
    pub sharing: SharingStats,
    /// Mean over ride-sharing customers; unpooled ones count as zero.
    pub mean_saved_distance: f64,
    pub mean_saved_co2: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Rolls a finished run up into the system and ride-sharing metrics.
/// `pooled_trip_subsidy` is added to revenue per delivered pooled customer.
pub fn aggregate_metrics(
    records: &[TripRecord],
    fleet: &FleetHistory,
    emission: &EmissionModel,
    speed: f64,
    pooled_trip_subsidy: f64,
) -> Result<SystemMetrics, MetricsError> {
    let delivered: Vec<&TripRecord> = records.iter().filter(|r| r.outcome == Outcome::Delivered).collect();
    let revenue = delivered.iter().map(|r| r.fare).sum::<f64>()
        + pooled_trip_subsidy * delivered.iter().filter(|r| r.pooled).count() as f64;
    let total_co2_g = co2_for_leg(emission, fleet.total_m(), speed)?;
    let delivered_km = delivered.iter().map(|r| r.original_distance).sum::<f64>() / 1000.0;
    let sharing = SharingStats::from_records(records);
    let factor = emission.factor(speed);
    let shares = || records.iter().filter(|r| r.choice == ServiceChoice::Share);
    Ok(SystemMetrics {
        admitted: records.len(),
        delivered: delivered.len(),
        revenue,
        service_rate: if records.is_empty() { 0.0 } else { delivered.len() as f64 / records.len() as f64 },
        avg_scheduled_requests: mean(fleet.scheduled_after_assignment.iter().copied()),
        emission_factor: if delivered_km > 0.0 { total_co2_g / delivered_km } else { 0.0 },
        total_co2_g,
        vehicle_km: fleet.total_m() / 1000.0,
        delivered_km,
        mean_matching_time: mean(delivered.iter().filter_map(|r| r.matching_time)),
        mean_pickup_time: mean(delivered.iter().filter_map(|r| r.pickup_time)),
        mean_waiting_time: mean(delivered.iter().filter_map(|r| Some(r.matching_time? + r.pickup_time?))),
        sharing,
        mean_saved_distance: mean(shares().map(|r| r.saved_distance)),
        mean_saved_co2: mean(shares().map(|r| r.saved_distance / 1000.0 * factor)),
    })
}

/// Demand-to-supply ratio `arrival_rate * mean_distance / (vehicles * speed)`
/// with rates per hour, distances in km and speeds in km/h.
pub fn normalized_load(arrivals_per_hour: f64, mean_distance_km: f64, vehicles: f64, speed_kmh: f64) -> Result<f64, MetricsError> {
    if !(vehicles > 0.0) {
        return Err(MetricsError::ZeroSupply);
    }
    if !(speed_kmh > 0.0) {
        return Err(MetricsError::NonPositiveSpeed(speed_kmh));
    }
    Ok(arrivals_per_hour * mean_distance_km / (vehicles * speed_kmh))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneClass {
    Cold,
    Normal,
    Hot,
}

impl ZoneClass {
    pub const ALL: [ZoneClass; 3] = [ZoneClass::Cold, ZoneClass::Normal, ZoneClass::Hot];
}

impl fmt::Display for ZoneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZoneClass::Cold => "cold",
            ZoneClass::Normal => "normal",
            ZoneClass::Hot => "hot",
        })
    }
}

/// Cold below 0.5, hot above 2, normal in between (both ends inclusive).
pub fn classify_zone(x: f64) -> ZoneClass {
    if x < 0.5 {
        ZoneClass::Cold
    } else if x > 2.0 {
        ZoneClass::Hot
    } else {
        ZoneClass::Normal
    }
}

/// Equal lon/lat partition of the network's bounding box crossed with
/// fixed-length time slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneGrid {
    pub rows: usize,
    pub cols: usize,
    pub slot_s: f64,
    pub start_s: f64,
    pub slots: usize,
    bbox: (f64, f64, f64, f64),
}

impl ZoneGrid {
    pub fn new(network: &RoadNetwork, rows: usize, cols: usize, start_s: f64, end_s: f64, slot_s: f64) -> Self {
        let slots = (((end_s - start_s) / slot_s).ceil() as usize).max(1);
        Self { rows, cols, slot_s, start_s, slots, bbox: network.bounding_box() }
    }

    /// 10 x 10 zones in half-hour slots.
    pub fn standard(network: &RoadNetwork, start_s: f64, end_s: f64) -> Self {
        Self::new(network, 10, 10, start_s, end_s, 1800.0)
    }

    pub fn zone_of(&self, lon: f64, lat: f64) -> (usize, usize) {
        let (x0, y0, x1, y1) = self.bbox;
        let frac = |v: f64, lo: f64, hi: f64, n: usize| {
            if hi > lo {
                (((v - lo) / (hi - lo) * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize
            } else {
                0
            }
        };
        (frac(lat, y0, y1, self.rows), frac(lon, x0, x1, self.cols))
    }

    pub fn slot_of(&self, t: f64) -> Option<usize> {
        if t < self.start_s {
            return None;
        }
        let s = ((t - self.start_s) / self.slot_s).floor() as usize;
        (s < self.slots).then_some(s)
    }

    fn cell_index(&self, row: usize, col: usize, slot: usize) -> usize {
        (slot * self.rows + row) * self.cols + col
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneCell {
    pub row: usize,
    pub col: usize,
    pub slot: usize,
    pub arrivals_per_hour: f64,
    pub mean_distance_km: f64,
    pub vehicles: f64,
    pub speed_kmh: f64,
    /// Infinite when the cell has demand but no supply.
    pub load: f64,
    pub class: ZoneClass,
    pub sharing: SharingStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneReport {
    /// Cells with at least one arrival.
    pub cells: Vec<ZoneCell>,
    /// Ride-sharing stats per class; `None` when no ride-sharing customer
    /// fell in that class.
    pub by_class: [(ZoneClass, Option<SharingStats>); 3],
}

impl ZoneReport {
    pub fn class(&self, class: ZoneClass) -> Option<&SharingStats> {
        self.by_class.iter().find(|(c, _)| *c == class).and_then(|(_, s)| s.as_ref())
    }
}

/// Attributes each customer to the zone and slot of its origin at request
/// time, classifies every cell by its normalized load, and aggregates
/// ride-sharing stats per class.
pub fn zone_stats(
    records: &[TripRecord],
    fleet: &FleetHistory,
    network: &RoadNetwork,
    grid: &ZoneGrid,
    speed: f64,
) -> ZoneReport {
    let n_cells = grid.rows * grid.cols * grid.slots;
    let mut members: Vec<Vec<&TripRecord>> = vec![Vec::new(); n_cells];
    for r in records {
        let Some(slot) = grid.slot_of(r.request_time) else { continue };
        let Ok(ix) = network.index_of(r.origin) else { continue };
        let node = network.node(ix);
        let (row, col) = grid.zone_of(node.lon, node.lat);
        members[grid.cell_index(row, col, slot)].push(r);
    }
    let node_zone: Vec<(usize, usize)> = network.nodes().iter().map(|n| grid.zone_of(n.lon, n.lat)).collect();
    let mut presence = vec![0.0; n_cells];
    let mut samples = vec![0usize; grid.slots];
    for (t, positions) in &fleet.snapshots {
        let Some(slot) = grid.slot_of(*t) else { continue };
        samples[slot] += 1;
        for &p in positions {
            let (row, col) = node_zone[p as usize];
            presence[grid.cell_index(row, col, slot)] += 1.0;
        }
    }
    let speed_kmh = speed * 3.6;
    let slot_hours = grid.slot_s / 3600.0;
    let mut cells = Vec::new();
    for (slot, &seen) in samples.iter().enumerate() {
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let k = grid.cell_index(row, col, slot);
                let rs = &members[k];
                if rs.is_empty() {
                    continue;
                }
                let lambda = rs.len() as f64 / slot_hours;
                let dbar = rs.iter().map(|r| r.original_distance).sum::<f64>() / rs.len() as f64 / 1000.0;
                let vehicles = if seen > 0 { presence[k] / seen as f64 } else { 0.0 };
                let load = normalized_load(lambda, dbar, vehicles, speed_kmh).unwrap_or(f64::INFINITY);
                cells.push(ZoneCell {
                    row,
                    col,
                    slot,
                    arrivals_per_hour: lambda,
                    mean_distance_km: dbar,
                    vehicles,
                    speed_kmh,
                    load,
                    class: classify_zone(load),
                    sharing: SharingStats::from_records(rs.iter().copied()),
                });
            }
        }
    }
    let by_class = ZoneClass::ALL.map(|class| {
        let stats = SharingStats::from_records(
            cells
                .iter()
                .filter(|c| c.class == class)
                .flat_map(|c| members[grid.cell_index(c.row, c.col, c.slot)].iter().copied()),
        );
        (class, (stats.share_customers > 0).then_some(stats))
    });
    ZoneReport { cells, by_class }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn km(x: f64) -> f64 {
        x * 1000.0
    }

    #[test]
    fn figure_eight_accounting() {
        // d1 = 2, d2 = 5, d3 = 1, d4 = 6 km; C1 rides 0..8, C2 rides 2..7.
        let out = trip_distances(&[
            MemberLeg { pickup_m: 0.0, dropoff_m: km(8.0), original_m: km(6.0) },
            MemberLeg { pickup_m: km(2.0), dropoff_m: km(7.0), original_m: km(5.0) },
        ]);
        assert_eq!(out[0].shared, km(5.0));
        assert_eq!(out[1].shared, km(5.0));
        assert_eq!(out[0].detour, km(2.0));
        assert_eq!(out[1].detour, 0.0);
        assert_eq!(out[0].saved + out[1].saved, km(3.0));
    }

    #[test]
    fn identical_itineraries_save_one_trip() {
        let leg = MemberLeg { pickup_m: 100.0, dropoff_m: 1100.0, original_m: 1000.0 };
        let out = trip_distances(&[leg, leg]);
        assert!(out.iter().all(|m| m.shared == 1000.0 && m.detour == 0.0));
        assert_eq!(out[0].saved + out[1].saved, 1000.0);
    }

    #[test]
    fn solo_member_has_no_sharing() {
        let out = trip_distances(&[MemberLeg { pickup_m: 0.0, dropoff_m: 999.9999999, original_m: 1000.0 }]);
        assert_eq!(out[0], MemberDistances { in_vehicle: 1000.0, shared: 0.0, detour: 0.0, saved: 0.0 });
    }

    #[test]
    fn emissions() {
        let constant = EmissionModel::Constant { g_per_km: 200.0 };
        assert_eq!(co2_for_leg(&constant, 0.0, 8.0).unwrap(), 0.0);
        assert_eq!(co2_for_leg(&constant, 5000.0, 8.0).unwrap(), 1000.0);
        assert!(co2_for_leg(&constant, 1.0, 0.0).is_err());
        let curve = EmissionModel::default();
        assert!(curve.factor(30.0 / 3.6) >= curve.factor(50.0 / 3.6));
        for k in 1..=400 {
            assert!(curve.factor(k as f64 / 10.0) > 0.0);
        }
    }

    #[test]
    fn bad_curve_rejected() {
        let text = "coefficient,value\na,-1\nb,0\nc,0\nd,0\ne,0\n";
        assert!(SpeedCurve::from_reader(text.as_bytes()).is_err());
        assert!(SpeedCurve::from_reader("coefficient,value\na,1\n".as_bytes()).is_err());
    }

    #[test]
    fn load_and_classes() {
        let x = normalized_load(100.0, 5.0, 50.0, 30.0).unwrap();
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(classify_zone(x), ZoneClass::Cold);
        assert_eq!(normalized_load(60.0, 5.0, 10.0, 30.0).unwrap(), 1.0);
        assert_eq!(normalized_load(0.0, 5.0, 10.0, 30.0).unwrap(), 0.0);
        assert_eq!(normalized_load(1.0, 1.0, 0.0, 30.0), Err(MetricsError::ZeroSupply));
        assert_eq!(classify_zone(2.5), ZoneClass::Hot);
        assert_eq!(classify_zone(0.5), ZoneClass::Normal);
        assert_eq!(classify_zone(2.0), ZoneClass::Normal);
    }

    fn record(id: u64, choice: ServiceChoice, fare: f64, original: f64, shared: f64, detour: f64, pooled: bool) -> TripRecord {
        TripRecord {
            order_id: OrderId(id),
            origin: NodeId(0),
            request_time: 0.0,
            choice,
            outcome: Outcome::Delivered,
            matching_time: Some(30.0),
            pickup_time: Some(60.0),
            original_distance: original,
            in_vehicle_distance: original + detour,
            shared_distance: shared,
            detour_distance: detour,
            saved_distance: 0.0,
            fare,
            pooled,
            partner: None,
        }
    }

    #[test]
    fn hand_built_two_customer_fixture() {
        let records = vec![
            record(1, ServiceChoice::Solo, 19.0, 5000.0, 0.0, 0.0, false),
            record(2, ServiceChoice::Share, 15.2, 5000.0, 4000.0, 1000.0, true),
        ];
        let fleet = FleetHistory { occupied_m: 10_000.0, scheduled_after_assignment: vec![1.0, 0.5], ..Default::default() };
        let m = aggregate_metrics(&records, &fleet, &EmissionModel::Constant { g_per_km: 100.0 }, 8.0, 0.0).unwrap();
        assert!((m.revenue - 34.2).abs() < 1e-12);
        assert_eq!(m.service_rate, 1.0);
        assert_eq!(m.sharing.ssr, 1.0);
        assert_eq!(m.sharing.sdr, 0.8);
        assert_eq!(m.sharing.ddr, 0.2);
        assert_eq!(m.avg_scheduled_requests, 0.75);
        assert_eq!(m.emission_factor, 100.0);
        assert_eq!(m.mean_waiting_time, 90.0);
        let subsidized = aggregate_metrics(&records, &fleet, &EmissionModel::Constant { g_per_km: 100.0 }, 8.0, 2.0).unwrap();
        assert!((subsidized.revenue - 36.2).abs() < 1e-12);
    }

    #[test]
    fn no_pooling_means_zero_ratios() {
        let records = vec![record(1, ServiceChoice::Share, 10.0, 3000.0, 0.0, 0.0, false)];
        let s = SharingStats::from_records(&records);
        assert_eq!((s.ssr, s.sdr, s.ddr), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_cell_grid_matches_global() {
        let net = RoadNetwork::grid(3, 3, 100.0, 104.0, 30.6);
        let grid = ZoneGrid::new(&net, 1, 1, 0.0, 3600.0, 3600.0);
        let records = vec![
            record(1, ServiceChoice::Share, 10.0, 3000.0, 1000.0, 200.0, true),
            record(2, ServiceChoice::Share, 10.0, 2000.0, 0.0, 0.0, false),
            record(3, ServiceChoice::Solo, 10.0, 2000.0, 0.0, 0.0, false),
        ];
        let fleet = FleetHistory { snapshots: vec![(0.0, vec![0, 4])], ..Default::default() };
        let report = zone_stats(&records, &fleet, &net, &grid, 8.0);
        assert_eq!(report.cells.len(), 1);
        let global = SharingStats::from_records(&records);
        let class = report.cells[0].class;
        assert_eq!(report.class(class), Some(&global));
        for other in ZoneClass::ALL.into_iter().filter(|c| *c != class) {
            assert!(report.class(other).is_none());
        }
    }
}
