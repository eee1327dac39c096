//! Discrete-time batch simulation: admission, pricing and choice, batch
//! matching, repositioning, vehicle motion and event logging.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Write};

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{choose_service, validate_weights, DemandError, ElasticityTable, Order, OrderId, ServiceChoice};
use crate::matching::{
    enumerate_candidate_trips, reposition_idle, solve_assignment, MatchingParams, Passenger, Request, Stop, StopKind,
    TripKind, VehicleId, VehicleState, DEFAULT_NODE_BUDGET,
};
use crate::metrics::{
    aggregate_metrics, trip_distances, EmissionModel, FleetHistory, MemberDistances, MemberLeg, MetricsError, Outcome,
    SystemMetrics, TripRecord,
};
use crate::netgraph::{NodeId, RoadNetwork, Router};
use crate::pricing::{PricingError, PricingParams};

/// RNG stream for initial vehicle placement.
pub const STREAM_FLEET: u64 = 1;
/// RNG stream for service choices.
pub const STREAM_CHOICE: u64 = 2;
/// RNG stream for synthetic demand generation.
pub const STREAM_DEMAND: u64 = 3;
/// RNG stream for order-file subsampling.
pub const STREAM_SAMPLE: u64 = 4;

/// Independent, reproducible generator for one purpose within a run.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("orders are not sorted by request time (order {0})")]
    Unsorted(OrderId),
    #[error("network has no nodes")]
    EmptyNetwork,
    #[error("order {0} references a node outside the network")]
    UnknownNode(OrderId),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceMode {
    /// Pure solo-hailing: nobody is offered ride-sharing.
    Solo,
    /// Solo-hailing and ride-sharing side by side.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub batch_interval: f64,
    /// Meters per second.
    pub vehicle_speed: f64,
    /// Admission window, seconds after midnight.
    pub horizon: (f64, f64),
    /// Minimum drive-out time after the horizon.
    pub tail: f64,
    pub abandonment_timeout: f64,
    pub fleet_size: usize,
    /// Guaranteed maximum detour ratio.
    pub max_detour: f64,
    pub pricing: PricingParams,
    pub cost_per_km: f64,
    pub service: ServiceMode,
    pub seed: u64,
    pub solver_node_budget: u64,
    pub emission: EmissionModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            batch_interval: 30.0,
            vehicle_speed: 8.33,
            horizon: (21_600.0, 43_200.0),
            tail: 2_700.0,
            abandonment_timeout: 600.0,
            fleet_size: 500,
            max_detour: 0.3,
            pricing: PricingParams::default(),
            cost_per_km: 0.5,
            service: ServiceMode::Mixed,
            seed: 0,
            solver_node_budget: DEFAULT_NODE_BUDGET,
            emission: EmissionModel::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("batch_interval", self.batch_interval),
            ("vehicle_speed", self.vehicle_speed),
            ("abandonment_timeout", self.abandonment_timeout),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EngineError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tail.is_finite() && self.tail >= 0.0) {
            return Err(EngineError::Config(format!("tail must be non-negative, got {}", self.tail)));
        }
        let (start, end) = self.horizon;
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(EngineError::Config(format!("horizon [{start}, {end}] is empty")));
        }
        if self.fleet_size == 0 {
            return Err(EngineError::Config("fleet_size must be positive".into()));
        }
        if !(self.max_detour > 0.0 && self.max_detour < 1.0) {
            return Err(EngineError::Config(format!("max_detour {} outside (0, 1)", self.max_detour)));
        }
        if !(self.cost_per_km.is_finite() && self.cost_per_km >= 0.0) {
            return Err(EngineError::Config(format!("cost_per_km must be non-negative, got {}", self.cost_per_km)));
        }
        if self.solver_node_budget == 0 {
            return Err(EngineError::Config("solver_node_budget must be positive".into()));
        }
        if let EmissionModel::Constant { g_per_km } = self.emission {
            if !(g_per_km.is_finite() && g_per_km > 0.0) {
                return Err(EngineError::Config(format!("emission factor must be positive, got {g_per_km}")));
            }
        }
        self.pricing.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Request,
    Choice,
    Match,
    Pickup,
    Dropoff,
    Abandon,
    Reposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub time_s: f64,
    pub order_id: Option<OrderId>,
    pub vehicle_id: Option<VehicleId>,
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceChoice>,
}

/// Append-only, time-ordered record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn for_order(&self, order: OrderId) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.order_id == Some(order))
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

/// Places `config.fleet_size` idle vehicles by independent draws over the
/// per-node weights.
pub fn init_fleet<R: rand::Rng + ?Sized>(
    config: &SimConfig,
    weights: &[f64],
    network: &RoadNetwork,
    rng: &mut R,
) -> Result<Vec<VehicleState>, EngineError> {
    if network.node_count() == 0 {
        return Err(EngineError::EmptyNetwork);
    }
    let sampler = validate_weights(weights, network.node_count())?;
    Ok((0..config.fleet_size).map(|i| VehicleState::idle(VehicleId(i as u32), sampler.sample(rng))).collect())
}

/// A vehicle's planned path: network nodes with cumulative meters, the
/// vehicle's position along it, and where each scheduled stop falls.
#[derive(Debug, Clone)]
struct Motion {
    nodes: Vec<usize>,
    cum: Vec<f64>,
    pos: f64,
    stops: VecDeque<f64>,
    /// Odometer reading at route position 0.
    odo_base: f64,
}

impl Motion {
    fn parked(node: usize) -> Self {
        Self { nodes: vec![node], cum: vec![0.0], pos: 0.0, stops: VecDeque::new(), odo_base: 0.0 }
    }

    fn length(&self) -> f64 {
        *self.cum.last().expect("route is never empty")
    }

    fn odometer(&self) -> f64 {
        self.odo_base + self.pos
    }

    fn anchor_index(&self) -> usize {
        self.cum.partition_point(|&c| c < self.pos).min(self.nodes.len() - 1)
    }

    /// Next node the vehicle can turn at, and the meters left to reach it.
    fn anchor(&self) -> (usize, f64) {
        let k = self.anchor_index();
        (self.nodes[k], self.cum[k] - self.pos)
    }

    fn last_passed(&self) -> usize {
        self.nodes[self.cum.partition_point(|&c| c <= self.pos).max(1) - 1]
    }

    fn moving(&self) -> bool {
        self.pos < self.length()
    }

    /// Keeps only the stretch up to the anchor so a new plan can be appended.
    fn truncate_at_anchor(&mut self) {
        let k = self.anchor_index();
        let keep_from = if self.cum[k] > self.pos { k - 1 } else { k };
        let shift = self.cum[keep_from];
        self.nodes.truncate(k + 1);
        self.cum.truncate(k + 1);
        self.nodes.drain(..keep_from);
        self.cum.drain(..keep_from);
        for c in &mut self.cum {
            *c -= shift;
        }
        self.pos -= shift;
        self.odo_base += shift;
        self.stops.clear();
    }

    /// Appends the shortest path to `target`; returns the route position of
    /// `target`.
    fn extend_to(&mut self, router: &Router, target: usize) -> f64 {
        let last = *self.nodes.last().expect("route is never empty");
        let path = router.node_path(last, target).expect("planned stops are reachable");
        let net = router.network();
        for w in path.windows(2) {
            let len = net.edge_length(w[0], w[1]).expect("path follows edges");
            self.cum.push(self.length() + len);
            self.nodes.push(w[1]);
        }
        self.length()
    }

    fn park(&mut self) {
        let node = *self.nodes.last().expect("route is never empty");
        self.odo_base += self.length();
        self.nodes = vec![node];
        self.cum = vec![0.0];
        self.pos = 0.0;
    }
}

#[derive(Debug, Clone)]
struct Vehicle {
    state: VehicleState,
    motion: Motion,
    /// Customers served since the vehicle was last empty.
    group: Vec<usize>,
    reposition_target: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Waiting,
    Assigned,
    Onboard,
    Delivered,
    Abandoned,
}

#[derive(Debug, Clone)]
struct OrderState {
    order: Order,
    origin: usize,
    destination: usize,
    choice: ServiceChoice,
    fare: f64,
    status: Status,
    match_t: Option<f64>,
    pickup_t: Option<f64>,
    pickup_odo: f64,
    dropoff_odo: f64,
    distances: Option<MemberDistances>,
    partner: Option<OrderId>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub log: EventLog,
    pub records: Vec<TripRecord>,
    pub metrics: SystemMetrics,
    pub fleet: FleetHistory,
    /// Clock when the last vehicle finished.
    pub end_time: f64,
    /// Orders outside the horizon, never admitted.
    pub skipped_orders: usize,
}

/// Mutable simulation state. [`run_simulation`] drives it; the pieces are
/// public so single ticks can be exercised directly.
pub struct Simulation<'a> {
    config: SimConfig,
    router: &'a Router,
    elasticity: &'a ElasticityTable,
    clock: f64,
    vehicles: Vec<Vehicle>,
    orders: Vec<OrderState>,
    index: HashMap<OrderId, usize>,
    waiting: Vec<usize>,
    log: EventLog,
    history: FleetHistory,
    choice_rng: ChaCha8Rng,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: SimConfig,
        router: &'a Router,
        elasticity: &'a ElasticityTable,
        fleet: Vec<VehicleState>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let vehicles = fleet
            .into_iter()
            .map(|state| Vehicle { motion: Motion::parked(state.node), state, group: Vec::new(), reposition_target: None })
            .collect();
        Ok(Self {
            choice_rng: rng_stream(config.seed, STREAM_CHOICE),
            clock: config.horizon.0,
            config,
            router,
            elasticity,
            vehicles,
            orders: Vec::new(),
            index: HashMap::new(),
            waiting: Vec::new(),
            log: EventLog::default(),
            history: FleetHistory::default(),
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Vehicles as the matcher would currently see them.
    pub fn vehicle_states(&self) -> Vec<VehicleState> {
        self.vehicles.iter().map(|v| self.matcher_view(v)).collect()
    }

    /// Any vehicle still has customers to serve.
    pub fn busy(&self) -> bool {
        self.vehicles.iter().any(|v| !v.state.schedule.is_empty())
    }

    fn network(&self) -> &RoadNetwork {
        self.router.network()
    }

    fn push(&mut self, kind: EventKind, time_s: f64, order: Option<OrderId>, vehicle: Option<VehicleId>, node: Option<usize>) {
        let node = node.map(|n| self.network().id_of(n));
        self.log.events.push(Event { kind, time_s, order_id: order, vehicle_id: vehicle, node, service: None });
    }

    /// Quotes both fares, draws the customer's choice and queues the order.
    /// Events are stamped with the request time.
    pub fn admit(&mut self, order: &Order) -> Result<(), EngineError> {
        let net = self.network();
        let origin = net.index_of(order.origin).map_err(|_| EngineError::UnknownNode(order.id))?;
        let destination = net.index_of(order.destination).map_err(|_| EngineError::UnknownNode(order.id))?;
        let pricing = self.config.pricing;
        let solo = pricing.solo_fare(order.trip_distance)?;
        let share = pricing.share_fare(order.trip_distance)?;
        let p_accept = match self.config.service {
            ServiceMode::Solo => 0.0,
            ServiceMode::Mixed => self.elasticity.acceptance_probability(self.config.max_detour, pricing.discount),
        };
        let choice = choose_service(p_accept, &mut self.choice_rng);
        let t = order.request_time;
        self.push(EventKind::Request, t, Some(order.id), None, Some(origin));
        self.push(EventKind::Choice, t, Some(order.id), None, None);
        self.log.events.last_mut().expect("just pushed").service = Some(choice);
        self.index.insert(order.id, self.orders.len());
        self.waiting.push(self.orders.len());
        self.orders.push(OrderState {
            order: order.clone(),
            origin,
            destination,
            choice,
            fare: if choice == ServiceChoice::Share { share } else { solo },
            status: Status::Waiting,
            match_t: None,
            pickup_t: None,
            pickup_odo: 0.0,
            dropoff_odo: 0.0,
            distances: None,
            partner: None,
        });
        Ok(())
    }

    fn matcher_view(&self, v: &Vehicle) -> VehicleState {
        let (node, offset_m) = v.motion.anchor();
        let at_anchor = v.motion.odometer() + offset_m;
        let mut state = v.state.clone();
        state.node = node;
        state.offset_m = offset_m;
        for p in state.passengers.iter_mut().filter(|p| p.onboard) {
            p.ridden_m = at_anchor - self.orders[self.index[&p.order]].pickup_odo;
        }
        state
    }

    /// Abandons every waiting order that has waited `abandonment_timeout` or
    /// longer by time `t`.
    fn expire(&mut self, t: f64) {
        let timeout = self.config.abandonment_timeout;
        let (gone, keep): (Vec<usize>, Vec<usize>) =
            self.waiting.iter().partition(|&&i| t - self.orders[i].order.request_time >= timeout);
        self.waiting = keep;
        self.abandon(gone, t);
    }

    fn abandon(&mut self, mut gone: Vec<usize>, t: f64) {
        gone.sort_by_key(|&i| self.orders[i].order.id);
        for i in gone {
            self.orders[i].status = Status::Abandoned;
            let (id, origin) = (self.orders[i].order.id, self.orders[i].origin);
            self.push(EventKind::Abandon, t, Some(id), None, Some(origin));
        }
    }

    /// Expiry, matching and repositioning at batch time `t`.
    pub fn run_batch(&mut self, t: f64) {
        self.clock = t;
        self.expire(t);
        if !self.waiting.is_empty() {
            self.assign(t);
        }
        let scheduled: usize = self.vehicles.iter().map(|v| v.state.passengers.len()).sum();
        self.history.scheduled_after_assignment.push(scheduled as f64 / self.vehicles.len() as f64);
        if !self.waiting.is_empty() {
            self.reposition(t);
        }
        self.snapshot(t);
    }

    fn snapshot(&mut self, t: f64) {
        let positions = self.vehicles.iter().map(|v| v.motion.last_passed() as u32).collect();
        self.history.snapshots.push((t, positions));
    }

    fn waiting_requests(&self) -> Vec<Request> {
        let mut reqs: Vec<Request> = self
            .waiting
            .iter()
            .map(|&i| {
                let o = &self.orders[i];
                Request {
                    order: o.order.id,
                    origin: o.origin,
                    destination: o.destination,
                    trip_distance: o.order.trip_distance,
                    choice: o.choice,
                    fare: o.fare,
                }
            })
            .collect();
        reqs.sort_by_key(|r| r.order);
        reqs
    }

    fn assign(&mut self, t: f64) {
        let batch = self.waiting_requests();
        let states = self.vehicle_states();
        let params = MatchingParams { max_detour: self.config.max_detour, cost_per_km: self.config.cost_per_km };
        let trips = enumerate_candidate_trips(&batch, &states, self.router, &params);
        let solution = solve_assignment(&trips, self.config.solver_node_budget);
        let by_id: HashMap<VehicleId, usize> = self.vehicles.iter().enumerate().map(|(i, v)| (v.state.id, i)).collect();
        for &k in &solution.chosen {
            let trip = &trips[k];
            let vi = by_id[&trip.vehicle];
            let pooled = trip.kind != TripKind::Single;
            {
                let v = &mut self.vehicles[vi];
                v.state.node = states[vi].node;
                v.state.offset_m = states[vi].offset_m;
                if trip.kind == TripKind::Insertion {
                    for p in &mut v.state.passengers {
                        p.pooled = true;
                    }
                }
            }
            for &id in &trip.requests {
                let oi = self.index[&id];
                let o = &mut self.orders[oi];
                o.status = Status::Assigned;
                o.match_t = Some(t);
                let passenger = Passenger {
                    order: id,
                    trip_distance: o.order.trip_distance,
                    choice: o.choice,
                    onboard: false,
                    ridden_m: 0.0,
                    pooled,
                };
                let origin = o.origin;
                let v = &mut self.vehicles[vi];
                v.state.passengers.push(passenger);
                v.group.push(oi);
                self.push(EventKind::Match, t, Some(id), Some(trip.vehicle), Some(origin));
            }
            self.replan(vi, trip.schedule.clone());
        }
        self.waiting.retain(|&i| self.orders[i].status == Status::Waiting);
    }

    fn replan(&mut self, vi: usize, schedule: Vec<Stop>) {
        let router = self.router;
        let v = &mut self.vehicles[vi];
        v.motion.truncate_at_anchor();
        for stop in &schedule {
            let at = v.motion.extend_to(router, stop.node);
            v.motion.stops.push_back(at);
        }
        v.state.schedule = schedule;
        v.reposition_target = None;
    }

    fn reposition(&mut self, t: f64) {
        let idle: Vec<VehicleState> =
            self.vehicles.iter().filter(|v| v.state.is_idle()).map(|v| self.matcher_view(v)).collect();
        let waiting = self.waiting_requests();
        let by_id: HashMap<VehicleId, usize> = self.vehicles.iter().enumerate().map(|(i, v)| (v.state.id, i)).collect();
        for (id, target) in reposition_idle(&idle, &waiting, self.router) {
            let vi = by_id[&id];
            let v = &self.vehicles[vi];
            if v.reposition_target == Some(target) || v.motion.anchor() == (target, 0.0) {
                continue;
            }
            let router = self.router;
            let v = &mut self.vehicles[vi];
            v.motion.truncate_at_anchor();
            v.motion.extend_to(router, target);
            v.reposition_target = Some(target);
            self.push(EventKind::Reposition, t, None, Some(id), Some(target));
        }
    }

    /// Advances every vehicle `dt` seconds at constant speed, firing stops
    /// reached within the tick at their exact arrival times.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "step needs a positive duration");
        let speed = self.config.vehicle_speed;
        let t0 = self.clock;
        for vi in 0..self.vehicles.len() {
            if !self.vehicles[vi].motion.moving() && self.vehicles[vi].motion.stops.is_empty() {
                continue;
            }
            let start = self.vehicles[vi].motion.pos;
            let end = (start + dt * speed).min(self.vehicles[vi].motion.length());
            let mut cur = start;
            while let Some(&at) = self.vehicles[vi].motion.stops.front() {
                if at > end {
                    break;
                }
                self.accrue(vi, at - cur);
                cur = at;
                self.vehicles[vi].motion.stops.pop_front();
                self.fire(vi, at, t0 + (at - start) / speed);
            }
            self.accrue(vi, end - cur);
            let v = &mut self.vehicles[vi];
            v.motion.pos = end;
            if !v.motion.moving() && v.motion.stops.is_empty() {
                v.motion.park();
                v.reposition_target = None;
            }
        }
        self.clock = t0 + dt;
    }

    fn accrue(&mut self, vi: usize, meters: f64) {
        let v = &self.vehicles[vi];
        let h = &mut self.history;
        if v.state.onboard().next().is_some() {
            h.occupied_m += meters;
        } else if !v.state.schedule.is_empty() {
            h.pickup_m += meters;
        } else {
            h.reposition_m += meters;
        }
    }

    fn fire(&mut self, vi: usize, at: f64, time: f64) {
        let stop = self.vehicles[vi].state.schedule.remove(0);
        let odo = self.vehicles[vi].motion.odo_base + at;
        let oi = self.index[&stop.order];
        let vid = self.vehicles[vi].state.id;
        match stop.kind {
            StopKind::Pickup => {
                let o = &mut self.orders[oi];
                o.status = Status::Onboard;
                o.pickup_t = Some(time);
                o.pickup_odo = odo;
                if let Some(p) = self.vehicles[vi].state.passengers.iter_mut().find(|p| p.order == stop.order) {
                    p.onboard = true;
                }
                self.push(EventKind::Pickup, time, Some(stop.order), Some(vid), Some(stop.node));
            }
            StopKind::Dropoff => {
                let o = &mut self.orders[oi];
                o.status = Status::Delivered;
                o.dropoff_odo = odo;
                self.vehicles[vi].state.passengers.retain(|p| p.order != stop.order);
                self.push(EventKind::Dropoff, time, Some(stop.order), Some(vid), Some(stop.node));
                if self.vehicles[vi].state.passengers.is_empty() {
                    self.close_group(vi);
                }
            }
        }
    }

    fn close_group(&mut self, vi: usize) {
        let group = std::mem::take(&mut self.vehicles[vi].group);
        let legs: Vec<MemberLeg> = group
            .iter()
            .map(|&i| {
                let o = &self.orders[i];
                MemberLeg { pickup_m: o.pickup_odo, dropoff_m: o.dropoff_odo, original_m: o.order.trip_distance }
            })
            .collect();
        let dists = trip_distances(&legs);
        let pooled = group.len() == 2 && dists[0].shared > 0.0;
        for (k, (&i, d)) in group.iter().zip(dists).enumerate() {
            self.orders[i].distances = Some(d);
            if pooled {
                self.orders[i].partner = Some(self.orders[group[1 - k]].order.id);
            }
        }
    }

    /// Moves the clock to `t` (a batch boundary), admitting `arrivals` whose
    /// events interleave with the tick's motion events by time.
    pub fn advance_to(&mut self, t: f64, arrivals: &[Order]) -> Result<(), EngineError> {
        let mark = self.log.len();
        self.step(t - self.clock);
        self.clock = t;
        for o in arrivals {
            self.admit(o)?;
        }
        self.log.events[mark..].sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        Ok(())
    }

    /// Abandons everything still waiting; used at the end of the horizon.
    pub fn close_admission(&mut self, t: f64) {
        let gone = std::mem::take(&mut self.waiting);
        self.abandon(gone, t);
    }

    pub fn finish(self) -> Result<SimOutput, EngineError> {
        let records: Vec<TripRecord> = self
            .orders
            .iter()
            .map(|o| {
                let delivered = o.status == Status::Delivered;
                let d = o.distances.unwrap_or(MemberDistances {
                    in_vehicle: 0.0,
                    shared: 0.0,
                    detour: 0.0,
                    saved: 0.0,
                });
                TripRecord {
                    order_id: o.order.id,
                    origin: o.order.origin,
                    request_time: o.order.request_time,
                    choice: o.choice,
                    outcome: if delivered { Outcome::Delivered } else { Outcome::Abandoned },
                    matching_time: o.match_t.map(|m| m - o.order.request_time),
                    pickup_time: o.pickup_t.zip(o.match_t).map(|(p, m)| p - m),
                    original_distance: o.order.trip_distance,
                    in_vehicle_distance: d.in_vehicle,
                    shared_distance: d.shared,
                    detour_distance: d.detour,
                    saved_distance: d.saved,
                    fare: if delivered { o.fare } else { 0.0 },
                    pooled: o.partner.is_some(),
                    partner: o.partner,
                }
            })
            .collect();
        let metrics = aggregate_metrics(
            &records,
            &self.history,
            &self.config.emission,
            self.config.vehicle_speed,
            self.config.pricing.pooled_trip_subsidy,
        )?;
        Ok(SimOutput { log: self.log, records, metrics, fleet: self.history, end_time: self.clock, skipped_orders: 0 })
    }
}

/// Runs one full simulation: fleet placement from `fleet_weights`, batches
/// over the horizon, then the drive-out tail until every admitted customer
/// is delivered or abandoned.
pub fn run_simulation(
    config: &SimConfig,
    orders: &[Order],
    router: &Router,
    elasticity: &ElasticityTable,
    fleet_weights: &[f64],
) -> Result<SimOutput, EngineError> {
    config.validate()?;
    if let Some(w) = orders.windows(2).find(|w| w[1].request_time < w[0].request_time) {
        return Err(EngineError::Unsorted(w[1].id));
    }
    let fleet = init_fleet(config, fleet_weights, router.network(), &mut rng_stream(config.seed, STREAM_FLEET))?;
    let mut sim = Simulation::new(config.clone(), router, elasticity, fleet)?;
    let (start, end) = config.horizon;
    let admitted: Vec<Order> =
        orders.iter().filter(|o| o.request_time >= start && o.request_time < end).cloned().collect();
    let skipped = orders.len() - admitted.len();
    let batch = config.batch_interval;
    let mut next = 0;
    let mut k: u64 = 0;
    let take_until = |next: &mut usize, t: f64| {
        let from = *next;
        while *next < admitted.len() && admitted[*next].request_time <= t {
            *next += 1;
        }
        from..*next
    };
    let first = take_until(&mut next, start);
    for o in &admitted[first] {
        sim.admit(o)?;
    }
    loop {
        let t = start + k as f64 * batch;
        sim.run_batch(t);
        if t >= end {
            sim.close_admission(t);
            break;
        }
        k += 1;
        let t_next = start + k as f64 * batch;
        let arrivals = take_until(&mut next, t_next);
        sim.advance_to(t_next, &admitted[arrivals])?;
    }
    while sim.clock() < end + config.tail || sim.busy() {
        k += 1;
        sim.advance_to(start + k as f64 * batch, &[])?;
    }
    let mut out = sim.finish()?;
    out.skipped_orders = skipped;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{Edge, Node};
    use std::sync::Arc;

    fn line(lengths: &[f64]) -> Router {
        let nodes = (0..=lengths.len()).map(|i| Node { id: NodeId(i as u64), lon: i as f64 * 0.01, lat: 0.0 }).collect();
        let mut edges = Vec::new();
        for (i, &l) in lengths.iter().enumerate() {
            edges.push(Edge { from: NodeId(i as u64), to: NodeId(i as u64 + 1), length_m: l });
            edges.push(Edge { from: NodeId(i as u64 + 1), to: NodeId(i as u64), length_m: l });
        }
        Router::new(Arc::new(RoadNetwork::new(nodes, edges).unwrap()), 64)
    }

    fn config(fleet: usize, speed: f64) -> SimConfig {
        SimConfig {
            fleet_size: fleet,
            vehicle_speed: speed,
            horizon: (0.0, 600.0),
            tail: 0.0,
            emission: EmissionModel::Constant { g_per_km: 200.0 },
            ..SimConfig::default()
        }
    }

    fn order(id: u64, o: u64, d: u64, t: f64, router: &Router) -> Order {
        Order {
            id: OrderId(id),
            origin: NodeId(o),
            destination: NodeId(d),
            request_time: t,
            trip_distance: router.distance(o as usize, d as usize).unwrap(),
        }
    }

    fn at(node: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i == node { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn zero_orders() {
        let r = line(&[100.0, 100.0]);
        let table = ElasticityTable::default();
        let out = run_simulation(&config(3, 5.0), &[], &r, &table, &at(1, 3)).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.metrics.revenue, 0.0);
        assert!(out.log.is_empty());
        assert!(out.fleet.snapshots.iter().all(|(_, p)| p.iter().all(|&n| n == 1)));
        assert_eq!(out.fleet.total_m(), 0.0);
    }

    #[test]
    fn single_order_hand_trace() {
        let r = line(&[1000.0, 2000.0]);
        let table = ElasticityTable::default();
        let cfg = config(1, 10.0);
        let orders = [order(7, 0, 2, 45.0, &r)];
        let out = run_simulation(&cfg, &orders, &r, &table, &at(0, 3)).unwrap();
        let rec = &out.records[0];
        assert_eq!(rec.outcome, Outcome::Delivered);
        assert_eq!(rec.fare, cfg.pricing.solo_fare(3000.0).unwrap());
        assert_eq!(rec.matching_time, Some(15.0));
        assert_eq!(rec.pickup_time, Some(0.0));
        let drop = out.log.of_kind(EventKind::Dropoff).next().unwrap();
        assert_eq!(drop.time_s, 60.0 + 300.0);
        assert_eq!(rec.in_vehicle_distance, 3000.0);
        assert_eq!(out.fleet.occupied_m, 3000.0);
        let kinds: Vec<EventKind> = out.log.events.iter().map(|e| e.kind).collect();
        use EventKind::*;
        assert_eq!(kinds, [Request, Choice, Match, Pickup, Dropoff]);
    }

    fn dispatch(sim: &mut Simulation, vi: usize, stops: Vec<Stop>) {
        for s in &stops {
            if s.kind == StopKind::Pickup {
                let o = Order {
                    id: s.order,
                    origin: NodeId(0),
                    destination: NodeId(0),
                    request_time: sim.clock(),
                    trip_distance: 1.0,
                };
                sim.admit(&o).unwrap();
                let oi = sim.index[&s.order];
                sim.orders[oi].status = Status::Assigned;
                sim.vehicles[vi].state.passengers.push(Passenger {
                    order: s.order,
                    trip_distance: 1.0,
                    choice: ServiceChoice::Solo,
                    onboard: false,
                    ridden_m: 0.0,
                    pooled: false,
                });
                sim.vehicles[vi].group.push(oi);
            }
        }
        sim.waiting.clear();
        sim.replan(vi, stops);
    }

    #[test]
    fn stop_fires_mid_tick() {
        let r = line(&[10.0, 100.0]);
        let table = ElasticityTable::default();
        let fleet = vec![VehicleState::idle(VehicleId(0), 0)];
        let mut sim = Simulation::new(config(1, 5.0), &r, &table, fleet).unwrap();
        sim.clock = 0.0;
        dispatch(&mut sim, 0, vec![Stop::pickup(OrderId(1), 1), Stop::dropoff(OrderId(1), 2)]);
        let mark = sim.log.len();
        sim.step(4.0);
        let fired = &sim.log.events[mark..];
        assert_eq!(fired.len(), 1);
        assert_eq!((fired[0].kind, fired[0].time_s), (EventKind::Pickup, 2.0));
        assert_eq!(sim.vehicles[0].motion.odometer(), 20.0);
        assert_eq!(sim.vehicles[0].motion.odometer() - sim.orders[0].pickup_odo, 10.0);
    }

    #[test]
    fn two_stops_in_one_tick() {
        let r = line(&[10.0, 5.0, 100.0]);
        let table = ElasticityTable::default();
        let fleet = vec![VehicleState::idle(VehicleId(0), 0)];
        let mut sim = Simulation::new(config(1, 5.0), &r, &table, fleet).unwrap();
        sim.clock = 0.0;
        dispatch(&mut sim, 0, vec![Stop::pickup(OrderId(1), 1), Stop::dropoff(OrderId(1), 2)]);
        let mark = sim.log.len();
        sim.step(10.0);
        let fired: Vec<(EventKind, f64)> = sim.log.events[mark..].iter().map(|e| (e.kind, e.time_s)).collect();
        assert_eq!(fired, [(EventKind::Pickup, 2.0), (EventKind::Dropoff, 3.0)]);
        // Schedule finished: the vehicle parks at the dropoff.
        assert_eq!(sim.vehicles[0].motion.anchor(), (2, 0.0));
        assert_eq!(sim.history.pickup_m, 10.0);
        assert_eq!(sim.history.occupied_m, 5.0);
    }

    #[test]
    fn idle_vehicle_stays_put() {
        let r = line(&[10.0]);
        let table = ElasticityTable::default();
        let fleet = vec![VehicleState::idle(VehicleId(0), 1)];
        let mut sim = Simulation::new(config(1, 5.0), &r, &table, fleet).unwrap();
        sim.step(30.0);
        assert_eq!(sim.vehicles[0].motion.anchor(), (1, 0.0));
        assert_eq!(sim.vehicles[0].motion.odometer(), 0.0);
        assert!(sim.log.is_empty());
    }

    #[test]
    fn timeout_abandons_before_matching() {
        let r = line(&[1000.0, 1000.0]);
        let table = ElasticityTable::default();
        // The only vehicle is busy with a long first trip.
        let cfg = SimConfig { abandonment_timeout: 60.0, ..config(1, 1.0) };
        let orders = [order(1, 0, 2, 0.0, &r), order(2, 2, 0, 0.0, &r)];
        let out = run_simulation(&cfg, &orders, &r, &table, &at(0, 3)).unwrap();
        assert_eq!(out.records[0].outcome, Outcome::Delivered);
        assert_eq!(out.records[1].outcome, Outcome::Abandoned);
        let abandon = out.log.of_kind(EventKind::Abandon).next().unwrap();
        assert_eq!(abandon.time_s, 60.0);
        assert!(out.log.for_order(OrderId(2)).all(|e| e.kind != EventKind::Match));
    }

    #[test]
    fn unsorted_orders_rejected() {
        let r = line(&[100.0]);
        let table = ElasticityTable::default();
        let orders = [order(1, 0, 1, 50.0, &r), order(2, 1, 0, 10.0, &r)];
        assert!(matches!(
            run_simulation(&config(1, 5.0), &orders, &r, &table, &at(0, 2)),
            Err(EngineError::Unsorted(OrderId(2)))
        ));
    }

    #[test]
    fn invalid_configs() {
        assert!(config(0, 5.0).validate().is_err());
        assert!(config(1, 0.0).validate().is_err());
        assert!(SimConfig { max_detour: 1.2, ..config(1, 5.0) }.validate().is_err());
        assert!(SimConfig { horizon: (10.0, 10.0), ..config(1, 5.0) }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }

    #[test]
    fn fleet_on_single_node() {
        let r = line(&[100.0, 100.0]);
        let fleet = init_fleet(&SimConfig::default(), &at(2, 3), r.network(), &mut rng_stream(1, STREAM_FLEET)).unwrap();
        assert_eq!(fleet.len(), 500);
        assert!(fleet.iter().all(|v| v.node == 2 && v.is_idle()));
    }

    #[test]
    fn fleet_counts_within_three_sigma() {
        let r = line(&[100.0]);
        let fleet = init_fleet(&SimConfig::default(), &[0.8, 0.2], r.network(), &mut rng_stream(9, STREAM_FLEET)).unwrap();
        let a = fleet.iter().filter(|v| v.node == 0).count() as f64;
        let sigma = (500.0f64 * 0.8 * 0.2).sqrt();
        assert!((a - 400.0).abs() <= 3.0 * sigma, "{a}");
    }

    #[test]
    fn pooled_pair_is_delivered_within_guarantee() {
        // Two riders going the same way along a line, one vehicle.
        let r = line(&[500.0, 500.0, 500.0, 500.0]);
        let table = ElasticityTable::default();
        let cfg = SimConfig {
            pricing: PricingParams::default().with_discount(0.49),
            max_detour: 0.49,
            ..config(1, 10.0)
        };
        let orders = [order(1, 0, 4, 0.0, &r), order(2, 1, 3, 0.0, &r)];
        // Acceptance is below one, so search seeds until both choose Share.
        let out = (0..200)
            .map(|seed| run_simulation(&SimConfig { seed, ..cfg.clone() }, &orders, &r, &table, &at(0, 5)).unwrap())
            .find(|o| o.records.iter().all(|r| r.choice == ServiceChoice::Share))
            .expect("some seed yields two sharers");
        assert!(out.records.iter().all(|r| r.pooled && r.outcome == Outcome::Delivered));
        assert_eq!(out.records[0].shared_distance, 1000.0);
        assert_eq!(out.records[0].saved_distance + out.records[1].saved_distance, 1000.0);
        assert_eq!(out.fleet.occupied_m, 2000.0);
    }
}
