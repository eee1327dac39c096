//! Trip pooling under a detour guarantee, en-route insertion, batch
//! customer-vehicle assignment and idle-vehicle repositioning.
//!
//! Node positions here are network indices (see [`RoadNetwork::index_of`]).
//! A vehicle is described from its *anchor*: the next node it can change
//! course at, plus the meters it still has to drive to get there.
//!
//! [`RoadNetwork::index_of`]: crate::netgraph::RoadNetwork::index_of

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::demand::{OrderId, ServiceChoice};
use crate::netgraph::Router;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stop {
    pub kind: StopKind,
    pub order: OrderId,
    pub node: usize,
}

impl Stop {
    pub fn pickup(order: OrderId, node: usize) -> Self {
        Self { kind: StopKind::Pickup, order, node }
    }

    pub fn dropoff(order: OrderId, node: usize) -> Self {
        Self { kind: StopKind::Dropoff, order, node }
    }
}

/// An unmatched customer as the matcher sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub order: OrderId,
    pub origin: usize,
    pub destination: usize,
    pub trip_distance: f64,
    pub choice: ServiceChoice,
    /// Upfront fare for the chosen service.
    pub fare: f64,
}

/// A customer already scheduled on a vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Passenger {
    pub order: OrderId,
    pub trip_distance: f64,
    pub choice: ServiceChoice,
    pub onboard: bool,
    /// In-vehicle meters accrued by the time the vehicle reaches its anchor.
    pub ridden_m: f64,
    /// Already sharing (or scheduled to share) with another customer.
    pub pooled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub node: usize,
    pub offset_m: f64,
    pub schedule: Vec<Stop>,
    /// Scheduled customers, onboard ones included.
    pub passengers: Vec<Passenger>,
    pub capacity: usize,
}

impl VehicleState {
    pub fn idle(id: VehicleId, node: usize) -> Self {
        Self { id, node, offset_m: 0.0, schedule: Vec::new(), passengers: Vec::new(), capacity: 2 }
    }

    pub fn is_idle(&self) -> bool {
        self.passengers.is_empty()
    }

    pub fn onboard(&self) -> impl Iterator<Item = &Passenger> {
        self.passengers.iter().filter(|p| p.onboard)
    }

    /// Carries a single ride-sharing customer who is not yet paired, so one
    /// more ride-sharing customer may be inserted.
    pub fn accepts_insertion(&self) -> bool {
        self.passengers.len() == 1
            && self.capacity >= 2
            && self.passengers[0].choice == ServiceChoice::Share
            && !self.passengers[0].pooled
    }
}

/// Per-customer detour ratio: (in-vehicle distance - trip distance) / trip distance.
pub fn detour_ratio(in_vehicle_m: f64, trip_distance_m: f64) -> f64 {
    (in_vehicle_m - trip_distance_m) / trip_distance_m
}

/// Distance profile of a stop sequence driven from an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEval {
    /// Meters from the vehicle's current position to the last stop.
    pub total_m: f64,
    /// Realized detour ratio per customer in the plan.
    pub detours: Vec<(OrderId, f64)>,
    /// Meters during which two customers are on board together.
    pub shared_m: f64,
}

/// What the evaluator needs to know about each customer in a plan.
#[derive(Debug, Clone, Copy)]
struct Rider {
    order: OrderId,
    trip_distance: f64,
    /// Some(ridden) when already onboard at the anchor.
    onboard: Option<f64>,
}

fn evaluate_plan(
    router: &Router,
    start: usize,
    offset_m: f64,
    stops: &[Stop],
    riders: &[Rider],
    capacity: usize,
    max_detour: f64,
) -> Option<PlanEval> {
    let mut cum = offset_m;
    let mut pos = start;
    let mut load = riders.iter().filter(|r| r.onboard.is_some()).count();
    if load > capacity {
        return None;
    }
    let mut picked: HashMap<OrderId, f64> = riders
        .iter()
        .filter_map(|r| r.onboard.map(|ridden| (r.order, offset_m - ridden)))
        .collect();
    let mut shared_m = 0.0;
    let mut detours = Vec::with_capacity(riders.len());
    for stop in stops {
        let leg = router.distance(pos, stop.node)?;
        if load >= 2 {
            shared_m += leg;
        }
        cum += leg;
        pos = stop.node;
        match stop.kind {
            StopKind::Pickup => {
                load += 1;
                if load > capacity {
                    return None;
                }
                picked.insert(stop.order, cum);
            }
            StopKind::Dropoff => {
                let start_cum = picked.remove(&stop.order)?;
                load -= 1;
                let rider = riders.iter().find(|r| r.order == stop.order)?;
                let ratio = detour_ratio(cum - start_cum, rider.trip_distance);
                if ratio > max_detour {
                    return None;
                }
                detours.push((stop.order, ratio.max(0.0)));
            }
        }
    }
    if !picked.is_empty() {
        return None;
    }
    Some(PlanEval { total_m: cum, detours, shared_m })
}

/// A feasible pooled itinerary for two ride-sharing requests, starting at
/// the first pickup.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRoute {
    pub stops: [Stop; 4],
    pub distance_m: f64,
    pub shared_m: f64,
    /// Detour ratio per member, in `stops` pickup order.
    pub detours: [(OrderId, f64); 2],
}

/// Best pooled ordering of two requests: both pickups precede both
/// dropoffs, the two customers ride together for a positive distance, and
/// neither customer's detour ratio exceeds `max_detour`.
pub fn pool_feasible(router: &Router, max_detour: f64, r1: &Request, r2: &Request) -> Option<PooledRoute> {
    // Canonical order keeps the result independent of argument order.
    let (a, b) = if r1.order <= r2.order { (r1, r2) } else { (r2, r1) };
    let p = |r: &Request| Stop::pickup(r.order, r.origin);
    let d = |r: &Request| Stop::dropoff(r.order, r.destination);
    let orderings = [[p(a), p(b), d(a), d(b)], [p(a), p(b), d(b), d(a)], [p(b), p(a), d(a), d(b)], [p(b), p(a), d(b), d(a)]];
    let riders = [
        Rider { order: a.order, trip_distance: a.trip_distance, onboard: None },
        Rider { order: b.order, trip_distance: b.trip_distance, onboard: None },
    ];
    let mut best: Option<PooledRoute> = None;
    for stops in orderings {
        let Some(eval) = evaluate_plan(router, stops[0].node, 0.0, &stops, &riders, 2, max_detour) else { continue };
        if !(eval.shared_m > 0.0) {
            continue;
        }
        if best.as_ref().is_some_and(|b| b.distance_m <= eval.total_m) {
            continue;
        }
        let first = stops[0].order;
        let detour_of = |o: OrderId| eval.detours.iter().find(|(x, _)| *x == o).unwrap().1;
        let second = if first == a.order { b.order } else { a.order };
        best = Some(PooledRoute {
            stops,
            distance_m: eval.total_m,
            shared_m: eval.shared_m,
            detours: [(first, detour_of(first)), (second, detour_of(second))],
        });
    }
    best
}

/// The cheapest way to add `request` to a vehicle's remaining schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    pub schedule: Vec<Stop>,
    /// Extra meters relative to the current schedule.
    pub added_m: f64,
    pub total_m: f64,
    pub detours: Vec<(OrderId, f64)>,
}

fn riders_of(vehicle: &VehicleState) -> Vec<Rider> {
    vehicle
        .passengers
        .iter()
        .map(|p| Rider { order: p.order, trip_distance: p.trip_distance, onboard: p.onboard.then_some(p.ridden_m) })
        .collect()
}

/// Tries every precedence-preserving position pair for the request's pickup
/// and dropoff. Every customer's detour must stay within `max_detour`, and
/// when the vehicle already carries someone the newcomer must actually ride
/// with them for a positive distance.
pub fn insertion_feasible(router: &Router, max_detour: f64, vehicle: &VehicleState, request: &Request) -> Option<Insertion> {
    let mut riders = riders_of(vehicle);
    let base = evaluate_plan(router, vehicle.node, vehicle.offset_m, &vehicle.schedule, &riders, vehicle.capacity, f64::INFINITY)?;
    riders.push(Rider { order: request.order, trip_distance: request.trip_distance, onboard: None });
    let needs_overlap = !vehicle.passengers.is_empty();
    let m = vehicle.schedule.len();
    let mut best: Option<Insertion> = None;
    for i in 0..=m {
        for j in i + 1..=m + 1 {
            let mut stops = vehicle.schedule.clone();
            stops.insert(i, Stop::pickup(request.order, request.origin));
            stops.insert(j, Stop::dropoff(request.order, request.destination));
            let Some(eval) = evaluate_plan(router, vehicle.node, vehicle.offset_m, &stops, &riders, vehicle.capacity, max_detour) else {
                continue;
            };
            if needs_overlap && !(eval.shared_m > 0.0) {
                continue;
            }
            if best.as_ref().is_some_and(|b| b.total_m <= eval.total_m) {
                continue;
            }
            best = Some(Insertion { schedule: stops, added_m: eval.total_m - base.total_m, total_m: eval.total_m, detours: eval.detours });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripKind {
    /// One customer on an idle vehicle.
    Single,
    /// Two pooled ride-sharing customers on an idle vehicle.
    Pair,
    /// One ride-sharing customer joining a partially occupied vehicle.
    Insertion,
}

/// One entry of the assignment problem: serve `requests` with `vehicle`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrip {
    pub kind: TripKind,
    /// Sorted member ids (one or two).
    pub requests: Vec<OrderId>,
    pub vehicle: VehicleId,
    /// The vehicle's full schedule if this trip is chosen.
    pub schedule: Vec<Stop>,
    /// Extra vehicle meters needed to serve the trip from its position.
    pub added_m: f64,
    pub price: f64,
    pub cost: f64,
    pub utility: f64,
    pub detours: Vec<(OrderId, f64)>,
}

impl CandidateTrip {
    /// Ordering key for deterministic tie-breaks: members, then vehicle.
    pub fn key(&self) -> (&[OrderId], VehicleId) {
        (&self.requests, self.vehicle)
    }
}

/// Trip utility: price minus vehicle cost.
pub fn trip_utility(price: f64, cost: f64) -> f64 {
    price - cost
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingParams {
    pub max_detour: f64,
    /// Vehicle operating cost in CNY per km driven.
    pub cost_per_km: f64,
}

impl Default for MatchingParams {
    fn default() -> Self {
        Self { max_detour: 0.3, cost_per_km: 0.5 }
    }
}

fn make_trip(
    kind: TripKind,
    members: &[&Request],
    vehicle: VehicleId,
    schedule: Vec<Stop>,
    added_m: f64,
    detours: Vec<(OrderId, f64)>,
    params: &MatchingParams,
) -> CandidateTrip {
    let mut requests: Vec<OrderId> = members.iter().map(|r| r.order).collect();
    requests.sort();
    let price: f64 = members.iter().map(|r| r.fare).sum();
    let cost = params.cost_per_km * added_m / 1000.0;
    CandidateTrip { kind, requests, vehicle, schedule, added_m, price, cost, utility: trip_utility(price, cost), detours }
}

/// Builds every candidate trip for a batch: solo and ride-sharing singles on
/// idle vehicles, ride-sharing insertions into partially occupied vehicles,
/// and feasible ride-sharing pairs on idle vehicles.
pub fn enumerate_candidate_trips(
    batch: &[Request],
    vehicles: &[VehicleState],
    router: &Router,
    params: &MatchingParams,
) -> Vec<CandidateTrip> {
    let idle: Vec<&VehicleState> = vehicles.iter().filter(|v| v.is_idle()).collect();
    let partial: Vec<&VehicleState> = vehicles.iter().filter(|v| v.accepts_insertion()).collect();
    let sharers: Vec<&Request> = batch.iter().filter(|r| r.choice == ServiceChoice::Share).collect();

    let singles = par::flat_map(batch, |r| {
        let mut out = Vec::new();
        for v in &idle {
            let Some(pickup) = router.distance(v.node, r.origin) else { continue };
            let schedule = vec![Stop::pickup(r.order, r.origin), Stop::dropoff(r.order, r.destination)];
            let added = v.offset_m + pickup + r.trip_distance;
            out.push(make_trip(TripKind::Single, &[r], v.id, schedule, added, vec![(r.order, 0.0)], params));
        }
        if r.choice == ServiceChoice::Share {
            for v in &partial {
                if let Some(ins) = insertion_feasible(router, params.max_detour, v, r) {
                    out.push(make_trip(TripKind::Insertion, &[r], v.id, ins.schedule, ins.added_m, ins.detours, params));
                }
            }
        }
        out
    });

    let pair_indices: Vec<(usize, usize)> =
        (0..sharers.len()).flat_map(|i| (i + 1..sharers.len()).map(move |j| (i, j))).collect();
    let pairs = par::flat_map(&pair_indices, |&(i, j)| {
        let (a, b) = (sharers[i], sharers[j]);
        let Some(route) = pool_feasible(router, params.max_detour, a, b) else { return Vec::new() };
        let first = route.stops[0].node;
        idle.iter()
            .filter_map(|v| {
                let pickup = router.distance(v.node, first)?;
                let added = v.offset_m + pickup + route.distance_m;
                Some(make_trip(TripKind::Pair, &[a, b], v.id, route.stops.to_vec(), added, route.detours.to_vec(), params))
            })
            .collect()
    });

    let mut trips = singles;
    trips.extend(pairs);
    trips
}

/// Chosen trips of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    /// Indices into the candidate list, ascending.
    pub chosen: Vec<usize>,
    pub objective: f64,
    /// False when the search budget ran out and the incumbent was returned.
    pub optimal: bool,
    pub nodes_explored: u64,
}

/// Search-node budget per batch; the incumbent is returned when exceeded.
pub const DEFAULT_NODE_BUDGET: u64 = 200_000;

const TUNING_ROUNDS: usize = 100;

// Utilities are compared in integer micro-CNY so ties are exact.
fn to_micro(u: f64) -> i64 {
    (u * 1e6).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Free,
    Used,
    Excluded,
}

struct Packing<'a> {
    trips: &'a [CandidateTrip],
    items: Vec<Item>,
    vehicle_items: Vec<Vec<usize>>,
    request_items: Vec<Vec<usize>>,
    /// Elements branched on, in order; `true` for vehicles.
    by_vehicle: bool,
    order: Vec<usize>,
    vehicles: Vec<Slot>,
    requests: Vec<Slot>,
    chosen: Vec<usize>,
    value: i64,
    best: Vec<usize>,
    best_value: i64,
    nodes: u64,
    budget: u64,
    exhausted: bool,
    /// Lagrange multipliers on the one-trip-per-request constraints.
    lambda: Vec<i64>,
}

struct Item {
    trip: usize,
    vehicle: usize,
    requests: Vec<usize>,
    value: i64,
}

impl Packing<'_> {
    fn live(&self, item: &Item) -> bool {
        self.vehicles[item.vehicle] == Slot::Free && item.requests.iter().all(|&r| self.requests[r] == Slot::Free)
    }

    /// Upper bound on what the still-free vehicles and requests can add.
    fn bound(&self) -> i64 {
        let mut best_v = vec![0i64; self.vehicles.len()];
        // Request shares in half units: a pair splits its value.
        let mut best_r = vec![0i64; self.requests.len()];
        for item in &self.items {
            if !self.live(item) {
                continue;
            }
            best_v[item.vehicle] = best_v[item.vehicle].max(item.value);
            let share = if item.requests.len() == 1 { 2 * item.value } else { item.value };
            for &r in &item.requests {
                best_r[r] = best_r[r].max(share);
            }
        }
        let by_vehicle: i64 = best_v.iter().sum();
        let by_request: i64 = (best_r.iter().sum::<i64>() + 1).div_euclid(2);
        by_vehicle.min(by_request)
    }

    /// Tighter bound: a maximum-weight matching of free vehicles to free
    /// requests where an edge is worth the best live trip containing both.
    /// Mapping each trip of a packing to one of its members gives a
    /// matching of at least the packing's value.
    fn matching_bound(&self) -> i64 {
        let mut rows: HashMap<usize, usize> = HashMap::new();
        let mut cols: HashMap<usize, usize> = HashMap::new();
        let mut edges = Vec::new();
        for item in self.items.iter().filter(|i| self.live(i)) {
            let next = rows.len();
            let row = *rows.entry(item.vehicle).or_insert(next);
            for &r in &item.requests {
                let next = cols.len();
                let col = *cols.entry(r).or_insert(next);
                edges.push((row, col, item.value));
            }
        }
        if edges.is_empty() {
            return 0;
        }
        let mut w = vec![vec![0i64; cols.len()]; rows.len()];
        for (r, c, v) in edges {
            w[r][c] = w[r][c].max(v);
        }
        let cost: Vec<Vec<f64>> = w.iter().map(|row| row.iter().map(|&v| -(v as f64)).collect()).collect();
        min_cost_assignment(&cost)
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| w[r][c]))
            .sum()
    }

    /// Lagrangian bound with the current multipliers: every free vehicle
    /// takes its best reduced-value trip (or none) and each request still
    /// coverable contributes its multiplier. Valid for any multipliers >= 0.
    fn lagrange_bound(&self) -> i64 {
        let mut best_v = vec![0i64; self.vehicles.len()];
        let mut coverable = vec![false; self.requests.len()];
        for item in self.items.iter().filter(|i| self.live(i)) {
            let reduced = item.value - item.requests.iter().map(|&r| self.lambda[r]).sum::<i64>();
            best_v[item.vehicle] = best_v[item.vehicle].max(reduced);
            for &r in &item.requests {
                coverable[r] = true;
            }
        }
        let by_request: i64 = coverable.iter().zip(&self.lambda).filter(|(c, _)| **c).map(|(_, l)| l).sum();
        best_v.iter().sum::<i64>() + by_request
    }

    /// Subgradient descent on the root multipliers.
    fn tune_multipliers(&self) -> Vec<i64> {
        let n = self.requests.len();
        let mut lambda = vec![0.0f64; n];
        let mut best = vec![0i64; n];
        let mut best_bound = i64::MAX;
        let mut mu = 2.0;
        let mut stale = 0;
        for _ in 0..TUNING_ROUNDS {
            let rounded: Vec<i64> = lambda.iter().map(|l| l.round() as i64).collect();
            let mut pick: Vec<Option<(i64, usize)>> = vec![None; self.vehicles.len()];
            for (k, item) in self.items.iter().enumerate() {
                let reduced = item.value - item.requests.iter().map(|&r| rounded[r]).sum::<i64>();
                if reduced > 0 && pick[item.vehicle].is_none_or(|(v, _)| reduced > v) {
                    pick[item.vehicle] = Some((reduced, k));
                }
            }
            let bound = pick.iter().flatten().map(|(v, _)| v).sum::<i64>() + rounded.iter().sum::<i64>();
            if bound < best_bound {
                best_bound = bound;
                best = rounded;
                stale = 0;
            } else {
                stale += 1;
                if stale >= 5 {
                    mu /= 2.0;
                    stale = 0;
                }
            }
            let mut g = vec![1.0f64; n];
            for (_, k) in pick.iter().flatten() {
                for &r in &self.items[*k].requests {
                    g[r] -= 1.0;
                }
            }
            let norm: f64 = g.iter().map(|x| x * x).sum();
            let gap = (best_bound - self.best_value) as f64;
            if norm == 0.0 || gap <= 0.0 || mu < 1e-3 {
                break;
            }
            let step = mu * gap / norm;
            for (l, gr) in lambda.iter_mut().zip(&g) {
                *l = (*l - step * gr).max(0.0);
            }
        }
        best
    }

    fn solution_key(&self, chosen: &[usize]) -> Vec<(&[OrderId], VehicleId)> {
        let mut keys: Vec<_> = chosen.iter().map(|&i| self.trips[i].key()).collect();
        keys.sort();
        keys
    }

    fn offer(&mut self) {
        let better = match self.value.cmp(&self.best_value) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.solution_key(&self.chosen) < self.solution_key(&self.best),
        };
        if better {
            self.best_value = self.value;
            self.best = self.chosen.clone();
        }
    }

    fn options(&self, element: usize) -> Vec<usize> {
        let list = if self.by_vehicle { &self.vehicle_items[element] } else { &self.request_items[element] };
        list.iter().copied().filter(|&k| self.live(&self.items[k])).collect()
    }

    fn take(&mut self, k: usize, mark: Slot) {
        let item = &self.items[k];
        self.vehicles[item.vehicle] = mark;
        for &r in &item.requests {
            self.requests[r] = mark;
        }
    }

    fn search(&mut self, depth: usize) {
        if self.exhausted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        // Skip elements already settled by an earlier choice.
        let mut depth = depth;
        while depth < self.order.len() {
            let e = self.order[depth];
            let slot = if self.by_vehicle { self.vehicles[e] } else { self.requests[e] };
            if slot == Slot::Free {
                break;
            }
            depth += 1;
        }
        if depth == self.order.len() {
            self.offer();
            return;
        }
        if self.value + self.bound() < self.best_value
            || self.value + self.lagrange_bound() < self.best_value
            || self.value + self.matching_bound() < self.best_value
        {
            return;
        }
        let element = self.order[depth];
        for k in self.options(element) {
            self.take(k, Slot::Used);
            self.chosen.push(self.items[k].trip);
            self.value += self.items[k].value;
            self.search(depth + 1);
            self.value -= self.items[k].value;
            self.chosen.pop();
            self.take(k, Slot::Free);
            if self.exhausted {
                return;
            }
        }
        if self.by_vehicle {
            self.vehicles[element] = Slot::Excluded;
            self.search(depth + 1);
            self.vehicles[element] = Slot::Free;
        } else {
            self.requests[element] = Slot::Excluded;
            self.search(depth + 1);
            self.requests[element] = Slot::Free;
        }
    }
}

/// Maximizes total utility subject to one trip per vehicle and one trip per
/// customer. Branch and bound over whichever side (vehicles or customers) is
/// smaller, warm-started with a greedy packing. Among equal optima the
/// lexicographically smallest set of (members, vehicle) keys wins.
pub fn solve_assignment(trips: &[CandidateTrip], node_budget: u64) -> AssignmentSolution {
    let mut vehicle_ix: HashMap<VehicleId, usize> = HashMap::new();
    let mut request_ix: HashMap<OrderId, usize> = HashMap::new();
    let mut vehicle_ids: Vec<VehicleId> = trips.iter().map(|t| t.vehicle).collect();
    vehicle_ids.sort();
    vehicle_ids.dedup();
    let mut request_ids: Vec<OrderId> = trips.iter().flat_map(|t| t.requests.iter().copied()).collect();
    request_ids.sort();
    request_ids.dedup();
    for (i, v) in vehicle_ids.iter().enumerate() {
        vehicle_ix.insert(*v, i);
    }
    for (i, r) in request_ids.iter().enumerate() {
        request_ix.insert(*r, i);
    }

    // Negative-utility trips never improve a packing.
    let mut items: Vec<Item> = trips
        .iter()
        .enumerate()
        .filter(|(_, t)| to_micro(t.utility) >= 0)
        .map(|(i, t)| Item {
            trip: i,
            vehicle: vehicle_ix[&t.vehicle],
            requests: t.requests.iter().map(|r| request_ix[r]).collect(),
            value: to_micro(t.utility),
        })
        .collect();
    items.sort_by(|a, b| b.value.cmp(&a.value).then_with(|| trips[a.trip].key().cmp(&trips[b.trip].key())));

    let mut vehicle_items = vec![Vec::new(); vehicle_ids.len()];
    let mut request_items = vec![Vec::new(); request_ids.len()];
    for (k, item) in items.iter().enumerate() {
        vehicle_items[item.vehicle].push(k);
        for &r in &item.requests {
            request_items[r].push(k);
        }
    }
    let by_vehicle = vehicle_ids.len() <= request_ids.len();
    let lists = if by_vehicle { &vehicle_items } else { &request_items };
    let mut order: Vec<usize> = (0..lists.len()).filter(|&e| !lists[e].is_empty()).collect();
    // Most valuable elements first; index breaks ties.
    order.sort_by(|&a, &b| items[lists[b][0]].value.cmp(&items[lists[a][0]].value).then(a.cmp(&b)));

    let mut packing = Packing {
        trips,
        vehicle_items,
        request_items,
        by_vehicle,
        order,
        vehicles: vec![Slot::Free; vehicle_ids.len()],
        requests: vec![Slot::Free; request_ids.len()],
        chosen: Vec::new(),
        value: 0,
        best: Vec::new(),
        best_value: 0,
        nodes: 0,
        budget: node_budget,
        exhausted: false,
        lambda: Vec::new(),
        items,
    };

    // Greedy incumbent.
    let mut greedy = Vec::new();
    let mut greedy_value = 0;
    for k in 0..packing.items.len() {
        if packing.live(&packing.items[k]) {
            packing.take(k, Slot::Used);
            greedy.push(packing.items[k].trip);
            greedy_value += packing.items[k].value;
        }
    }
    packing.vehicles.fill(Slot::Free);
    packing.requests.fill(Slot::Free);
    packing.best = greedy;
    packing.best_value = greedy_value;

    packing.lambda = packing.tune_multipliers();
    packing.search(0);
    if packing.exhausted {
        log::warn!(
            "assignment search stopped after {} nodes; using incumbent with value {}",
            node_budget,
            packing.best_value as f64 / 1e6
        );
    }

    let mut chosen = packing.best;
    chosen.sort_unstable();
    let objective = chosen.iter().map(|&i| trips[i].utility).sum();
    AssignmentSolution { chosen, objective, optimal: !packing.exhausted, nodes_explored: packing.nodes }
}

/// Minimum-cost one-to-one assignment of rows to columns (Hungarian method
/// with potentials). Returns `row -> column`; with more rows than columns
/// some rows stay unassigned.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let by_col = min_cost_assignment(&transposed);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // 1-based arrays per the classic formulation; column 0 is a sentinel.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

// Stand-in cost for unreachable pairs; such pairs are never emitted.
const UNREACHABLE: f64 = 1e15;

/// Sends idle vehicles toward waiting customers' origins so that the total
/// pickup distance of the pairing is minimal. Returns `(vehicle, target node)`.
pub fn reposition_idle(idle: &[VehicleState], waiting: &[Request], router: &Router) -> Vec<(VehicleId, usize)> {
    if idle.is_empty() || waiting.is_empty() {
        return Vec::new();
    }
    let cost: Vec<Vec<f64>> = par::map(idle, |v| {
        waiting
            .iter()
            .map(|r| router.distance(v.node, r.origin).map_or(UNREACHABLE, |d| v.offset_m + d))
            .collect()
    });
    min_cost_assignment(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(i, col)| {
            let c = col?;
            (cost[i][c] < UNREACHABLE).then(|| (idle[i].id, waiting[c].origin))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{Edge, Node, NodeId, RoadNetwork};
    use std::sync::Arc;

    /// Two-way line graph with the given segment lengths.
    fn line_router(lengths: &[f64]) -> Router {
        let nodes = (0..=lengths.len()).map(|i| Node { id: NodeId(i as u64), lon: 0.0, lat: 0.0 }).collect();
        let mut edges = Vec::new();
        for (i, &l) in lengths.iter().enumerate() {
            edges.push(Edge { from: NodeId(i as u64), to: NodeId(i as u64 + 1), length_m: l });
            edges.push(Edge { from: NodeId(i as u64 + 1), to: NodeId(i as u64), length_m: l });
        }
        Router::new(Arc::new(RoadNetwork::new(nodes, edges).unwrap()), 64)
    }

    fn req(id: u64, o: usize, d: usize, router: &Router, choice: ServiceChoice) -> Request {
        Request { order: OrderId(id), origin: o, destination: d, trip_distance: router.distance(o, d).unwrap(), choice, fare: 10.0 }
    }

    #[test]
    fn identical_itineraries_pool_with_zero_detour() {
        let r = line_router(&[500.0, 500.0]);
        let a = req(1, 0, 2, &r, ServiceChoice::Share);
        let b = req(2, 0, 2, &r, ServiceChoice::Share);
        let route = pool_feasible(&r, 0.1, &a, &b).unwrap();
        assert_eq!(route.distance_m, 1000.0);
        assert_eq!(route.detours.map(|d| d.1), [0.0, 0.0]);
    }

    #[test]
    fn figure_eight_layout() {
        // C1: 0 -> 3 over d4 = 6 km via a shortcut; C2: 1 -> 2 over d2 = 5 km.
        // Pooled route 0 -d1-> 1 -d2-> 2 -d3-> 3 is 8 km.
        let nodes = (0..4).map(|i| Node { id: NodeId(i), lon: 0.0, lat: 0.0 }).collect();
        let e = |a, b, l| Edge { from: NodeId(a), to: NodeId(b), length_m: l };
        let net = RoadNetwork::new(nodes, vec![e(0, 1, 2000.0), e(1, 2, 5000.0), e(2, 3, 1000.0), e(0, 3, 6000.0)]).unwrap();
        let r = Router::new(Arc::new(net), 16);
        let c1 = req(1, 0, 3, &r, ServiceChoice::Share);
        let c2 = req(2, 1, 2, &r, ServiceChoice::Share);
        assert_eq!(c1.trip_distance, 6000.0);
        let route = pool_feasible(&r, 1.0 / 3.0, &c1, &c2).unwrap();
        assert_eq!(route.distance_m, 8000.0);
        assert_eq!(route.detours[0], (OrderId(1), 2000.0 / 6000.0));
        assert_eq!(route.detours[1], (OrderId(2), 0.0));
        assert!(pool_feasible(&r, 0.33, &c1, &c2).is_none());
    }

    #[test]
    fn antiparallel_trips_do_not_pool() {
        let r = line_router(&[400.0, 400.0]);
        let a = req(1, 0, 2, &r, ServiceChoice::Share);
        let b = req(2, 2, 0, &r, ServiceChoice::Share);
        assert!(pool_feasible(&r, 0.3, &a, &b).is_none());
    }

    #[test]
    fn degenerate_insertion_into_idle_vehicle() {
        let r = line_router(&[300.0, 300.0]);
        let v = VehicleState::idle(VehicleId(0), 0);
        let a = req(1, 0, 2, &r, ServiceChoice::Share);
        let ins = insertion_feasible(&r, 0.2, &v, &a).unwrap();
        assert_eq!(ins.schedule, vec![Stop::pickup(OrderId(1), 0), Stop::dropoff(OrderId(1), 2)]);
        assert_eq!(ins.detours, vec![(OrderId(1), 0.0)]);
        assert_eq!(ins.added_m, 600.0);
    }

    #[test]
    fn insertion_blocked_by_exhausted_slack() {
        // Onboard customer 0 -> 4 has ridden exactly the direct distance so
        // far (no slack beyond 0.0 detour) and any detour breaks it.
        let r = line_router(&[100.0, 100.0, 100.0, 100.0]);
        let v = VehicleState {
            id: VehicleId(0),
            node: 2,
            offset_m: 0.0,
            schedule: vec![Stop::dropoff(OrderId(1), 4)],
            passengers: vec![Passenger {
                order: OrderId(1),
                trip_distance: 400.0,
                choice: ServiceChoice::Share,
                onboard: true,
                ridden_m: 200.0,
                pooled: false,
            }],
            capacity: 2,
        };
        let backwards = req(2, 1, 3, &r, ServiceChoice::Share);
        assert!(insertion_feasible(&r, 0.0, &v, &backwards).is_none());
        let along = req(3, 3, 4, &r, ServiceChoice::Share);
        let ins = insertion_feasible(&r, 0.0, &v, &along).unwrap();
        assert_eq!(ins.added_m, 0.0);
    }

    #[test]
    fn solo_chooser_needs_idle_vehicle() {
        let r = line_router(&[300.0, 300.0, 300.0]);
        let busy = VehicleState {
            id: VehicleId(4),
            node: 0,
            offset_m: 0.0,
            schedule: vec![Stop::dropoff(OrderId(9), 3)],
            passengers: vec![Passenger {
                order: OrderId(9),
                trip_distance: 900.0,
                choice: ServiceChoice::Share,
                onboard: true,
                ridden_m: 0.0,
                pooled: false,
            }],
            capacity: 2,
        };
        let solo = req(1, 1, 2, &r, ServiceChoice::Solo);
        let trips = enumerate_candidate_trips(&[solo], &[busy], &r, &MatchingParams::default());
        assert!(trips.is_empty());
    }

    #[test]
    fn utility_arithmetic() {
        assert_eq!(trip_utility(19.0, 4.0), 15.0);
        assert!((trip_utility(15.2 + 12.0, 9.5) - 17.7).abs() < 1e-12);
        assert_eq!(trip_utility(3.0, 5.0), -2.0);
    }

    fn trip(reqs: &[u64], vehicle: u32, utility: f64) -> CandidateTrip {
        CandidateTrip {
            kind: if reqs.len() == 2 { TripKind::Pair } else { TripKind::Single },
            requests: reqs.iter().map(|&r| OrderId(r)).collect(),
            vehicle: VehicleId(vehicle),
            schedule: Vec::new(),
            added_m: 0.0,
            price: utility,
            cost: 0.0,
            utility,
            detours: Vec::new(),
        }
    }

    #[test]
    fn empty_and_single_assignments() {
        let empty = solve_assignment(&[], DEFAULT_NODE_BUDGET);
        assert!(empty.chosen.is_empty());
        assert_eq!(empty.objective, 0.0);
        let one = solve_assignment(&[trip(&[1], 0, 15.0)], DEFAULT_NODE_BUDGET);
        assert_eq!(one.chosen, vec![0]);
        assert_eq!(one.objective, 15.0);
    }

    #[test]
    fn pooled_trip_beats_best_single() {
        let trips = [trip(&[1, 2], 0, 17.0), trip(&[1], 0, 15.0), trip(&[2], 0, 9.0)];
        let sol = solve_assignment(&trips, DEFAULT_NODE_BUDGET);
        assert_eq!(sol.chosen, vec![0]);
        assert_eq!(sol.objective, 17.0);
    }

    #[test]
    fn ties_prefer_lexicographically_smallest() {
        let trips = [trip(&[2], 0, 5.0), trip(&[1], 0, 5.0)];
        let sol = solve_assignment(&trips, DEFAULT_NODE_BUDGET);
        assert_eq!(sol.chosen, vec![1]);
    }

    #[test]
    fn negative_trips_are_never_chosen() {
        let sol = solve_assignment(&[trip(&[1], 0, -1.0)], DEFAULT_NODE_BUDGET);
        assert!(sol.chosen.is_empty());
    }

    #[test]
    fn budget_exhaustion_returns_incumbent() {
        let trips: Vec<_> = (0u64..6).flat_map(|v| (0u64..6).map(move |r| trip(&[r], v as u32, (r * v) as f64 + 1.0))).collect();
        let sol = solve_assignment(&trips, 3);
        assert!(!sol.optimal);
        assert!(!sol.chosen.is_empty());
    }

    #[test]
    fn hungarian_crossing_pairs() {
        let cost = vec![vec![1.0, 5.0], vec![4.0, 2.0]];
        assert_eq!(min_cost_assignment(&cost), vec![Some(0), Some(1)]);
        let tall = vec![vec![3.0], vec![1.0], vec![2.0]];
        assert_eq!(min_cost_assignment(&tall), vec![None, Some(0), None]);
    }

    #[test]
    fn repositioning_moves() {
        let r = line_router(&[100.0, 100.0, 100.0]);
        let w = req(1, 3, 0, &r, ServiceChoice::Solo);
        let v = VehicleState::idle(VehicleId(2), 0);
        assert_eq!(reposition_idle(std::slice::from_ref(&v), &[w], &r), vec![(VehicleId(2), 3)]);
        assert!(reposition_idle(&[v], &[], &r).is_empty());
    }
}
