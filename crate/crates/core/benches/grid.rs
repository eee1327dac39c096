//! Sequential against data-parallel execution of the two fan-out points:
//! experiment-grid cells and candidate-trip enumeration. Build with
//! `--no-default-features` to time the pure sequential fallback.

use std::hint::black_box;
use std::path::Path;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poolsim::demand::{OrderId, ServiceChoice};
use poolsim::experiment::{run_cells, Experiment};
use poolsim::matching::{enumerate_candidate_trips, MatchingParams, Request, VehicleId, VehicleState};
use poolsim::netgraph::{RoadNetwork, Router};
use poolsim::with_jobs;

const GRID: &str = r#"
discounts = [0.0, 0.2, 0.4]
detours = [0.3]
seeds = [1, 2]

[engine]
horizon = [21600.0, 23400.0]
fleet_size = 30

[[profiles]]
name = "bench"
network = { kind = "grid", rows = 8, cols = 8, spacing_m = 300.0 }
demand = { kind = "synthetic", arrival_rate_per_hour = 400.0 }
"#;

fn modes() -> [(&'static str, Option<usize>); 2] {
    [("sequential", Some(1)), ("parallel", None)]
}

fn experiment_grid(c: &mut Criterion) {
    let exp = Experiment::from_toml(GRID, Path::new(".")).unwrap();
    let cells = exp.cells();
    let mut group = c.benchmark_group("experiment_grid");
    group.sample_size(10);
    for (name, jobs) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_jobs(jobs, || black_box(run_cells(&exp, &cells, false))).unwrap())
        });
    }
    group.finish();
}

fn candidate_enumeration(c: &mut Criterion) {
    let router = Router::new(Arc::new(RoadNetwork::grid(12, 12, 250.0, 104.06, 30.66)), 1024);
    let n = router.network().node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<Request> = (0..60)
        .map(|i| {
            let origin = rng.random_range(0..n);
            let destination = (origin + rng.random_range(1..n)) % n;
            let trip_distance = router.distance(origin, destination).unwrap();
            Request { order: OrderId(i), origin, destination, trip_distance, choice: ServiceChoice::Share, fare: 12.0 }
        })
        .collect();
    let vehicles: Vec<VehicleState> = (0..80).map(|i| VehicleState::idle(VehicleId(i), rng.random_range(0..n))).collect();
    let params = MatchingParams::default();
    // Warm the route cache so both modes time enumeration only.
    enumerate_candidate_trips(&batch, &vehicles, &router, &params);

    let mut group = c.benchmark_group("candidate_enumeration");
    for (name, jobs) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_jobs(jobs, || black_box(enumerate_candidate_trips(&batch, &vehicles, &router, &params))).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, experiment_grid, candidate_enumeration);
criterion_main!(benches);
