use topo_nav_core::graph::{EdgeId, RoadGraph};
use topo_nav_core::matching::{match_trace, route_edges, MatchConfig};
use topo_nav_core::seeded_rng;
use topo_nav_core::sim::{corrupt_gps, simulate_route, GpsNoise, RoutePath, SimConfig, Tracker};
use topo_nav_core::world::{build_world, random_route, WorldKind, WorldSpec};

fn grid() -> RoadGraph {
    build_world(&WorldSpec::new(WorldKind::Grid, 400.0, 80.0, 0)).unwrap()
}

/// Fraction of fixes matched to the edge the vehicle was actually on.
fn accuracy(g: &RoadGraph, sigma: f64, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let route = random_route(g, 400.0, &mut rng).unwrap();
    let cfg = SimConfig::default();
    let none = GpsNoise {
        sigma_xy: 0.0,
        sigma_heading: 0.0,
    };
    let trace = simulate_route(g, &route, &cfg, &none, &mut rng).unwrap();
    let path = RoutePath::new(g, &route).unwrap();
    let mut tracker = Tracker::new(&path, &cfg);
    let truth: Vec<EdgeId> = trace
        .samples
        .iter()
        .map(|s| path.edge_at(tracker.update(&s.true_pose()).1))
        .collect();
    let fixes: Vec<_> = trace
        .samples
        .iter()
        .map(|s| corrupt_gps(&s.true_pose(), sigma, 0.0, &mut rng).position())
        .collect();
    let m = match_trace(g, &fixes, &MatchConfig::default()).unwrap();
    let hits = m.edges.iter().zip(&truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[test]
fn grid_accuracy_at_five_meter_noise() {
    let g = grid();
    let accs: Vec<f64> = (0..10).map(|s| accuracy(&g, 5.0, s)).collect();
    assert!(accs.iter().all(|&a| a >= 0.95), "{accs:?}");
}

#[test]
fn accuracy_does_not_improve_with_more_noise() {
    let g = grid();
    let sigmas = [1.0, 5.0, 10.0, 15.0];
    let means: Vec<f64> = sigmas
        .iter()
        .map(|&s| (0..20).map(|seed| accuracy(&g, s, 100 + seed)).sum::<f64>() / 20.0)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
}

#[test]
fn matched_route_is_connected() {
    let g = grid();
    let mut rng = seeded_rng(9);
    let route = random_route(&g, 300.0, &mut rng).unwrap();
    let trace = simulate_route(&g, &route, &SimConfig::default(), &GpsNoise::default(), &mut rng).unwrap();
    let fixes: Vec<_> = trace.samples.iter().map(|s| s.gps_pose().position()).collect();
    let m = match_trace(&g, &fixes, &MatchConfig::default()).unwrap();
    let r = route_edges(&g, &m.edges).unwrap();
    assert_eq!(r, route);
}
