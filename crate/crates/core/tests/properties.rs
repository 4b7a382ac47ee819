use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;

use topo_nav_core::belief::{belief_stats, coverage_fraction, posterior_from_log_likelihoods, Hypothesis, PoseBelief};
use topo_nav_core::geo::{haversine, wrap_angle, GeoPoint, Point2};
use topo_nav_core::graph::{EdgeId, NodeId, RoadGraph};
use topo_nav_core::mdn::{gmm_density, phi_half_norm, Architecture, Component, GmmParams, Hyper, ModelParams};
use topo_nav_core::osm::parse_osm;
use topo_nav_core::render::{render_patch, split_charts, Grid, MapPatch, PatchSpec, Pose};
use topo_nav_core::seeded_rng;
use topo_nav_core::sim::{step_dynamics, Observation, Trace, TraceSample, KAPPA_MAX};
use topo_nav_core::world::{build_world, WorldKind, WorldSpec};

fn origin() -> GeoPoint {
    GeoPoint::new(42.36, -71.09).unwrap()
}

/// Random directed graph with up to 8 nodes.
fn small_graph() -> impl Strategy<Value = RoadGraph> {
    (2usize..=8)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((-300.0..300.0f64, -300.0..300.0f64), n),
                prop::collection::vec(any::<bool>(), n * n),
            )
        })
        .prop_map(|(pts, adj)| {
            let n = pts.len();
            let mut g = RoadGraph::new(origin());
            for (i, &(x, y)) in pts.iter().enumerate() {
                g.add_node(NodeId(i as i64), Point2::new(x, y));
            }
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (Point2::new(pts[i].0, pts[i].1), Point2::new(pts[j].0, pts[j].1));
                    if i != j && adj[i * n + j] && a.dist(b) > 1e-3 {
                        g.add_straight_edge(NodeId(i as i64), NodeId(j as i64)).unwrap();
                    }
                }
            }
            g
        })
}

/// Cheapest simple path by exhaustive depth-first enumeration.
fn brute_force_cost(g: &RoadGraph, at: NodeId, dst: NodeId, seen: &mut BTreeSet<NodeId>) -> Option<f64> {
    if at == dst {
        return Some(0.0);
    }
    seen.insert(at);
    let mut best: Option<f64> = None;
    for &e in g.out_edges(at) {
        let edge = g.edge(e);
        if seen.contains(&edge.to) {
            continue;
        }
        if let Some(rest) = brute_force_cost(g, edge.to, dst, seen) {
            let c = edge.weight + rest;
            best = Some(best.map_or(c, |b: f64| b.min(c)));
        }
    }
    seen.remove(&at);
    best
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn gmm() -> impl Strategy<Value = GmmParams> {
    (1usize..=5).prop_flat_map(|k| {
        (
            simplex(k),
            prop::collection::vec(-KAPPA_MAX..KAPPA_MAX, k),
            prop::collection::vec(1e-3..1.0f64, k),
        )
            .prop_map(|(phi, mu, sigma)| {
                GmmParams::new(
                    phi.into_iter()
                        .zip(mu)
                        .zip(sigma)
                        .map(|((phi, mu), sigma)| Component { phi, mu, sigma })
                        .collect(),
                )
            })
    })
}

fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / (n - 1) as f64;
    let inner: f64 = (1..n - 1).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

fn pose() -> impl Strategy<Value = Pose> {
    (-100.0..100.0f64, -100.0..100.0f64, -PI..PI).prop_map(|(x, y, h)| Pose::new(x, y, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn graph_jsonl_round_trip(g in small_graph()) {
        let text = g.to_jsonl_string();
        let back = RoadGraph::from_jsonl_str(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_jsonl_string(), text);
    }

    #[test]
    fn shortest_route_matches_exhaustive_search(g in small_graph(), s in 0i64..8, d in 0i64..8) {
        let n = g.nodes().len() as i64;
        let (src, dst) = (NodeId(s % n), NodeId(d % n));
        let oracle = brute_force_cost(&g, src, dst, &mut BTreeSet::new());
        match (g.shortest_route(src, dst), oracle) {
            (Ok(route), Some(best)) => {
                let w: f64 = route.iter().map(|&e| g.edge(e).weight).sum();
                prop_assert!((w - best).abs() <= 1e-9 * best.max(1.0), "{} vs {}", w, best);
                if let (Some(first), Some(last)) = (route.first(), route.last()) {
                    prop_assert_eq!(g.edge(*first).from, src);
                    prop_assert_eq!(g.edge(*last).to, dst);
                }
            }
            (Err(_), None) => {}
            (r, o) => prop_assert!(false, "route {:?} oracle {:?}", r, o),
        }
    }

    #[test]
    fn osm_edge_weight_is_sum_of_segment_lengths(
        pts in prop::collection::vec((-0.004..0.004f64, -0.004..0.004f64), 2..8),
    ) {
        let geo: Vec<GeoPoint> = pts
            .iter()
            .map(|&(dl, dn)| GeoPoint::new(42.36 + dl, -71.09 + dn).unwrap())
            .collect();
        let mut doc = String::from("<osm>");
        for (i, p) in geo.iter().enumerate() {
            doc += &format!(r#"<node id="{}" lat="{}" lon="{}"/>"#, i + 1, p.lat, p.lon);
        }
        doc += r#"<way id="1">"#;
        for i in 0..geo.len() {
            doc += &format!(r#"<nd ref="{}"/>"#, i + 1);
        }
        doc += r#"<tag k="oneway" v="yes"/></way></osm>"#;
        let g = parse_osm(&doc, origin()).unwrap();
        prop_assert_eq!(g.edges().len(), 1);
        let expected: f64 = geo.windows(2).map(|w| haversine(w[0], w[1])).sum();
        let w = g.edges()[0].weight;
        prop_assert!(((w - expected) / expected).abs() < 1e-6, "{} vs {}", w, expected);
    }

    #[test]
    fn render_ignores_edge_order_and_commutes_with_translation(
        g in small_graph(), p in pose(), dx in -50.0..50.0f64, dy in -50.0..50.0f64,
    ) {
        let spec = PatchSpec { size: 32, ..Default::default() };
        let base = render_patch(&g, &p, None, &spec).unwrap();

        let mut shuffled = RoadGraph::new(origin());
        let mut moved = RoadGraph::new(origin());
        for (&id, &at) in g.nodes() {
            shuffled.add_node(id, at);
            moved.add_node(id, at.add(Point2::new(dx, dy)));
        }
        for e in g.edges().iter().rev() {
            shuffled.add_edge(e.from, e.to, e.polyline.clone()).unwrap();
        }
        for e in g.edges() {
            let poly = e.polyline.iter().map(|q| q.add(Point2::new(dx, dy))).collect();
            moved.add_edge(e.from, e.to, poly).unwrap();
        }
        prop_assert_eq!(&render_patch(&shuffled, &p, None, &spec).unwrap().drivable, &base.drivable);
        let p2 = Pose::new(p.x + dx, p.y + dy, p.heading);
        let shifted = render_patch(&moved, &p2, None, &spec).unwrap();
        // translation can move a stroke boundary across a pixel center by rounding
        let diff = shifted.drivable.raw().iter().zip(base.drivable.raw()).filter(|(a, b)| a != b).count();
        prop_assert!(diff <= 2, "{} pixels differ", diff);
    }

    #[test]
    fn charts_never_revisit_a_node(seed in 0u64..1000, steps in 2usize..40) {
        let g = build_world(&WorldSpec::new(WorldKind::Grid, 120.0, 40.0, 0)).unwrap();
        let mut rng = seeded_rng(seed);
        let mut at = NodeId(0);
        let mut route: Vec<EdgeId> = Vec::new();
        for _ in 0..steps {
            let out = g.out_edges(at);
            let e = out[rng.random_range(0..out.len())];
            route.push(e);
            at = g.edge(e).to;
        }
        let charts = split_charts(&g, &route).unwrap();
        let joined: Vec<EdgeId> = charts.iter().flat_map(|c| c.edges.iter().copied()).collect();
        prop_assert_eq!(&joined, &route);
        for c in &charts {
            // every node entered inside a chart is distinct; a loop may close on its start
            let entered: Vec<NodeId> = c.edges.iter().map(|&e| g.edge(e).to).collect();
            let first = g.edge(c.edges[0]).from;
            let mut seen = BTreeSet::new();
            for (i, n) in entered.iter().enumerate() {
                let closes_loop = i + 1 == entered.len() && *n == first;
                prop_assert!(seen.insert(*n) || closes_loop);
                prop_assert!(*n != first || closes_loop);
            }
        }
    }

    #[test]
    fn dynamics_keeps_heading_wrapped(
        x in -1e4..1e4f64, y in -1e4..1e4f64, h in -50.0..50.0f64,
        k in -1.0..1.0f64, v in 0.0..30.0f64, dt in 0.0..1.0f64,
    ) {
        let q = step_dynamics(&Pose::new(x, y, h), k, v, dt);
        prop_assert!(q.heading >= -PI && q.heading < PI);
    }

    #[test]
    fn trace_csv_round_trips(rows in prop::collection::vec(prop::array::uniform10(-1e6..1e6f64), 0..20)) {
        let trace = Trace {
            samples: rows
                .iter()
                .map(|r| TraceSample {
                    t: r[0], x: r[1], y: r[2], alpha: r[3], gx: r[4],
                    gy: r[5], galpha: r[6], gamma: r[7], v: r[8], theta_s: r[9],
                })
                .collect(),
        };
        let csv = trace.to_csv_string();
        let back = Trace::read_csv(csv.as_bytes()).unwrap();
        prop_assert_eq!(&back, &trace);
        prop_assert_eq!(back.to_csv_string(), csv);
    }

    #[test]
    fn density_integrates_to_one(g in gmm()) {
        let lo = g.components.iter().map(|c| c.mu).fold(f64::INFINITY, f64::min);
        let hi = g.components.iter().map(|c| c.mu).fold(f64::NEG_INFINITY, f64::max);
        let s = g.components.iter().map(|c| c.sigma).fold(0.0, f64::max);
        let total = trapezoid(|t| gmm_density(&g, t), lo - 8.0 * s, hi + 8.0 * s, 10_000);
        prop_assert!((total - 1.0).abs() < 1e-3, "{}", total);
    }

    #[test]
    fn half_norm_is_extremal_at_one_hot_and_uniform(phi in (2usize..=6).prop_flat_map(simplex)) {
        let k = phi.len();
        let mut one_hot = vec![0.0; k];
        one_hot[0] = 1.0;
        let uniform = vec![1.0 / k as f64; k];
        let p = phi_half_norm(&phi, 0.0);
        prop_assert!(phi_half_norm(&one_hot, 0.0) <= p + 1e-12);
        prop_assert!(p <= phi_half_norm(&uniform, 0.0) + 1e-12);
    }

    #[test]
    fn posterior_stays_on_the_simplex(
        raw in prop::collection::vec((pose(), 0.01..1.0f64, -50.0..5.0f64), 1..20),
    ) {
        let total: f64 = raw.iter().map(|r| r.1).sum();
        let prior = PoseBelief::new(
            raw.iter().map(|(p, w, _)| Hypothesis { pose: *p, weight: w / total }).collect(),
        ).unwrap();
        let ll: Vec<f64> = raw.iter().map(|r| r.2).collect();
        let post = posterior_from_log_likelihoods(&prior, &ll).unwrap();
        let w = post.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(post.len(), prior.len());
        for (a, b) in post.hypotheses().iter().zip(prior.hypotheses()) {
            prop_assert_eq!(a.pose, b.pose);
        }
    }

    #[test]
    // three or fewer poses give a singular moment covariance whose determinant is rounding noise
    fn belief_entropy_ignores_order_and_translation(
        raw in prop::collection::vec((pose(), 0.01..1.0f64), 4..20),
        dx in -500.0..500.0f64, dy in -500.0..500.0f64, rot in 0usize..20,
    ) {
        let total: f64 = raw.iter().map(|r| r.1).sum();
        let hyps: Vec<Hypothesis> = raw.iter().map(|(p, w)| Hypothesis { pose: *p, weight: w / total }).collect();
        let a = belief_stats(&PoseBelief::new(hyps.clone()).unwrap());
        let mut moved: Vec<Hypothesis> = hyps
            .iter()
            .map(|h| Hypothesis { pose: Pose::new(h.pose.x + dx, h.pose.y + dy, h.pose.heading), weight: h.weight })
            .collect();
        let n = moved.len();
        moved.rotate_left(rot % n);
        let b = belief_stats(&PoseBelief::new(moved).unwrap());
        prop_assert!((a.entropy - b.entropy).abs() < 1e-6 * a.entropy.abs().max(1.0), "{} {}", a.entropy, b.entropy);
    }

    #[test]
    fn coverage_is_monotone_in_z(
        pairs in prop::collection::vec((gmm(), -KAPPA_MAX..KAPPA_MAX), 1..30),
        z1 in 0.0..4.0f64, dz in 0.0..4.0f64,
    ) {
        let a = coverage_fraction(&pairs, z1).unwrap();
        let b = coverage_fraction(&pairs, z1 + dz).unwrap();
        prop_assert!(a <= b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_worlds_are_strongly_connected(seed in 0u64..10_000, kind in 0usize..6) {
        let g = build_world(&WorldSpec::new(WorldKind::ALL[kind], 200.0, 50.0, seed)).unwrap();
        prop_assert!(g.nodes().len() <= 100);
        for &a in g.nodes().keys() {
            let reach = g.distances_within(a, f64::INFINITY);
            prop_assert_eq!(reach.len(), g.nodes().len(), "from {}", a);
        }
    }

    #[test]
    fn forward_pass_yields_valid_mixtures(seed in any::<u64>(), fill in 0.0..1.0f64) {
        let arch = Architecture {
            patch_size: 16,
            obs_channels: [2, 2],
            map_channels: 2,
            route_channels: 2,
            hidden: [6, 4],
            det_hidden: 3,
        };
        let mut rng = seeded_rng(seed);
        let h = Hyper::default();
        let mut p = ModelParams::init(h, arch, &mut rng).unwrap();
        for w in p.weights_mut() {
            *w *= rng.random_range(0.0..20.0);
        }
        let grid = |rng: &mut topo_nav_core::Rng| {
            let mut g = Grid::zeros(16);
            for v in g.raw_mut() {
                *v = if rng.random_bool(fill) { 255 } else { 0 };
            }
            g
        };
        let obs = Observation { raster: grid(&mut rng) };
        let spec = PatchSpec { size: 16, ..Default::default() };
        let map = MapPatch { spec, center: Pose::default(), drivable: grid(&mut rng), route: Some(grid(&mut rng)) };
        let g = p.forward_stochastic(&obs, &map.unrouted()).unwrap();
        prop_assert_eq!(g.components.len(), h.k);
        prop_assert!(g.validate(h.kappa_max).is_ok(), "{:?}", g);
        for c in &g.components {
            prop_assert!(c.sigma >= h.sigma_min && c.sigma <= h.sigma_max);
        }
        let d = p.forward_deterministic(&obs, &map).unwrap();
        prop_assert!(d.is_finite());
    }
}

#[test]
fn wrap_angle_fixes_in_range_values() {
    for a in [-PI, -1.0, 0.0, 3.0] {
        assert_eq!(wrap_angle(a), a);
    }
}
