//! Hand-built test locations: structurally distinct places for the
//! confusion experiment and intersection approaches for multimodality checks.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use topo_nav_core::geo::Point2;
use topo_nav_core::graph::{EdgeId, NodeId, RoadGraph};
use topo_nav_core::render::Pose;
use topo_nav_core::sim::{simulate_route, GpsNoise, RoutePath, SimConfig, Tracker};
use topo_nav_core::world::{build_world, WorldKind, WorldSpec, WORLD_ORIGIN};

use crate::error::HarnessError;

/// A pose on a route, with the pure-pursuit steering executed there.
#[derive(Debug, Clone)]
pub struct Location {
    pub name: &'static str,
    pub graph: RoadGraph,
    pub route: Vec<EdgeId>,
    pub pose: Pose,
    pub progress: f64,
    pub steering: f64,
}

pub const LOCATION_NAMES: [&str; 5] = ["straight", "left-curve", "right-curve", "four-way", "roundabout"];

fn rotate(p: Point2, a: f64) -> Point2 {
    let (s, c) = a.sin_cos();
    Point2::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

/// Straight lead-in, circular arc (positive radius turns left), straight lead-out.
/// Starts at the origin heading along +y.
fn curve_polyline(lead: f64, radius: f64, sweep: f64) -> Vec<Point2> {
    let mut pts = vec![Point2::new(0.0, 0.0), Point2::new(0.0, lead)];
    // left turns circle about (−r, lead), right turns about (+r, lead)
    let cx = -radius;
    let side = radius.signum();
    let r = radius.abs();
    let steps = ((sweep * r) / 1.0).ceil().max(4.0) as usize;
    for k in 1..=steps {
        let t = sweep * k as f64 / steps as f64;
        // angle measured from the center to the start of the arc
        let a0 = if side > 0.0 { 0.0 } else { std::f64::consts::PI };
        let a = a0 + side * t;
        pts.push(Point2::new(cx + r * a.cos(), lead + r * a.sin()));
    }
    let end = *pts.last().unwrap();
    let heading = side * sweep;
    let dir = Point2::new(-heading.sin(), heading.cos());
    pts.push(end.add(dir.scale(lead)));
    pts
}

fn single_edge(points: Vec<Point2>, rot: f64) -> Result<(RoadGraph, Vec<EdgeId>), HarnessError> {
    let pts: Vec<Point2> = points.into_iter().map(|p| rotate(p, rot)).collect();
    let mut g = RoadGraph::new(WORLD_ORIGIN);
    g.add_node(NodeId(0), pts[0]);
    g.add_node(NodeId(1), *pts.last().unwrap());
    let e = g.add_edge(NodeId(0), NodeId(1), pts)?;
    Ok((g, vec![e]))
}

/// Simulates the oracle along `route` and returns the sample closest to progress `at`.
fn settle(
    name: &'static str,
    graph: RoadGraph,
    route: Vec<EdgeId>,
    at: f64,
    sim: &SimConfig,
) -> Result<Location, HarnessError> {
    let none = GpsNoise {
        sigma_xy: 0.0,
        sigma_heading: 0.0,
    };
    let trace = simulate_route(&graph, &route, sim, &none, &mut topo_nav_core::seeded_rng(0))?;
    let path = RoutePath::new(&graph, &route)?;
    let mut tracker = Tracker::new(&path, sim);
    let mut best: Option<(f64, Pose, f64, f64)> = None;
    for s in &trace.samples {
        let p = s.true_pose();
        let prog = tracker.update(&p).1;
        let gap = (prog - at).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, p, prog, s.theta_s));
        }
    }
    let (_, pose, progress, steering) =
        best.ok_or_else(|| HarnessError::Invalid(format!("location {name} produced an empty trace")))?;
    Ok(Location {
        name,
        graph,
        route,
        pose,
        progress,
        steering,
    })
}

/// The five confusion locations, in [`LOCATION_NAMES`] order. The seed
/// rotates every location and jitters its geometry.
pub fn confusion_locations<R: Rng + ?Sized>(sim: &SimConfig, rng: &mut R) -> Result<Vec<Location>, HarnessError> {
    let mut out = Vec::with_capacity(5);
    let jitter = |rng: &mut R| rng.random_range(0.95..1.05);

    let (g, r) = single_edge(vec![Point2::new(0.0, 0.0), Point2::new(0.0, 200.0)], rng.random_range(0.0..6.3))?;
    out.push(settle("straight", g, r, 100.0, sim)?);

    let radius = 10.0 * jitter(rng);
    let (g, r) = single_edge(curve_polyline(40.0, radius, FRAC_PI_2), rng.random_range(0.0..6.3))?;
    out.push(settle("left-curve", g, r, 40.0 + radius * FRAC_PI_2 / 2.0, sim)?);

    let radius = 33.0 * jitter(rng);
    let sweep = 2.0 * FRAC_PI_2 * 2.0 / 3.0;
    let (g, r) = single_edge(curve_polyline(40.0, -radius, sweep), rng.random_range(0.0..6.3))?;
    out.push(settle("right-curve", g, r, 40.0 + radius * sweep / 2.0, sim)?);

    let g = build_world(&WorldSpec::new(WorldKind::FourWay, 120.0, 60.0, rng.random()))?;
    let (route, center) = right_turn(&g)?;
    out.push(settle("four-way", g, route, center, sim)?);

    let g = build_world(&WorldSpec::new(WorldKind::Roundabout, 120.0, 60.0, rng.random()))?;
    let route = g.shortest_route(NodeId(4), NodeId(6))?;
    let entry = g.edge(route[0]).planar_length();
    let loop_half = g.edge(route[1]).planar_length() / 2.0;
    out.push(settle("roundabout", g, route, entry + loop_half, sim)?);
    Ok(out)
}

/// Signed heading change from the direction of `a` to the direction of `b` (left positive).
fn turn(a: Point2, b: Point2) -> f64 {
    let cross = a.x * b.y - a.y * b.x;
    cross.atan2(a.dot(b))
}

/// Route from arm 1 through the center of a four-way world, turning right;
/// returns it with the progress at the center.
fn right_turn(g: &RoadGraph) -> Result<(Vec<EdgeId>, f64), HarnessError> {
    let center = NodeId(0);
    let inbound = g
        .out_edges(NodeId(1))
        .iter()
        .copied()
        .find(|&e| g.edge(e).to == center)
        .ok_or_else(|| HarnessError::Invalid("four-way arm is not connected".into()))?;
    let c = g.node(center).unwrap_or_default();
    let dir_in = c.sub(g.node(NodeId(1)).unwrap_or_default());
    let out = g
        .out_edges(center)
        .iter()
        .copied()
        .filter(|&e| g.edge(e).to != NodeId(1))
        .min_by(|&a, &b| {
            let ta = turn(dir_in, g.node(g.edge(a).to).unwrap_or_default().sub(c));
            let tb = turn(dir_in, g.node(g.edge(b).to).unwrap_or_default().sub(c));
            ta.total_cmp(&tb)
        })
        .ok_or_else(|| HarnessError::Invalid("four-way center has no exits".into()))?;
    Ok((vec![inbound, out], g.edge(inbound).planar_length()))
}

/// Poses `distance` meters before the center of a four-way world on each
/// arm, heading toward the center.
pub fn four_way_approaches(g: &RoadGraph, distance: f64) -> Vec<Pose> {
    let c = g.node(NodeId(0)).unwrap_or_default();
    g.nodes()
        .iter()
        .filter(|(&id, _)| id != NodeId(0))
        .map(|(_, &a)| {
            let dir = c.sub(a).scale(1.0 / c.dist(a));
            let p = c.sub(dir.scale(distance));
            Pose::new(p.x, p.y, (-dir.x).atan2(dir.y))
        })
        .collect()
}

/// Poses at the middle of every edge longer than `min_length`, heading along it.
pub fn mid_block_poses(g: &RoadGraph, min_length: f64) -> Vec<Pose> {
    g.edges()
        .iter()
        .filter(|e| e.planar_length() >= min_length)
        .map(|e| {
            let a = e.polyline[0];
            let b = *e.polyline.last().unwrap_or(&a);
            let dir = b.sub(a).scale(1.0 / a.dist(b).max(1e-9));
            let m = a.lerp(b, 0.5);
            Pose::new(m.x, m.y, (-dir.x).atan2(dir.y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use topo_nav_core::seeded_rng;

    #[test]
    fn locations_have_the_expected_steering() {
        let sim = SimConfig::default();
        let locs = confusion_locations(&sim, &mut seeded_rng(3)).unwrap();
        let names: Vec<&str> = locs.iter().map(|l| l.name).collect();
        assert_eq!(names, LOCATION_NAMES);
        let k: Vec<f64> = locs.iter().map(|l| l.steering).collect();
        assert!(k[0].abs() < 1e-6, "{k:?}");
        assert!((k[1] - 0.1).abs() < 0.02, "{k:?}");
        assert!((k[2] + 0.03).abs() < 0.01, "{k:?}");
        assert!(k[3] < -0.05, "{k:?}");
        assert!(k[4] > 0.03, "{k:?}");
    }

    #[test]
    fn approaches_face_the_center() {
        let g = build_world(&WorldSpec::new(WorldKind::FourWay, 120.0, 60.0, 1)).unwrap();
        let poses = four_way_approaches(&g, 4.0);
        assert_eq!(poses.len(), 4);
        for p in poses {
            assert!((p.position().norm() - 4.0).abs() < 1e-9);
            // forward points at the origin
            assert!((p.forward().dot(p.position().scale(-0.25)) - 1.0).abs() < 1e-9);
        }
    }
}
