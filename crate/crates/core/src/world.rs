//! Procedural road networks used as synthetic driving regions.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::geo::{GeoPoint, Point2};
use crate::graph::{EdgeId, NodeId, RoadGraph};

/// Geodetic anchor of every synthetic world.
pub const WORLD_ORIGIN: GeoPoint = GeoPoint {
    lat: 42.3601,
    lon: -71.0942,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldKind {
    Grid,
    FourWay,
    TJunction,
    Fork,
    Roundabout,
    Composite,
}

impl WorldKind {
    pub const ALL: [WorldKind; 6] = [
        WorldKind::Grid,
        WorldKind::FourWay,
        WorldKind::TJunction,
        WorldKind::Fork,
        WorldKind::Roundabout,
        WorldKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorldKind::Grid => "grid",
            WorldKind::FourWay => "four-way",
            WorldKind::TJunction => "t-junction",
            WorldKind::Fork => "fork",
            WorldKind::Roundabout => "roundabout",
            WorldKind::Composite => "composite",
        }
    }
}

impl fmt::Display for WorldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorldKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorldKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GraphError::Config(format!("unsupported world kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
    /// Side length of the region, meters.
    pub extents: f64,
    /// Lattice spacing (grid kinds) or roundabout scale, meters.
    pub block_size: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn new(kind: WorldKind, extents: f64, block_size: f64, seed: u64) -> Self {
        WorldSpec {
            kind,
            extents,
            block_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.block_size > 0.0) || !self.block_size.is_finite() {
            return Err(GraphError::Config("block_size must be > 0".into()));
        }
        if !(self.extents >= self.block_size) || !self.extents.is_finite() {
            return Err(GraphError::Config("extents must be >= block_size".into()));
        }
        Ok(())
    }
}

/// Builds the road network described by `spec`. Deterministic in `spec.seed`.
///
/// * `grid`: an n×n lattice (n = ⌊extents/block⌋ + 1) of two-way streets.
/// * `four-way`, `t-junction`: a center node with 4 or 3 two-way arms of
///   length extents/2, rotated and slightly splayed by the seed.
/// * `fork`: a stem that splits into two branches.
/// * `roundabout`: a one-way counter-clockwise loop with 4 two-way radial approaches.
/// * `composite`: a jittered lattice with some streets removed (stays strongly connected).
pub fn build_world(spec: &WorldSpec) -> Result<RoadGraph, GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut g = RoadGraph::new(WORLD_ORIGIN);
    let arm = spec.extents / 2.0;
    match spec.kind {
        WorldKind::Grid => lattice(&mut g, spec, None)?,
        WorldKind::Composite => lattice(&mut g, spec, Some(&mut rng))?,
        WorldKind::FourWay | WorldKind::TJunction => {
            let rot = rng.random_range(0.0..TAU);
            let bearings: &[f64] = if spec.kind == WorldKind::FourWay {
                &[0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2]
            } else {
                &[FRAC_PI_2, PI, 3.0 * FRAC_PI_2]
            };
            g.add_node(NodeId(0), Point2::default());
            for (i, b) in bearings.iter().enumerate() {
                let a = rot + b + rng.random_range(-0.12..0.12);
                let id = NodeId(i as i64 + 1);
                g.add_node(id, Point2::new(arm * a.cos(), arm * a.sin()));
                g.add_two_way(NodeId(0), id, vec![Point2::default(), g.node(id).unwrap()])?;
            }
        }
        WorldKind::Fork => {
            let rot = rng.random_range(0.0..TAU);
            let spread = rng.random_range(0.45..0.7);
            g.add_node(NodeId(0), Point2::default());
            let dirs = [rot + PI, rot + spread, rot - spread];
            for (i, a) in dirs.iter().enumerate() {
                let id = NodeId(i as i64 + 1);
                g.add_node(id, Point2::new(arm * a.cos(), arm * a.sin()));
                g.add_two_way(NodeId(0), id, vec![Point2::default(), g.node(id).unwrap()])?;
            }
        }
        WorldKind::Roundabout => {
            let radius = (spec.block_size * 0.3).clamp(8.0, 25.0).min(arm * 0.5);
            let rot = rng.random_range(0.0..TAU);
            let junctions: Vec<f64> = (0..4).map(|i| rot + i as f64 * FRAC_PI_2).collect();
            for (i, a) in junctions.iter().enumerate() {
                g.add_node(
                    NodeId(i as i64),
                    Point2::new(radius * a.cos(), radius * a.sin()),
                );
                g.add_node(
                    NodeId(i as i64 + 4),
                    Point2::new(arm * a.cos(), arm * a.sin()),
                );
            }
            const ARC_STEPS: usize = 12;
            for (i, a) in junctions.iter().enumerate() {
                let arc: Vec<Point2> = (0..=ARC_STEPS)
                    .map(|k| {
                        let t = a + FRAC_PI_2 * k as f64 / ARC_STEPS as f64;
                        Point2::new(radius * t.cos(), radius * t.sin())
                    })
                    .collect();
                g.add_edge(NodeId(i as i64), NodeId(((i + 1) % 4) as i64), arc)?;
            }
            for i in 0..4 {
                let (j, o) = (NodeId(i), NodeId(i + 4));
                g.add_two_way(j, o, vec![g.node(j).unwrap(), g.node(o).unwrap()])?;
            }
        }
    }
    Ok(g)
}

/// Shortest route between two random nodes, at least `min_length` meters
/// long. Gives up after 200 draws.
pub fn random_route<R: Rng + ?Sized>(graph: &RoadGraph, min_length: f64, rng: &mut R) -> Option<Vec<EdgeId>> {
    let ids: Vec<NodeId> = graph.nodes().keys().copied().collect();
    if ids.len() < 2 {
        return None;
    }
    for _ in 0..200 {
        let a = ids[rng.random_range(0..ids.len())];
        let b = ids[rng.random_range(0..ids.len())];
        let Ok(route) = graph.shortest_route(a, b) else {
            continue;
        };
        let len: f64 = route.iter().map(|&e| graph.edge(e).planar_length()).sum();
        if !route.is_empty() && len >= min_length {
            return Some(route);
        }
    }
    None
}

/// Random walk from a random edge until it is `min_length` meters long or
/// reaches a dead end. At each node the next edge is drawn uniformly from
/// the out-edges, excluding the immediate U-turn.
pub fn random_walk<R: Rng + ?Sized>(graph: &RoadGraph, min_length: f64, rng: &mut R) -> Option<Vec<EdgeId>> {
    if graph.edges().is_empty() {
        return None;
    }
    let mut e = EdgeId(rng.random_range(0..graph.edges().len()));
    let mut route = vec![e];
    let mut len = graph.edge(e).planar_length();
    // bounded so graphs with dead ends cannot loop forever
    for _ in 0..10_000 {
        if len >= min_length {
            return Some(route);
        }
        let cur = graph.edge(e);
        let out = graph.out_edges(cur.to);
        let onward: Vec<EdgeId> = out.iter().copied().filter(|&o| graph.edge(o).to != cur.from).collect();
        if onward.is_empty() {
            return Some(route);
        }
        e = onward[rng.random_range(0..onward.len())];
        route.push(e);
        len += graph.edge(e).planar_length();
    }
    None
}

fn lattice(
    g: &mut RoadGraph,
    spec: &WorldSpec,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<(), GraphError> {
    let n = (spec.extents / spec.block_size + 1e-9).floor() as usize + 1;
    let half = (n - 1) as f64 * spec.block_size / 2.0;
    let id = |i: usize, j: usize| NodeId((j * n + i) as i64);
    for j in 0..n {
        for i in 0..n {
            let mut p = Point2::new(
                i as f64 * spec.block_size - half,
                j as f64 * spec.block_size - half,
            );
            if let Some(rng) = jitter.as_deref_mut() {
                let amp = 0.12 * spec.block_size;
                p = p.add(Point2::new(
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                ));
            }
            g.add_node(id(i, j), p);
        }
    }
    let mut links = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if i + 1 < n {
                links.push((id(i, j), id(i + 1, j)));
            }
            if j + 1 < n {
                links.push((id(i, j), id(i, j + 1)));
            }
        }
    }
    if let Some(rng) = jitter {
        // drop roughly a fifth of the streets, never disconnecting the lattice
        let mut kept: BTreeSet<(NodeId, NodeId)> = links.iter().copied().collect();
        for &l in &links {
            if rng.random_bool(0.2) {
                kept.remove(&l);
                if !connected(n * n, &kept) {
                    kept.insert(l);
                }
            }
        }
        links.retain(|l| kept.contains(l));
    }
    for (a, b) in links {
        g.add_two_way(a, b, vec![g.node(a).unwrap(), g.node(b).unwrap()])?;
    }
    Ok(())
}

fn connected(n: usize, links: &BTreeSet<(NodeId, NodeId)>) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(a, b) in links {
            let (a, b) = (a.0 as usize, b.0 as usize);
            let other = if a == v {
                b
            } else if b == v {
                a
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strongly_connected(g: &RoadGraph) -> bool {
        let ids: Vec<NodeId> = g.nodes().keys().copied().collect();
        ids.iter()
            .all(|&a| ids.iter().all(|&b| g.shortest_route(a, b).is_ok()))
    }

    #[test]
    fn minimal_grid_is_two_by_two() {
        let g = build_world(&WorldSpec::new(WorldKind::Grid, 50.0, 50.0, 0)).unwrap();
        assert_eq!(g.nodes().len(), 4);
        assert_eq!(g.edges().len(), 8);
    }

    #[test]
    fn four_way_has_center_and_four_arms() {
        let g = build_world(&WorldSpec::new(WorldKind::FourWay, 100.0, 50.0, 7)).unwrap();
        assert_eq!(g.nodes().len(), 5);
        assert_eq!(g.edges().len(), 8);
        assert_eq!(g.degree(NodeId(0)), 4);
    }

    #[test]
    fn roundabout_has_loop_and_four_approaches() {
        let g = build_world(&WorldSpec::new(WorldKind::Roundabout, 120.0, 60.0, 1)).unwrap();
        assert_eq!(g.nodes().len(), 8);
        assert_eq!(g.edges().len(), 12);
        // the loop is one-way
        let loop_edges = g
            .edges()
            .iter()
            .filter(|e| e.from.0 < 4 && e.to.0 < 4)
            .count();
        assert_eq!(loop_edges, 4);
    }

    #[test]
    fn same_seed_gives_identical_graphs() {
        for kind in WorldKind::ALL {
            let spec = WorldSpec::new(kind, 200.0, 60.0, 42);
            let a = build_world(&spec).unwrap().to_jsonl_string();
            let b = build_world(&spec).unwrap().to_jsonl_string();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn every_kind_is_strongly_connected() {
        for kind in WorldKind::ALL {
            for seed in 0..5 {
                let g = build_world(&WorldSpec::new(kind, 200.0, 50.0, seed)).unwrap();
                assert!(g.nodes().len() <= 100);
                assert!(strongly_connected(&g), "{kind} seed {seed}");
                g.validate().unwrap();
            }
        }
    }

    #[test]
    fn unsupported_kind_and_bad_sizes_are_config_errors() {
        assert!(matches!(
            "spiral".parse::<WorldKind>(),
            Err(GraphError::Config(_))
        ));
        assert!(build_world(&WorldSpec::new(WorldKind::Grid, 10.0, 50.0, 0)).is_err());
        assert!(build_world(&WorldSpec::new(WorldKind::Grid, 10.0, 0.0, 0)).is_err());
    }
}
