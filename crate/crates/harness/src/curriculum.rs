//! Synthetic supervised data: (observation, routed map, steering) triples
//! sampled along simulated drives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use topo_nav_core::geo::{wrap_angle, Point2};
use topo_nav_core::graph::{EdgeId, NodeId, RoadGraph};
use topo_nav_core::mdn::Sample;
use topo_nav_core::render::{render_patch, split_charts, Grid, PatchSpec, Pose};
use topo_nav_core::sim::{
    pursuit_curvature, synthesize_observation, Observation, ObservationNoise, RoutePath, SimConfig,
};
use topo_nav_core::world::{build_world, random_walk, WorldKind, WorldSpec};

use crate::error::HarnessError;

/// Gaussian pose perturbation applied before rendering a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Lateral offset std, m.
    pub lateral: f64,
    /// Heading offset std, rad.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Total number of training samples.
    pub samples: usize,
    /// Number of training worlds; their kinds cycle through `kinds`.
    pub worlds: usize,
    pub kinds: Vec<WorldKind>,
    pub extents: f64,
    pub block_size: f64,
    /// Seed of the first training world. Evaluation worlds should use other seeds.
    pub world_seed: u64,
    /// Share of samples drawn within `junction_radius` of a junction.
    pub junction_fraction: f64,
    pub junction_radius: f64,
    /// Share of samples whose observation is blanked, which forces the
    /// model to read the map rather than the camera stand-in.
    pub blank_rate: f64,
    /// Share of samples using the `far` perturbation instead of `near`.
    pub far_fraction: f64,
    pub near: Perturbation,
    pub far: Perturbation,
    /// Samples taken from each simulated route.
    pub per_route: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            samples: 10_000,
            worlds: 12,
            kinds: WorldKind::ALL.to_vec(),
            extents: 240.0,
            block_size: 60.0,
            world_seed: 1000,
            junction_fraction: 0.7,
            junction_radius: 8.0,
            blank_rate: 0.5,
            far_fraction: 0.5,
            near: Perturbation {
                lateral: 0.3,
                heading: 0.05,
            },
            far: Perturbation {
                lateral: 3.0,
                heading: 0.6,
            },
            per_route: 8,
        }
    }
}

impl CurriculumConfig {
    /// Appends a message for every invalid field.
    pub fn check(&self, prefix: &str, errs: &mut Vec<String>) {
        let mut bad = |field: &str, msg: &str| errs.push(format!("{prefix}.{field}: {msg}"));
        if self.samples == 0 {
            bad("samples", "must be >= 1");
        }
        if self.worlds == 0 {
            bad("worlds", "must be >= 1");
        }
        if self.kinds.is_empty() {
            bad("kinds", "must name at least one world kind");
        }
        if !(self.block_size > 0.0) {
            bad("block_size", "must be > 0");
        }
        if !(self.extents >= self.block_size) {
            bad("extents", "must be >= block_size");
        }
        for (name, v) in [
            ("junction_fraction", self.junction_fraction),
            ("blank_rate", self.blank_rate),
            ("far_fraction", self.far_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad(name, "must be in [0, 1]");
            }
        }
        if !(self.junction_radius > 0.0) {
            bad("junction_radius", "must be > 0");
        }
        for (name, p) in [("near", self.near), ("far", self.far)] {
            if !(p.lateral >= 0.0 && p.heading >= 0.0) {
                errs.push(format!("{prefix}.{name}: perturbation stds must be >= 0"));
            }
        }
        if self.per_route == 0 {
            errs.push(format!("{prefix}.per_route: must be >= 1"));
        }
    }
}

/// Nodes where three or more streets meet.
pub fn junctions(graph: &RoadGraph) -> Vec<Point2> {
    graph
        .nodes()
        .iter()
        .filter(|(&id, _)| graph.degree(id) >= 3)
        .map(|(_, &p)| p)
        .collect()
}

/// A route prepared for rendering.
pub struct Drive<'g> {
    pub graph: &'g RoadGraph,
    pub route: Vec<EdgeId>,
    pub path: RoutePath,
    charts: Vec<(usize, usize)>,
}

impl<'g> Drive<'g> {
    pub fn new(graph: &'g RoadGraph, route: Vec<EdgeId>) -> Result<Self, HarnessError> {
        let path = RoutePath::new(graph, &route)?;
        let charts = split_charts(graph, &route)?
            .into_iter()
            .map(|c| (c.start, c.end))
            .collect();
        Ok(Drive {
            graph,
            route,
            path,
            charts,
        })
    }

    /// Route edges of the chart containing arc position `s`.
    pub fn chart_at(&self, s: f64) -> &[EdgeId] {
        let i = self.path.edge_index_at(s);
        let (a, b) = self
            .charts
            .iter()
            .copied()
            .find(|&(a, b)| a <= i && i < b)
            .unwrap_or((0, self.route.len()));
        &self.route[a..b]
    }

    /// Routed map patch at `pose`, drawing the chart at progress `s`.
    pub fn map_at(&self, pose: &Pose, s: f64, spec: &PatchSpec) -> Result<topo_nav_core::MapPatch, HarnessError> {
        Ok(render_patch(self.graph, pose, Some(self.chart_at(s)), spec)?)
    }

    /// Centerline poses every `step` meters of route, with their progress.
    ///
    /// Sampling the route itself rather than a driven trajectory keeps the
    /// base pose independent of the branch taken at the next junction.
    pub fn centerline(&self, step: f64) -> Vec<(Pose, f64)> {
        let n = (self.path.length() / step).floor() as usize;
        (0..n)
            .map(|i| {
                let s = i as f64 * step;
                let p = self.path.point_at(s);
                (Pose::new(p.x, p.y, self.path.heading_at(s)), s)
            })
            .collect()
    }
}

/// Moves `pose` sideways by `lateral` meters and rotates it by `dh`.
pub fn offset_pose(pose: &Pose, lateral: f64, dh: f64) -> Pose {
    let l = pose.left().scale(lateral);
    Pose::new(pose.x + l.x, pose.y + l.y, wrap_angle(pose.heading + dh))
}

fn normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let d = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
    rand_distr::Distribution::sample(&d, rng)
}

/// Blank raster of the patch size.
pub fn blank_observation(spec: &PatchSpec) -> Observation {
    Observation {
        raster: Grid::zeros(spec.size),
    }
}

/// One supervised sample at `pose` (progress `s`) with the pure-pursuit target.
#[allow(clippy::too_many_arguments)]
pub fn make_sample<R: Rng + ?Sized>(
    drive: &Drive<'_>,
    pose: &Pose,
    s: f64,
    sim: &SimConfig,
    spec: &PatchSpec,
    noise: &ObservationNoise,
    blank: bool,
    rng: &mut R,
) -> Result<Sample, HarnessError> {
    let target = pursuit_curvature(&drive.path, pose, s, sim.lookahead, sim.kappa_max);
    let map = drive.map_at(pose, s, spec)?;
    let obs = if blank {
        blank_observation(spec)
    } else {
        synthesize_observation(drive.graph, pose, spec, noise, rng)?
    };
    Ok(Sample { obs, map, target })
}

/// Training worlds of the curriculum.
pub fn training_worlds(cfg: &CurriculumConfig) -> Result<Vec<RoadGraph>, HarnessError> {
    (0..cfg.worlds)
        .map(|i| {
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let spec = WorldSpec::new(kind, cfg.extents, cfg.block_size, cfg.world_seed + i as u64);
            Ok(build_world(&spec)?)
        })
        .collect()
}

/// Generates the training set. Deterministic in `rng`'s state.
pub fn generate<R: Rng + ?Sized>(
    cfg: &CurriculumConfig,
    sim: &SimConfig,
    spec: &PatchSpec,
    noise: &ObservationNoise,
    rng: &mut R,
) -> Result<Vec<Sample>, HarnessError> {
    generate_on(&training_worlds(cfg)?, cfg, sim, spec, noise, rng)
}

/// Samples along random walks on `worlds`, `cfg.samples` split evenly
/// between them. The world fields of `cfg` are ignored.
pub fn generate_on<R: Rng + ?Sized>(
    worlds: &[RoadGraph],
    cfg: &CurriculumConfig,
    sim: &SimConfig,
    spec: &PatchSpec,
    noise: &ObservationNoise,
    rng: &mut R,
) -> Result<Vec<Sample>, HarnessError> {
    if worlds.is_empty() {
        return Err(HarnessError::Invalid("no worlds to sample from".into()));
    }
    let mut out = Vec::with_capacity(cfg.samples);
    for (w, graph) in worlds.iter().enumerate() {
        let quota = cfg.samples / worlds.len() + usize::from(w < cfg.samples % worlds.len());
        let junc = junctions(graph);
        let mut made = 0;
        let mut attempts = 0;
        while made < quota {
            attempts += 1;
            if attempts > 50 * quota + 100 {
                return Err(HarnessError::Invalid(format!("training world {w} yields no usable routes")));
            }
            let Some(route) = random_walk(graph, 3.0 * cfg.block_size, rng) else {
                continue;
            };
            let drive = Drive::new(graph, route)?;
            let poses = drive.centerline(sim.speed * sim.dt);
            if poses.is_empty() {
                continue;
            }
            let near_junction = |p: &Pose| junc.iter().any(|j| j.dist(p.position()) < cfg.junction_radius);
            let (at_junc, away): (Vec<usize>, Vec<usize>) = (0..poses.len()).partition(|&i| near_junction(&poses[i].0));
            for _ in 0..cfg.per_route.min(quota - made) {
                let pool = if !at_junc.is_empty() && (away.is_empty() || rng.random::<f64>() < cfg.junction_fraction) {
                    &at_junc
                } else {
                    &away
                };
                let (base, s) = poses[pool[rng.random_range(0..pool.len())]];
                let p = if rng.random::<f64>() < cfg.far_fraction { cfg.far } else { cfg.near };
                let pose = offset_pose(&base, normal(rng, p.lateral), normal(rng, p.heading));
                let blank = rng.random::<f64>() < cfg.blank_rate;
                out.push(make_sample(&drive, &pose, s, sim, spec, noise, blank, rng)?);
                made += 1;
            }
        }
    }
    Ok(out)
}

/// Node ids of junctions, for experiments that need topology rather than coordinates.
pub fn junction_ids(graph: &RoadGraph) -> Vec<NodeId> {
    graph.nodes().keys().copied().filter(|&id| graph.degree(id) >= 3).collect()
}
