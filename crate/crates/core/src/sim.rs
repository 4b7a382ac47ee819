//! Synthetic sensors and driver: ego-frame observations, a pure-pursuit
//! oracle, unicycle dynamics, closed-loop traces and GPS corruption.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geo::{point_segment_distance, wrap_angle, Point2};
use crate::graph::{EdgeId, RoadGraph};
use crate::render::{render_drivable, Grid, PatchSpec, Pose};

/// Largest steerable curvature magnitude, 1/m (5 m turning radius).
pub const KAPPA_MAX: f64 = 0.2;

/// Clamps a curvature to [−κ_max, κ_max].
pub fn clamp_curvature(k: f64, kappa_max: f64) -> f64 {
    k.clamp(-kappa_max, kappa_max)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

/// Appearance noise of the camera stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationNoise {
    /// Lateral pose jitter, meters.
    pub lateral_jitter: f64,
    /// Heading jitter, radians.
    pub heading_jitter: f64,
    /// Per-pixel dropout probability.
    pub dropout: f64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        ObservationNoise {
            lateral_jitter: 0.5,
            heading_jitter: 0.05,
            dropout: 0.1,
        }
    }
}

impl ObservationNoise {
    pub const NONE: ObservationNoise = ObservationNoise {
        lateral_jitter: 0.0,
        heading_jitter: 0.0,
        dropout: 0.0,
    };

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(SimError::Invalid("dropout must be in [0,1]".into()));
        }
        if !(self.lateral_jitter >= 0.0) || !(self.heading_jitter >= 0.0) {
            return Err(SimError::Invalid("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ego-frame drivable raster seen from the true pose. Carries no route information.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub raster: Grid,
}

/// Renders what the vehicle "sees" at `true_pose`: the drivable raster from a
/// jittered pose, followed by per-pixel dropout.
pub fn synthesize_observation<R: Rng + ?Sized>(
    graph: &RoadGraph,
    true_pose: &Pose,
    spec: &PatchSpec,
    noise: &ObservationNoise,
    rng: &mut R,
) -> Result<Observation, SimError> {
    spec.validate()?;
    noise.validate()?;
    let lat = gaussian(rng, noise.lateral_jitter);
    let head = gaussian(rng, noise.heading_jitter);
    let shift = true_pose.left().scale(lat);
    let seen_from = Pose::new(
        true_pose.x + shift.x,
        true_pose.y + shift.y,
        true_pose.heading + head,
    );
    let mut raster = render_drivable(graph, &seen_from, spec);
    if noise.dropout > 0.0 {
        for v in raster.raw_mut() {
            if rng.random::<f64>() < noise.dropout {
                *v = 0;
            }
        }
    }
    Ok(Observation { raster })
}

/// A route flattened into one polyline with cumulative arc length.
#[derive(Debug, Clone)]
pub struct RoutePath {
    points: Vec<Point2>,
    cum: Vec<f64>,
    /// Route index of the edge each segment belongs to.
    seg_edge: Vec<usize>,
    edges: Vec<EdgeId>,
}

impl RoutePath {
    pub fn new(graph: &RoadGraph, route: &[EdgeId]) -> Result<Self, SimError> {
        if route.is_empty() {
            return Err(SimError::Invalid("empty route".into()));
        }
        let mut points = vec![graph.edge(route[0]).polyline[0]];
        let mut seg_edge = Vec::new();
        for (i, &e) in route.iter().enumerate() {
            let edge = graph.edge(e);
            if i > 0 && graph.edge(route[i - 1]).to != edge.from {
                return Err(SimError::Invalid(format!(
                    "route is not connected at index {i}"
                )));
            }
            for &p in &edge.polyline[1..] {
                if p.dist(*points.last().unwrap()) > 0.0 {
                    points.push(p);
                    seg_edge.push(i);
                }
            }
        }
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        Ok(RoutePath {
            points,
            cum,
            seg_edge,
            edges: route.to_vec(),
        })
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn start(&self) -> Point2 {
        self.points[0]
    }

    pub fn end(&self) -> Point2 {
        *self.points.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let k = self.cum.partition_point(|&c| c <= s);
        k.saturating_sub(1).min(self.points.len() - 2)
    }

    /// Point at arc length `s`, clamped to the route.
    pub fn point_at(&self, s: f64) -> Point2 {
        let s = s.clamp(0.0, self.length());
        let k = self.segment_at(s);
        let seg = self.cum[k + 1] - self.cum[k];
        let t = if seg > 0.0 { (s - self.cum[k]) / seg } else { 0.0 };
        self.points[k].lerp(self.points[k + 1], t)
    }

    /// Heading of the route tangent at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let k = self.segment_at(s.clamp(0.0, self.length()));
        let d = self.points[k + 1].sub(self.points[k]);
        (-d.x).atan2(d.y)
    }

    /// Edge (as an id) under arc length `s`.
    pub fn edge_at(&self, s: f64) -> EdgeId {
        let k = self.segment_at(s.clamp(0.0, self.length()));
        self.edges[self.seg_edge[k]]
    }

    /// Route index of the edge under arc length `s`.
    pub fn edge_index_at(&self, s: f64) -> usize {
        self.seg_edge[self.segment_at(s.clamp(0.0, self.length()))]
    }

    /// Arc length at which route edge `index` begins.
    pub fn edge_start(&self, index: usize) -> f64 {
        let k = self.seg_edge.partition_point(|&e| e < index);
        self.cum[k.min(self.cum.len() - 1)]
    }

    /// Closest point over the whole route: (distance, arc length). Ties keep the earliest.
    pub fn project(&self, p: Point2) -> (f64, f64) {
        self.project_range(p, 0.0, f64::INFINITY)
    }

    /// Closest point among segments overlapping `[lo, hi]` in arc length.
    pub fn project_range(&self, p: Point2, lo: f64, hi: f64) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..self.points.len() - 1 {
            if self.cum[k + 1] < lo || self.cum[k] > hi {
                continue;
            }
            let (d, t) = point_segment_distance(p, self.points[k], self.points[k + 1]);
            if d < best.0 {
                best = (d, self.cum[k] + t * (self.cum[k + 1] - self.cum[k]));
            }
        }
        best
    }

    /// Signed lateral offset of `p` at the given arc length (positive = left of travel).
    pub fn lateral_offset(&self, p: Point2, s: f64) -> f64 {
        let h = self.heading_at(s);
        let left = Point2::new(-h.cos(), -h.sin());
        p.sub(self.point_at(s)).dot(left)
    }
}

/// Pure-pursuit curvature toward the point `lookahead` meters further along the route.
///
/// `κ = 2·sin(η)/L_d`, η the bearing of the lookahead point from the heading,
/// clamped to ±`kappa_max`.
pub fn pursuit_curvature(
    path: &RoutePath,
    pose: &Pose,
    progress: f64,
    lookahead: f64,
    kappa_max: f64,
) -> f64 {
    let target = path.point_at(progress + lookahead);
    let d = target.sub(pose.position());
    let eta = d.dot(pose.left()).atan2(d.dot(pose.forward()));
    clamp_curvature(2.0 * eta.sin() / lookahead, kappa_max)
}

/// Maximum distance from the route at which the oracle still drives.
pub const ROUTE_CORRIDOR: f64 = 10.0;

/// The "human" driver: pure pursuit on the route from the pose's closest point.
pub fn oracle_steering(
    graph: &RoadGraph,
    route: &[EdgeId],
    true_pose: &Pose,
    lookahead: f64,
) -> Result<f64, SimError> {
    let path = RoutePath::new(graph, route)?;
    let (d, s) = path.project(true_pose.position());
    if d > ROUTE_CORRIDOR {
        return Err(SimError::OffRoute {
            distance: d,
            limit: ROUTE_CORRIDOR,
        });
    }
    Ok(pursuit_curvature(&path, true_pose, s, lookahead, KAPPA_MAX))
}

/// Unicycle step with midpoint heading: the yaw rate is `curvature·v`.
pub fn step_dynamics(pose: &Pose, curvature: f64, v: f64, dt: f64) -> Pose {
    let dh = curvature * v * dt;
    let mid = Pose {
        heading: pose.heading + dh / 2.0,
        ..*pose
    };
    let f = mid.forward();
    Pose::new(
        pose.x + v * dt * f.x,
        pose.y + v * dt * f.y,
        pose.heading + dh,
    )
}

/// Adds independent Gaussian noise to position and wrapped Gaussian noise to heading.
pub fn corrupt_gps<R: Rng + ?Sized>(pose: &Pose, sigma_xy: f64, sigma_heading: f64, rng: &mut R) -> Pose {
    let dx = gaussian(rng, sigma_xy);
    let dy = gaussian(rng, sigma_xy);
    let dh = gaussian(rng, sigma_heading);
    Pose::new(pose.x + dx, pose.y + dy, wrap_angle(pose.heading + dh))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpsNoise {
    pub sigma_xy: f64,
    pub sigma_heading: f64,
}

impl Default for GpsNoise {
    fn default() -> Self {
        GpsNoise {
            sigma_xy: 2.0,
            sigma_heading: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Constant speed, m/s.
    pub speed: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Pure-pursuit lookahead, m.
    pub lookahead: f64,
    pub kappa_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            speed: 5.0,
            dt: 0.1,
            lookahead: 8.0,
            kappa_max: KAPPA_MAX,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.speed > 0.0) || !(self.dt > 0.0) || !(self.lookahead > 0.0) || !(self.kappa_max > 0.0) {
            return Err(SimError::Invalid(
                "speed, dt, lookahead and kappa_max must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One row of a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub gx: f64,
    pub gy: f64,
    pub galpha: f64,
    pub gamma: f64,
    pub v: f64,
    pub theta_s: f64,
}

impl TraceSample {
    pub fn true_pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.alpha)
    }

    pub fn gps_pose(&self) -> Pose {
        Pose::new(self.gx, self.gy, self.galpha)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub samples: Vec<TraceSample>,
}

impl Trace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        if self.samples.is_empty() {
            wr.write_record(["t", "x", "y", "alpha", "gx", "gy", "galpha", "gamma", "v", "theta_s"])?;
        }
        for s in &self.samples {
            wr.serialize(s)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Trace, SimError> {
        let mut rd = csv::Reader::from_reader(r);
        let samples = rd.deserialize().collect::<Result<Vec<TraceSample>, _>>()?;
        Ok(Trace { samples })
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory CSV");
        String::from_utf8(buf).expect("utf-8 CSV")
    }
}

/// Closed-loop drive along `route` with the pure-pursuit oracle.
///
/// Records one sample per step until the vehicle reaches the end of the
/// route. Departing the 10 m corridor is an error.
pub fn simulate_route<R: Rng + ?Sized>(
    graph: &RoadGraph,
    route: &[EdgeId],
    cfg: &SimConfig,
    gps: &GpsNoise,
    rng: &mut R,
) -> Result<Trace, SimError> {
    cfg.validate()?;
    let path = RoutePath::new(graph, route)?;
    let mut driver = Tracker::new(&path, cfg);
    let mut pose = Pose::new(path.start().x, path.start().y, path.heading_at(0.0));
    let mut samples = Vec::new();
    let mut t = 0.0;
    let max_steps = (4.0 * path.length() / (cfg.speed * cfg.dt)) as usize + 100;
    for step in 0..max_steps {
        let (d, s) = driver.update(&pose);
        if d > ROUTE_CORRIDOR {
            return Err(SimError::Diverged { t, distance: d });
        }
        if s >= path.length() - 1e-6 {
            return Ok(Trace { samples });
        }
        let kappa = pursuit_curvature(&path, &pose, s, cfg.lookahead, cfg.kappa_max);
        let noisy = corrupt_gps(&pose, gps.sigma_xy, gps.sigma_heading, rng);
        samples.push(TraceSample {
            t,
            x: pose.x,
            y: pose.y,
            alpha: pose.heading,
            gx: noisy.x,
            gy: noisy.y,
            galpha: noisy.heading,
            gamma: kappa * cfg.speed,
            v: cfg.speed,
            theta_s: kappa,
        });
        pose = step_dynamics(&pose, kappa, cfg.speed, cfg.dt);
        t = (step + 1) as f64 * cfg.dt;
    }
    let (d, _) = driver.update(&pose);
    Err(SimError::Diverged { t, distance: d })
}

/// Monotone progress tracking along a route.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    path: &'a RoutePath,
    progress: f64,
    window: f64,
}

impl<'a> Tracker<'a> {
    pub fn new(path: &'a RoutePath, cfg: &SimConfig) -> Self {
        Tracker {
            path,
            progress: 0.0,
            window: cfg.speed * cfg.dt * 4.0 + cfg.lookahead,
        }
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Projects `pose` near the current progress; returns (distance, progress).
    pub fn update(&mut self, pose: &Pose) -> (f64, f64) {
        let (d, s) = self.path.project_range(
            pose.position(),
            self.progress - 1.0,
            self.progress + self.window,
        );
        self.progress = self.progress.max(s);
        (d, self.progress)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::graph::NodeId;
    use crate::seeded_rng;
    use crate::world::{build_world, WorldKind, WorldSpec};
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn line_graph(len: f64) -> RoadGraph {
        let mut g = RoadGraph::new(GeoPoint::new(0.0, 0.0).unwrap());
        g.add_node(NodeId(0), Point2::new(0.0, 0.0));
        g.add_node(NodeId(1), Point2::new(0.0, len));
        g.add_straight_edge(NodeId(0), NodeId(1)).unwrap();
        g
    }

    fn circle_graph(radius: f64, steps: usize) -> (RoadGraph, Vec<EdgeId>) {
        // two half-circle edges, counter-clockwise
        let mut g = RoadGraph::new(GeoPoint::new(0.0, 0.0).unwrap());
        g.add_node(NodeId(0), Point2::new(radius, 0.0));
        g.add_node(NodeId(1), Point2::new(-radius, 0.0));
        let arc = |a0: f64| -> Vec<Point2> {
            (0..=steps)
                .map(|k| {
                    let a = a0 + PI * k as f64 / steps as f64;
                    Point2::new(radius * a.cos(), radius * a.sin())
                })
                .collect()
        };
        let a = g.add_edge(NodeId(0), NodeId(1), arc(0.0)).unwrap();
        let b = g.add_edge(NodeId(1), NodeId(0), arc(PI)).unwrap();
        (g, vec![a, b, a, b])
    }

    #[test]
    fn zero_noise_observation_equals_map_render() {
        let g = build_world(&WorldSpec::new(WorldKind::FourWay, 120.0, 60.0, 3)).unwrap();
        let pose = Pose::new(1.0, -6.0, 0.4);
        let spec = PatchSpec::default();
        let obs = synthesize_observation(&g, &pose, &spec, &ObservationNoise::NONE, &mut seeded_rng(1))
            .unwrap();
        let map = crate::render::render_patch(&g, &pose, None, &spec).unwrap();
        assert_eq!(obs.raster, map.drivable);
        assert!(obs.raster.count_nonzero() > 0);
    }

    #[test]
    fn full_dropout_blanks_the_observation() {
        let g = line_graph(100.0);
        let noise = ObservationNoise {
            dropout: 1.0,
            ..Default::default()
        };
        let obs = synthesize_observation(&g, &Pose::new(0.0, 50.0, 0.0), &PatchSpec::default(), &noise, &mut seeded_rng(2))
            .unwrap();
        assert_eq!(obs.raster.count_nonzero(), 0);
    }

    #[test]
    fn observations_are_seed_deterministic() {
        let g = line_graph(100.0);
        let pose = Pose::new(0.3, 50.0, 0.1);
        let spec = PatchSpec::default();
        let noise = ObservationNoise::default();
        let a = synthesize_observation(&g, &pose, &spec, &noise, &mut seeded_rng(5)).unwrap();
        let b = synthesize_observation(&g, &pose, &spec, &noise, &mut seeded_rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aligned_pose_on_straight_route_steers_zero() {
        let g = line_graph(100.0);
        let k = oracle_steering(&g, &[EdgeId(0)], &Pose::new(0.0, 20.0, 0.0), 8.0).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn lookahead_at_right_angle_gives_two_over_ld() {
        // heading −π/2 points along +x; the route (along +y) is then 90° to the left
        let g = line_graph(100.0);
        let path = RoutePath::new(&g, &[EdgeId(0)]).unwrap();
        let pose = Pose::new(0.0, 0.0, -FRAC_PI_2);
        let k = pursuit_curvature(&path, &pose, 0.0, 10.0, KAPPA_MAX);
        assert!((k - 0.2).abs() < 1e-12, "{k}");
    }

    #[test]
    fn far_pose_is_off_route() {
        let g = line_graph(100.0);
        assert!(matches!(
            oracle_steering(&g, &[EdgeId(0)], &Pose::new(15.0, 50.0, 0.0), 8.0),
            Err(SimError::OffRoute { .. })
        ));
    }

    #[test]
    fn circle_following_converges_to_its_curvature() {
        let (g, route) = circle_graph(20.0, 90);
        let cfg = SimConfig::default();
        let trace = simulate_route(&g, &route, &cfg, &GpsNoise { sigma_xy: 0.0, sigma_heading: 0.0 }, &mut seeded_rng(0))
            .unwrap();
        let n = trace.samples.len();
        // second lap is steady state
        for s in &trace.samples[n / 2..n - 40] {
            assert!((s.theta_s - 1.0 / 20.0).abs() < 0.01, "{}", s.theta_s);
        }
    }

    #[test]
    fn zero_curvature_step_is_straight() {
        let p = Pose::new(1.0, 2.0, 0.3);
        let q = step_dynamics(&p, 0.0, 5.0, 0.1);
        assert_eq!(q.heading, p.heading);
        assert!((q.position().dist(p.position()) - 0.5).abs() < 1e-12);
        let dir = q.position().sub(p.position()).scale(2.0);
        assert!(dir.dist(p.forward()) < 1e-12);
    }

    #[test]
    fn yaw_rate_relation() {
        let (gamma, v, dt) = (0.1, 5.0, 0.1);
        let theta = gamma / v;
        assert!((theta - 0.02f64).abs() < 1e-15);
        let q = step_dynamics(&Pose::new(0.0, 0.0, 0.0), theta, v, dt);
        assert!((q.heading - gamma * dt).abs() < 1e-15);
    }

    #[test]
    fn constant_curvature_closes_the_circle() {
        let (theta, v) = (0.05, 5.0);
        let period = TAU / (theta * v);
        let n = 250;
        let dt = period / n as f64;
        let start = Pose::new(3.0, -1.0, 0.2);
        let mut p = start;
        for _ in 0..n {
            p = step_dynamics(&p, theta, v, dt);
        }
        assert!(p.position().dist(start.position()) < 0.1);
    }

    #[test]
    fn heading_stays_wrapped() {
        let mut p = Pose::new(0.0, 0.0, 3.1);
        for _ in 0..1000 {
            p = step_dynamics(&p, 0.2, 5.0, 0.37);
            assert!((-PI..PI).contains(&p.heading));
        }
    }

    #[test]
    fn straight_route_trace() {
        let g = line_graph(100.0);
        let trace = simulate_route(&g, &[EdgeId(0)], &SimConfig::default(), &GpsNoise::default(), &mut seeded_rng(4))
            .unwrap();
        assert_eq!(trace.samples.len(), 200);
        for s in &trace.samples {
            assert!(s.theta_s.abs() < 1e-6);
            assert!((s.gamma / s.v - s.theta_s).abs() < 1e-9);
        }
        assert!(trace.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn traces_are_deterministic_and_csv_round_trips() {
        let g = build_world(&WorldSpec::new(WorldKind::Grid, 100.0, 50.0, 0)).unwrap();
        let route = g.shortest_route(NodeId(0), NodeId(8)).unwrap();
        let run = |seed| {
            simulate_route(&g, &route, &SimConfig::default(), &GpsNoise::default(), &mut seeded_rng(seed))
                .unwrap()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        let csv = a.to_csv_string();
        assert!(csv.starts_with("t,x,y,alpha,gx,gy,galpha,gamma,v,theta_s\n"));
        let back = Trace::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_csv_string(), csv);
    }

    #[test]
    fn zero_sigma_gps_is_identity() {
        let p = Pose::new(4.0, 5.0, -1.0);
        assert_eq!(corrupt_gps(&p, 0.0, 0.0, &mut seeded_rng(0)), p);
    }

    #[test]
    fn gps_noise_statistics() {
        let mut rng = seeded_rng(77);
        let p = Pose::new(0.0, 0.0, 0.0);
        let n = 10_000;
        let samples: Vec<Pose> = (0..n).map(|_| corrupt_gps(&p, 2.0, 0.8, &mut rng)).collect();
        let var_x = samples.iter().map(|q| q.x * q.x).sum::<f64>() / n as f64;
        let var_y = samples.iter().map(|q| q.y * q.y).sum::<f64>() / n as f64;
        assert!((var_x.sqrt() - 2.0).abs() < 0.05, "{}", var_x.sqrt());
        assert!((var_y.sqrt() - 2.0).abs() < 0.05, "{}", var_y.sqrt());
        // circular std: sqrt(−2 ln R)
        let (s, c) = samples
            .iter()
            .fold((0.0, 0.0), |(s, c), q| (s + q.heading.sin(), c + q.heading.cos()));
        let r = (s * s + c * c).sqrt() / n as f64;
        let circ_std = (-2.0 * r.ln()).sqrt();
        assert!((circ_std - 0.8).abs() < 0.03, "{circ_std}");
    }

    #[test]
    fn closed_loop_completes_on_generated_worlds() {
        let mut runs = 0;
        for seed in 0..50u64 {
            let kind = WorldKind::ALL[(seed % 6) as usize];
            let g = build_world(&WorldSpec::new(kind, 160.0, 40.0, seed)).unwrap();
            let ids: Vec<NodeId> = g.nodes().keys().copied().collect();
            let (a, b) = (ids[seed as usize % ids.len()], ids[(seed as usize * 7 + 3) % ids.len()]);
            let route = match g.shortest_route(a, b) {
                Ok(r) if !r.is_empty() => r,
                _ => continue,
            };
            let path = RoutePath::new(&g, &route).unwrap();
            let trace = simulate_route(&g, &route, &SimConfig::default(), &GpsNoise::default(), &mut seeded_rng(seed))
                .unwrap_or_else(|e| panic!("{kind} seed {seed}: {e}"));
            let last = trace.samples.last().unwrap();
            let (_, s) = path.project(last.true_pose().position());
            assert!(s >= 0.99 * path.length() - 1.0);
            runs += 1;
        }
        assert!(runs >= 40);
    }
}
