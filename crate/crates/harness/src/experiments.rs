//! Experiment runners. Each returns typed metrics alongside the artifact
//! set it would write, so callers can both inspect and persist results.

use std::fs::File;
use std::io::BufReader;

use rand::Rng;
use serde::Serialize;

use topo_nav_core::belief::{
    belief_stats, coverage_fraction, interval_coverage, make_prior, place_recognition, posterior_update,
    BeliefStats, UpdateMode, CALIBRATION_PHI_MIN,
};
use topo_nav_core::graph::RoadGraph;
use topo_nav_core::matching::{match_trace, route_edges, MatchResult};
use topo_nav_core::mdn::{train, EpochRecord, GmmParams, ModelParams};
use topo_nav_core::render::{render_patch, Pose};
use topo_nav_core::sim::{
    clamp_curvature, pursuit_curvature, simulate_route, step_dynamics, synthesize_observation, GpsNoise, Observation,
    RoutePath, Tracker, ROUTE_CORRIDOR,
};
use topo_nav_core::world::{build_world, random_route, random_walk, WorldKind, WorldSpec};
use topo_nav_core::{seeded_rng, BeliefError, EdgeId, MapPatch};

use crate::config::{ExperimentConfig, ExperimentKind, SimSettings};
use crate::curriculum::{self, junctions, CurriculumConfig, Drive};
use crate::error::HarnessError;
use crate::locations::{confusion_locations, four_way_approaches, mid_block_poses, LOCATION_NAMES};
use crate::output::Artifacts;
use crate::report::{bar_chart, heatmap, line_chart, Series};

/// Independent random streams derived from the run seed, one per purpose,
/// so changing one stage's consumption never shifts another's draws.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Curriculum = 1,
    Init,
    Shuffle,
    HeldOut,
    Resample,
    Localization,
    Confusion,
    Matching,
    Drive,
    Simulate,
    Multimodality,
}

fn stream(seed: u64, s: Stream) -> topo_nav_core::Rng {
    seeded_rng(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn eval_world(cfg: &ExperimentConfig) -> Result<RoadGraph, HarnessError> {
    Ok(build_world(&cfg.world.spec())?)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

// ---------------------------------------------------------------- model

/// Trains a model from the configured curriculum.
pub fn train_model(cfg: &ExperimentConfig) -> Result<(ModelParams, Vec<EpochRecord>), HarnessError> {
    let data = curriculum::generate(
        &cfg.train.curriculum,
        &cfg.sim.dynamics,
        &cfg.sim.patch,
        &cfg.sim.observation,
        &mut stream(cfg.seed, Stream::Curriculum),
    )?;
    let init = ModelParams::init(
        cfg.model.hyper,
        cfg.model.architecture,
        &mut stream(cfg.seed, Stream::Init),
    )?;
    Ok(train(&init, &data, &cfg.train.optimizer, &mut stream(cfg.seed, Stream::Shuffle))?)
}

/// Loads the configured checkpoint, or trains a fresh model when none is set.
pub fn obtain_model(cfg: &ExperimentConfig) -> Result<ModelParams, HarnessError> {
    let Some(path) = &cfg.model.checkpoint else {
        return Ok(train_model(cfg)?.0);
    };
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact(path.clone()));
    }
    let model = ModelParams::read_checkpoint(BufReader::new(File::open(path)?))?;
    if model.architecture() != &cfg.model.architecture || model.hyper() != &cfg.model.hyper {
        return Err(HarnessError::Invalid(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}

/// Runs `cfg.experiment`, training or loading a model first if `model` is absent.
pub fn run_experiment(cfg: &ExperimentConfig, model: Option<&ModelParams>) -> Result<Artifacts, HarnessError> {
    cfg.validate()?;
    if cfg.experiment == ExperimentKind::Matching {
        return Ok(matching(cfg)?.1);
    }
    let owned;
    let model = match model {
        Some(m) => m,
        None => {
            owned = obtain_model(cfg)?;
            &owned
        }
    };
    Ok(match cfg.experiment {
        ExperimentKind::Calibration => calibration(cfg, model)?.1,
        ExperimentKind::Localization => localization(cfg, model)?.1,
        ExperimentKind::Confusion => confusion(cfg, model)?.1,
        ExperimentKind::Drive => drive(cfg, model)?.1,
        ExperimentKind::Matching => unreachable!("handled above"),
    })
}

// ---------------------------------------------------------------- calibration

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub z: f64,
    /// Share of held-out targets within z of a weighted component.
    pub fraction: f64,
    /// The same share for targets drawn from the predicted mixtures.
    pub resampled_fraction: f64,
    /// Mean mass each mixture places inside its own z-intervals.
    pub oracle_coverage: f64,
    /// Coverage of ±z for a single Gaussian.
    pub gaussian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationMetrics {
    pub samples: usize,
    pub mean_log_density: f64,
    pub rows: Vec<CalibrationRow>,
}

#[derive(Debug, Serialize)]
struct CalibrationSample {
    index: usize,
    target: f64,
    log_density: f64,
    dominant_phi: f64,
    dominant_mu: f64,
    dominant_sigma: f64,
}

/// Held-out (mixture, target) pairs drawn on the evaluation world.
pub fn held_out_predictions(cfg: &ExperimentConfig, model: &ModelParams) -> Result<Vec<(GmmParams, f64)>, HarnessError> {
    let graph = eval_world(cfg)?;
    let sampling = CurriculumConfig {
        samples: cfg.calibration.samples,
        blank_rate: 0.0,
        ..cfg.train.curriculum.clone()
    };
    let data = curriculum::generate_on(
        std::slice::from_ref(&graph),
        &sampling,
        &cfg.sim.dynamics,
        &cfg.sim.patch,
        &cfg.sim.observation,
        &mut stream(cfg.seed, Stream::HeldOut),
    )?;
    data.iter()
        .map(|s| Ok((model.forward_stochastic(&s.obs, &s.map.unrouted())?, s.target)))
        .collect()
}

pub fn calibration(cfg: &ExperimentConfig, model: &ModelParams) -> Result<(CalibrationMetrics, Artifacts), HarnessError> {
    let pairs = held_out_predictions(cfg, model)?;
    let mut rng = stream(cfg.seed, Stream::Resample);
    let resampled: Vec<(GmmParams, f64)> = pairs
        .iter()
        .flat_map(|(g, _)| (0..cfg.calibration.resamples).map(|_| (g.clone(), g.sample(&mut rng))).collect::<Vec<_>>())
        .collect();
    let mut rows = Vec::with_capacity(cfg.calibration.z_grid.len());
    for &z in &cfg.calibration.z_grid {
        rows.push(CalibrationRow {
            z,
            fraction: coverage_fraction(&pairs, z)?,
            resampled_fraction: coverage_fraction(&resampled, z)?,
            oracle_coverage: mean(pairs.iter().map(|(g, _)| interval_coverage(g, z, CALIBRATION_PHI_MIN))),
            gaussian: libm::erf(z / std::f64::consts::SQRT_2),
        });
    }
    let per_sample: Vec<CalibrationSample> = pairs
        .iter()
        .enumerate()
        .map(|(index, (g, t))| {
            let d = &g.components[g.dominant()];
            CalibrationSample {
                index,
                target: *t,
                log_density: g.log_density(*t),
                dominant_phi: d.phi,
                dominant_mu: d.mu,
                dominant_sigma: d.sigma,
            }
        })
        .collect();
    let metrics = CalibrationMetrics {
        samples: pairs.len(),
        mean_log_density: mean(per_sample.iter().map(|s| s.log_density)),
        rows,
    };

    let pick = |f: fn(&CalibrationRow) -> f64| metrics.rows.iter().map(|r| (r.z, f(r))).collect::<Vec<_>>();
    let svg = line_chart(
        "Calibration",
        "z",
        "fraction within z",
        &[
            Series::new("held-out", pick(|r| r.fraction)),
            Series::new("resampled", pick(|r| r.resampled_fraction)),
            Series::new("oracle", pick(|r| r.oracle_coverage)),
        ],
        Some(&Series::new("gaussian", pick(|r| r.gaussian))),
    )?;
    let mut out = Artifacts::new();
    out.add_csv("calibration.csv", &metrics.rows)?;
    out.add_csv("samples.csv", &per_sample)?;
    out.add_json("metrics.json", &metrics)?;
    out.add_text("calibration.svg", svg);
    Ok((metrics, out))
}

// ---------------------------------------------------------------- localization

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reduction {
    pub spatial_variance: f64,
    pub angular_variance: f64,
    pub total_variance: f64,
    pub entropy: f64,
}

impl Reduction {
    fn between(prior: &BeliefStats, post: &BeliefStats) -> Self {
        Reduction {
            spatial_variance: prior.spatial_variance - post.spatial_variance,
            angular_variance: prior.angular_variance - post.angular_variance,
            total_variance: prior.total_variance - post.total_variance,
            entropy: prior.entropy - post.entropy,
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.spatial_variance, self.angular_variance, self.total_variance, self.entropy]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub sigma_xy: f64,
    pub sigma_heading: f64,
    pub samples: usize,
    /// Updates that underflowed and fell back to the prior.
    pub degenerate: usize,
    pub mean_reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationMetrics {
    pub mode: String,
    pub levels: Vec<LevelSummary>,
}

#[derive(Debug, Serialize)]
struct LocalizationRow {
    sample: usize,
    sigma_xy: f64,
    sigma_heading: f64,
    theta: f64,
    degenerate: bool,
    prior_spatial: f64,
    prior_angular: f64,
    prior_entropy: f64,
    post_spatial: f64,
    post_angular: f64,
    post_entropy: f64,
}

/// A pose near a junction with the steering a route-following driver executes there.
#[derive(Debug, Clone)]
pub struct TestPose {
    pub pose: Pose,
    pub steering: f64,
}

/// Centerline poses within `radius` of a junction, one per random walk.
pub fn junction_poses<R: Rng + ?Sized>(
    graph: &RoadGraph,
    n: usize,
    radius: f64,
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<Vec<TestPose>, HarnessError> {
    let junc = junctions(graph);
    let sim = &cfg.sim.dynamics;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 100 {
            return Err(HarnessError::Invalid("the evaluation world has no reachable junctions".into()));
        }
        let Some(route) = random_walk(graph, 3.0 * cfg.world.block_size, rng) else {
            continue;
        };
        let drive = Drive::new(graph, route)?;
        let near: Vec<(Pose, f64)> = drive
            .centerline(sim.speed * sim.dt)
            .into_iter()
            .filter(|(p, _)| junc.iter().any(|j| j.dist(p.position()) < radius))
            .collect();
        if near.is_empty() {
            continue;
        }
        let (pose, s) = near[rng.random_range(0..near.len())];
        let steering = pursuit_curvature(&drive.path, &pose, s, sim.lookahead, sim.kappa_max);
        out.push(TestPose { pose, steering });
    }
    Ok(out)
}

pub fn localization(
    cfg: &ExperimentConfig,
    model: &ModelParams,
) -> Result<(LocalizationMetrics, Artifacts), HarnessError> {
    let loc = &cfg.localization;
    let graph = eval_world(cfg)?;
    let mut rng = stream(cfg.seed, Stream::Localization);
    let tests = junction_poses(&graph, loc.samples, loc.junction_radius, cfg, &mut rng)?;
    let observations: Vec<Observation> = tests
        .iter()
        .map(|t| synthesize_observation(&graph, &t.pose, &cfg.sim.patch, &cfg.sim.observation, &mut rng))
        .collect::<Result<_, _>>()?;
    let mode_for = |theta: f64| match loc.literal {
        Some(sampling) => UpdateMode::PaperLiteral { sampling, n_s: loc.n_s },
        None => UpdateMode::ObservedSteering {
            theta_meas: theta,
            sigma_meas: loc.sigma_meas,
            n_s: loc.n_s,
        },
    };

    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for &sxy in &loc.sigma_xy {
        for &sh in &loc.sigma_heading {
            let mut reductions = Vec::with_capacity(tests.len());
            let mut degenerate = 0;
            for (i, (t, obs)) in tests.iter().zip(&observations).enumerate() {
                let prior = make_prior(&t.pose, sxy, sh, loc.hypotheses, &mut rng)?;
                let mode = mode_for(t.steering);
                let (post, fell_back) =
                    match posterior_update(&prior, obs, &graph, model, &cfg.sim.patch, &mode, &mut rng) {
                        Ok(p) => (p, false),
                        Err(BeliefError::DegenerateUpdate { prior }) => (prior, true),
                        Err(e) => return Err(e.into()),
                    };
                degenerate += usize::from(fell_back);
                let (a, b) = (belief_stats(&prior), belief_stats(&post));
                reductions.push(Reduction::between(&a, &b));
                rows.push(LocalizationRow {
                    sample: i,
                    sigma_xy: sxy,
                    sigma_heading: sh,
                    theta: t.steering,
                    degenerate: fell_back,
                    prior_spatial: a.spatial_variance,
                    prior_angular: a.angular_variance,
                    prior_entropy: a.entropy,
                    post_spatial: b.spatial_variance,
                    post_angular: b.angular_variance,
                    post_entropy: b.entropy,
                });
            }
            levels.push(LevelSummary {
                sigma_xy: sxy,
                sigma_heading: sh,
                samples: reductions.len(),
                degenerate,
                mean_reduction: Reduction {
                    spatial_variance: mean(reductions.iter().map(|r| r.spatial_variance)),
                    angular_variance: mean(reductions.iter().map(|r| r.angular_variance)),
                    total_variance: mean(reductions.iter().map(|r| r.total_variance)),
                    entropy: mean(reductions.iter().map(|r| r.entropy)),
                },
            });
        }
    }
    let metrics = LocalizationMetrics {
        mode: match loc.literal {
            Some(_) => "paper-literal".into(),
            None => "observed-steering".into(),
        },
        levels,
    };

    let categories: Vec<String> = metrics
        .levels
        .iter()
        .map(|l| format!("σxy={} σα={}", l.sigma_xy, l.sigma_heading))
        .collect();
    let names = ["spatial variance", "angular variance", "total variance", "entropy"];
    let series: Vec<(String, Vec<f64>)> = names
        .iter()
        .enumerate()
        .map(|(k, n)| (n.to_string(), metrics.levels.iter().map(|l| l.mean_reduction.values()[k]).collect()))
        .collect();
    let svg = bar_chart("Mean uncertainty reduction", "prior − posterior", &categories, &series)?;

    let mut out = Artifacts::new();
    out.add_csv("localization.csv", &rows)?;
    let summary: Vec<_> = metrics
        .levels
        .iter()
        .map(|l| {
            let r = l.mean_reduction;
            (l.sigma_xy, l.sigma_heading, l.degenerate, r.spatial_variance, r.angular_variance, r.total_variance, r.entropy)
        })
        .collect();
    out.add_csv("levels.csv", &summary_rows(&summary))?;
    out.add_json("metrics.json", &metrics)?;
    out.add_text("reduction.svg", svg);
    Ok((metrics, out))
}

#[derive(Debug, Serialize)]
struct LevelRow {
    sigma_xy: f64,
    sigma_heading: f64,
    degenerate: usize,
    spatial_variance: f64,
    angular_variance: f64,
    total_variance: f64,
    entropy: f64,
}

fn summary_rows(v: &[(f64, f64, usize, f64, f64, f64, f64)]) -> Vec<LevelRow> {
    v.iter()
        .map(|&(sigma_xy, sigma_heading, degenerate, s, a, t, e)| LevelRow {
            sigma_xy,
            sigma_heading,
            degenerate,
            spatial_variance: s,
            angular_variance: a,
            total_variance: t,
            entropy: e,
        })
        .collect()
}

// ---------------------------------------------------------------- confusion

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub locations: Vec<String>,
    /// Row-argmax column for every trial.
    pub argmax: Vec<Vec<usize>>,
    pub diagonal_hits: Vec<usize>,
    /// Row-normalized scores averaged over trials.
    pub mean_normalized: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct ConfusionRow {
    trial: usize,
    observation: &'static str,
    map: &'static str,
    log_score: f64,
    normalized: f64,
}

pub fn confusion(cfg: &ExperimentConfig, model: &ModelParams) -> Result<(ConfusionMetrics, Artifacts), HarnessError> {
    let mut rng = stream(cfg.seed, Stream::Confusion);
    let n = LOCATION_NAMES.len();
    let mut sum = vec![vec![0.0; n]; n];
    let mut argmax = Vec::new();
    let mut hits = Vec::new();
    let mut rows = Vec::new();
    for trial in 0..cfg.confusion.trials {
        let locs = confusion_locations(&cfg.sim.dynamics, &mut rng)?;
        let evidence = locs
            .iter()
            .map(|l| {
                let obs = synthesize_observation(&l.graph, &l.pose, &cfg.sim.patch, &cfg.sim.observation, &mut rng)?;
                Ok((obs, l.steering))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let patches = locs
            .iter()
            .map(|l| render_patch(&l.graph, &l.pose, None, &cfg.sim.patch))
            .collect::<Result<Vec<MapPatch>, _>>()?;
        let scores = place_recognition(model, &evidence, &patches)?;
        for i in 0..n {
            for j in 0..n {
                sum[i][j] += scores.normalized[i][j];
                rows.push(ConfusionRow {
                    trial,
                    observation: LOCATION_NAMES[i],
                    map: LOCATION_NAMES[j],
                    log_score: scores.log[i][j],
                    normalized: scores.normalized[i][j],
                });
            }
        }
        hits.push(scores.diagonal_hits());
        argmax.push(scores.row_argmax());
    }
    let trials = cfg.confusion.trials as f64;
    let metrics = ConfusionMetrics {
        locations: LOCATION_NAMES.iter().map(|s| s.to_string()).collect(),
        argmax,
        diagonal_hits: hits,
        mean_normalized: sum.iter().map(|r| r.iter().map(|v| v / trials).collect()).collect(),
    };
    let svg = heatmap(
        "Place recognition",
        &metrics.locations,
        &metrics.locations,
        &metrics.mean_normalized,
    )?;
    let mut out = Artifacts::new();
    out.add_csv("confusion.csv", &rows)?;
    out.add_json("metrics.json", &metrics)?;
    out.add_text("confusion.svg", svg);
    Ok((metrics, out))
}

// ---------------------------------------------------------------- matching

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchingMetrics {
    pub gps_sigma: f64,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct MatchedRoute {
    route: usize,
    true_route: Vec<EdgeId>,
    matched_route: Option<Vec<EdgeId>>,
    matched_route_error: Option<String>,
    result: MatchResult,
}

#[derive(Debug, Serialize)]
struct AccuracyRow {
    route: usize,
    samples: usize,
    correct: usize,
    accuracy: f64,
}

/// Edge under the vehicle at every trace sample of a noise-free replay.
fn true_edges(graph: &RoadGraph, route: &[EdgeId], poses: &[Pose], cfg: &ExperimentConfig) -> Result<Vec<EdgeId>, HarnessError> {
    let path = RoutePath::new(graph, route)?;
    let mut tracker = Tracker::new(&path, &cfg.sim.dynamics);
    Ok(poses.iter().map(|p| path.edge_at(tracker.update(p).1)).collect())
}

pub fn matching(cfg: &ExperimentConfig) -> Result<(MatchingMetrics, Artifacts), HarnessError> {
    cfg.validate()?;
    let m = &cfg.matching;
    let graph = eval_world(cfg)?;
    let mut rng = stream(cfg.seed, Stream::Matching);
    let gps = GpsNoise {
        sigma_xy: m.gps_sigma,
        sigma_heading: cfg.sim.gps.sigma_heading,
    };
    let mut dumps = Vec::new();
    let mut rows = Vec::new();
    for r in 0..m.routes {
        let route = random_route(&graph, m.min_length, &mut rng).ok_or_else(|| {
            HarnessError::Invalid(format!("no route of at least {} m on the evaluation world", m.min_length))
        })?;
        let trace = simulate_route(&graph, &route, &cfg.sim.dynamics, &gps, &mut rng)?;
        let poses: Vec<Pose> = trace.samples.iter().map(|s| s.true_pose()).collect();
        let truth = true_edges(&graph, &route, &poses, cfg)?;
        let fixes: Vec<_> = trace.samples.iter().map(|s| s.gps_pose().position()).collect();
        let result = match_trace(&graph, &fixes, &m.matcher)?;
        let correct = result.edges.iter().zip(&truth).filter(|(a, b)| a == b).count();
        rows.push(AccuracyRow {
            route: r,
            samples: truth.len(),
            correct,
            accuracy: correct as f64 / truth.len().max(1) as f64,
        });
        let (matched_route, matched_route_error) = match route_edges(&graph, &result.edges) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        dumps.push(MatchedRoute {
            route: r,
            true_route: route,
            matched_route,
            matched_route_error,
            result,
        });
    }
    let accuracy: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let metrics = MatchingMetrics {
        gps_sigma: m.gps_sigma,
        mean_accuracy: mean(accuracy.iter().copied()),
        min_accuracy: accuracy.iter().copied().fold(f64::INFINITY, f64::min),
        accuracy,
    };
    let svg = bar_chart(
        "Map-matching accuracy",
        "share of samples on the true edge",
        &(0..m.routes).map(|r| format!("route {r}")).collect::<Vec<_>>(),
        &[("accuracy".to_string(), metrics.accuracy.clone())],
    )?;
    let mut out = Artifacts::new();
    out.add_json("matched.json", &dumps)?;
    out.add_csv("accuracy.csv", &rows)?;
    out.add_json("metrics.json", &metrics)?;
    out.add_text("accuracy.svg", svg);
    Ok((metrics, out))
}

// ---------------------------------------------------------------- drive

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteOutcome {
    pub route: usize,
    pub length: f64,
    pub completed: bool,
    pub max_lateral_deviation: f64,
    pub junctions: usize,
    pub correct_branches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriveMetrics {
    /// True when every route was driven to its end.
    pub route_completion: bool,
    /// Largest distance from the route over all routes, m.
    pub max_lateral_deviation: f64,
    pub branch_accuracy: f64,
    pub routes: Vec<RouteOutcome>,
}

#[derive(Debug, Serialize)]
struct DriveStep {
    route: usize,
    step: usize,
    x: f64,
    y: f64,
    heading: f64,
    progress: f64,
    deviation: f64,
    steering: f64,
}

/// Arc positions where the route leaves a junction.
fn junction_passages(graph: &RoadGraph, route: &[EdgeId], path: &RoutePath) -> Vec<f64> {
    (0..route.len().saturating_sub(1))
        .filter(|&i| graph.degree(graph.edge(route[i]).to) >= 3)
        .map(|i| path.edge_start(i + 1))
        .collect()
}

/// Closed-loop drive of `route` steered by the deterministic head.
///
/// The routed map is drawn at the vehicle's true pose; the run stops when
/// the route's end is reached or the vehicle leaves the route corridor.
fn drive_route<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    graph: &RoadGraph,
    route: Vec<EdgeId>,
    model: &ModelParams,
    index: usize,
    steps: &mut Vec<DriveStep>,
    rng: &mut R,
) -> Result<RouteOutcome, HarnessError> {
    let sim = &cfg.sim.dynamics;
    let drive = Drive::new(graph, route)?;
    let length = drive.path.length();
    let passages = junction_passages(graph, &drive.route, &drive.path);
    let mut tracker = Tracker::new(&drive.path, sim);
    let mut pose = Pose::new(drive.path.start().x, drive.path.start().y, drive.path.heading_at(0.0));
    let max_steps = (4.0 * length / (sim.speed * sim.dt)) as usize + 100;
    let mut trail: Vec<(f64, f64)> = Vec::new();
    let mut completed = false;
    for step in 0..max_steps {
        let (d, s) = tracker.update(&pose);
        trail.push((s, d));
        if d > ROUTE_CORRIDOR {
            break;
        }
        if s >= length - 1e-6 {
            completed = true;
            break;
        }
        let obs = synthesize_observation(graph, &pose, &cfg.sim.patch, &cfg.sim.observation, rng)?;
        let map = drive.map_at(&pose, s, &cfg.sim.patch)?;
        let kappa = clamp_curvature(model.forward_deterministic(&obs, &map)?, sim.kappa_max);
        steps.push(DriveStep {
            route: index,
            step,
            x: pose.x,
            y: pose.y,
            heading: pose.heading,
            progress: s,
            deviation: d,
            steering: kappa,
        });
        pose = step_dynamics(&pose, kappa, sim.speed, sim.dt);
    }
    let reached = trail.last().map_or(0.0, |t| t.0);
    let correct = passages
        .iter()
        .filter(|&&s0| {
            let s1 = (s0 + cfg.drive.branch_window).min(length - 1e-6);
            reached >= s1
                && trail
                    .iter()
                    .filter(|(s, _)| (s0..=s1).contains(s))
                    .all(|(_, d)| *d <= cfg.drive.branch_tolerance)
        })
        .count();
    Ok(RouteOutcome {
        route: index,
        length,
        completed,
        max_lateral_deviation: trail.iter().map(|t| t.1).fold(0.0, f64::max),
        junctions: passages.len(),
        correct_branches: correct,
    })
}

/// A random route through at least `min_junctions` junctions.
pub fn junction_route<R: Rng + ?Sized>(
    graph: &RoadGraph,
    min_length: f64,
    min_junctions: usize,
    rng: &mut R,
) -> Result<Vec<EdgeId>, HarnessError> {
    for _ in 0..2000 {
        let Some(route) = random_route(graph, min_length, rng) else {
            break;
        };
        let passes = route[..route.len() - 1]
            .iter()
            .filter(|&&e| graph.degree(graph.edge(e).to) >= 3)
            .count();
        if passes >= min_junctions {
            return Ok(route);
        }
    }
    Err(HarnessError::Invalid(format!(
        "no route of at least {min_length} m through {min_junctions} junctions on the evaluation world"
    )))
}

pub fn drive(cfg: &ExperimentConfig, model: &ModelParams) -> Result<(DriveMetrics, Artifacts), HarnessError> {
    let d = &cfg.drive;
    let graph = eval_world(cfg)?;
    let mut rng = stream(cfg.seed, Stream::Drive);
    let mut steps = Vec::new();
    let mut routes = Vec::with_capacity(d.routes);
    for r in 0..d.routes {
        let route = junction_route(&graph, d.min_length, d.min_junctions, &mut rng)?;
        routes.push(drive_route(cfg, &graph, route, model, r, &mut steps, &mut rng)?);
    }
    let total: usize = routes.iter().map(|r| r.junctions).sum();
    let correct: usize = routes.iter().map(|r| r.correct_branches).sum();
    let metrics = DriveMetrics {
        route_completion: routes.iter().all(|r| r.completed),
        max_lateral_deviation: routes.iter().map(|r| r.max_lateral_deviation).fold(0.0, f64::max),
        branch_accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        routes,
    };
    let series: Vec<Series> = (0..d.routes)
        .map(|r| {
            let pts = steps
                .iter()
                .filter(|s| s.route == r)
                .step_by(20)
                .map(|s| (s.progress, s.deviation))
                .collect();
            Series::new(format!("route {r}"), pts)
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    let mut out = Artifacts::new();
    if !series.is_empty() {
        out.add_text(
            "deviation.svg",
            line_chart("Lateral deviation", "progress (m)", "deviation (m)", &series, None)?,
        );
    }
    out.add_csv("trajectory.csv", &steps)?;
    out.add_csv("routes.csv", &metrics.routes)?;
    out.add_json("metrics.json", &metrics)?;
    Ok((metrics, out))
}

// ---------------------------------------------------------------- utilities

#[derive(Debug, Serialize)]
struct WorldSummary {
    kind: WorldKind,
    nodes: usize,
    edges: usize,
    junctions: usize,
    total_length: f64,
}

/// The evaluation world as JSON lines plus a summary.
pub fn world(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    cfg.validate()?;
    let graph = eval_world(cfg)?;
    let mut out = Artifacts::new();
    out.add_text("world.jsonl", graph.to_jsonl_string());
    out.add_json(
        "world.json",
        &WorldSummary {
            kind: cfg.world.kind,
            nodes: graph.nodes().len(),
            edges: graph.edges().len(),
            junctions: junctions(&graph).len(),
            total_length: graph.edges().iter().map(|e| e.planar_length()).sum(),
        },
    )?;
    Ok(out)
}

/// One oracle drive with GPS noise along a random route of the evaluation world.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    cfg.validate()?;
    let graph = eval_world(cfg)?;
    let mut rng = stream(cfg.seed, Stream::Simulate);
    let route = random_route(&graph, cfg.matching.min_length, &mut rng).ok_or_else(|| {
        HarnessError::Invalid(format!(
            "no route of at least {} m on the evaluation world",
            cfg.matching.min_length
        ))
    })?;
    let trace = simulate_route(&graph, &route, &cfg.sim.dynamics, &cfg.sim.gps, &mut rng)?;
    let mut out = Artifacts::new();
    out.add_text("trace.csv", trace.to_csv_string());
    out.add_json("route.json", &route)?;
    Ok(out)
}

/// Trains a model and reports its history and mixture shapes.
pub fn train_artifacts(cfg: &ExperimentConfig) -> Result<(ModelParams, Artifacts), HarnessError> {
    cfg.validate()?;
    let (model, history) = train_model(cfg)?;
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes)?;
    let mut out = Artifacts::new();
    out.add("model.json", bytes);
    out.add_csv("history.csv", &history)?;
    let shape = multimodality(&model, &cfg.sim, 20, &mut stream(cfg.seed, Stream::Multimodality))?;
    out.add_json("multimodality.json", &shape)?;
    Ok((model, out))
}

// ---------------------------------------------------------------- mixture shape

/// Weight a component needs to count as a mode.
pub const MODE_PHI: f64 = 0.2;
/// Weight the leading component needs to count as dominant.
pub const DOMINANT_PHI: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultimodalityReport {
    /// Four-way approach inputs evaluated.
    pub approaches: usize,
    /// Approaches with at least two components of weight ≥ [`MODE_PHI`].
    pub multimodal: usize,
    /// Mid-block inputs on long straight streets.
    pub straights: usize,
    /// Straight inputs whose leading weight is ≥ [`DOMINANT_PHI`].
    pub dominant: usize,
}

impl MultimodalityReport {
    pub fn multimodal_rate(&self) -> f64 {
        self.multimodal as f64 / self.approaches.max(1) as f64
    }

    pub fn dominant_rate(&self) -> f64 {
        self.dominant as f64 / self.straights.max(1) as f64
    }
}

/// Mixture shapes on fresh worlds: four-way approaches 2–6 m before the
/// center, and the middle of 100 m grid blocks.
pub fn multimodality<R: Rng + ?Sized>(
    model: &ModelParams,
    sim: &SimSettings,
    worlds: usize,
    rng: &mut R,
) -> Result<MultimodalityReport, HarnessError> {
    let predict = |g: &RoadGraph, pose: &Pose, rng: &mut R| -> Result<GmmParams, HarnessError> {
        let obs = synthesize_observation(g, pose, &sim.patch, &sim.observation, rng)?;
        let map = render_patch(g, pose, None, &sim.patch)?;
        Ok(model.forward_stochastic(&obs, &map)?)
    };
    let mut r = MultimodalityReport {
        approaches: 0,
        multimodal: 0,
        straights: 0,
        dominant: 0,
    };
    for _ in 0..worlds {
        let g = build_world(&WorldSpec::new(WorldKind::FourWay, 120.0, 60.0, rng.random()))?;
        let distance = rng.random_range(2.0..6.0);
        for pose in four_way_approaches(&g, distance) {
            let gm = predict(&g, &pose, rng)?;
            r.approaches += 1;
            r.multimodal += usize::from(gm.components.iter().filter(|c| c.phi >= MODE_PHI).count() >= 2);
        }
        let g = build_world(&WorldSpec::new(WorldKind::Grid, 200.0, 100.0, rng.random()))?;
        for pose in mid_block_poses(&g, 80.0) {
            let gm = predict(&g, &pose, rng)?;
            r.straights += 1;
            r.dominant += usize::from(gm.components[gm.dominant()].phi >= DOMINANT_PHI);
        }
    }
    Ok(r)
}
