//! Experiment configuration: strict JSON, every default defined here.
//!
//! Only `experiment` and `world.kind` are required. Unknown keys anywhere are
//! errors. Validation reports every violated field, not just the first.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use topo_nav_core::belief::SteeringSampler;
use topo_nav_core::matching::MatchConfig;
use topo_nav_core::mdn::{Architecture, Hyper, TrainConfig};
use topo_nav_core::render::PatchSpec;
use topo_nav_core::sim::{GpsNoise, ObservationNoise, SimConfig};
use topo_nav_core::world::{WorldKind, WorldSpec};

use crate::curriculum::CurriculumConfig;
use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Calibration,
    Localization,
    Confusion,
    Matching,
    Drive,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Calibration,
        ExperimentKind::Localization,
        ExperimentKind::Confusion,
        ExperimentKind::Matching,
        ExperimentKind::Drive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Calibration => "calibration",
            ExperimentKind::Localization => "localization",
            ExperimentKind::Confusion => "confusion",
            ExperimentKind::Matching => "matching",
            ExperimentKind::Drive => "drive",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(vec![format!("experiment: unknown experiment {s:?}")]))
    }
}

fn default_extents() -> f64 {
    300.0
}

fn default_block() -> f64 {
    60.0
}

/// The evaluation world. Training worlds are configured in `train.curriculum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub kind: WorldKind,
    #[serde(default = "default_extents")]
    pub extents: f64,
    #[serde(default = "default_block")]
    pub block_size: f64,
    #[serde(default)]
    pub seed: u64,
}

impl WorldConfig {
    pub fn spec(&self) -> WorldSpec {
        WorldSpec::new(self.kind, self.extents, self.block_size, self.seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub dynamics: SimConfig,
    pub gps: GpsNoise,
    pub observation: ObservationNoise,
    pub patch: PatchSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hyper: Hyper,
    pub architecture: Architecture,
    /// Trained weights to evaluate. When absent the model is trained from the
    /// curriculum first; when present the file must exist.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub optimizer: TrainConfig,
    pub curriculum: CurriculumConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub z_grid: Vec<f64>,
    /// Held-out samples drawn on the evaluation world.
    pub samples: usize,
    /// Targets drawn per sample from the model's own mixture for the
    /// self-consistency check.
    pub resamples: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            z_grid: vec![0.5, 1.0, 2.0, 3.0],
            samples: 300,
            resamples: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationSettings {
    /// Prior position stds swept, m.
    pub sigma_xy: Vec<f64>,
    /// Prior heading stds swept, rad.
    pub sigma_heading: Vec<f64>,
    pub hypotheses: usize,
    /// Intersection-adjacent test poses.
    pub samples: usize,
    /// Test poses lie within this distance of a junction, m.
    pub junction_radius: f64,
    /// Noise of the executed-steering measurement, 1/m.
    pub sigma_meas: f64,
    /// Quadrature points (observed steering) or steering samples (literal mode).
    pub n_s: usize,
    /// Run the literal sampling update instead of conditioning on the executed steering.
    pub literal: Option<SteeringSampler>,
}

impl Default for LocalizationSettings {
    fn default() -> Self {
        LocalizationSettings {
            sigma_xy: vec![1.0, 2.0, 4.0],
            sigma_heading: vec![0.4, 0.8],
            hypotheses: 100,
            samples: 200,
            junction_radius: 15.0,
            sigma_meas: 0.005,
            n_s: 129,
            literal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfusionSettings {
    /// Independent trials; each redraws geometry jitter and observation noise.
    pub trials: usize,
}

impl Default for ConfusionSettings {
    fn default() -> Self {
        ConfusionSettings { trials: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingSettings {
    pub matcher: MatchConfig,
    /// GPS position noise of the matched traces, m.
    pub gps_sigma: f64,
    pub routes: usize,
    pub min_length: f64,
}

impl Default for MatchingSettings {
    fn default() -> Self {
        MatchingSettings {
            matcher: MatchConfig::default(),
            gps_sigma: 5.0,
            routes: 10,
            min_length: 400.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSettings {
    pub routes: usize,
    /// Junctions each route must pass through.
    pub min_junctions: usize,
    pub min_length: f64,
    /// After passing a junction the vehicle must stay within this distance
    /// of the route for `branch_window` meters for the branch to count as correct.
    pub branch_tolerance: f64,
    pub branch_window: f64,
}

impl Default for DriveSettings {
    fn default() -> Self {
        DriveSettings {
            routes: 10,
            min_junctions: 5,
            min_length: 250.0,
            branch_tolerance: 3.0,
            branch_window: 20.0,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub world: WorldConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub localization: LocalizationSettings,
    #[serde(default)]
    pub confusion: ConfusionSettings,
    #[serde(default)]
    pub matching: MatchingSettings,
    #[serde(default)]
    pub drive: DriveSettings,
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(errs: &mut Vec<String>, field: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errs.push(format!("{field}: must be a finite value > 0, got {v}"));
    }
}

fn non_negative(errs: &mut Vec<String>, field: &str, v: f64) {
    if !(v >= 0.0 && v.is_finite()) {
        errs.push(format!("{field}: must be a finite value >= 0, got {v}"));
    }
}

fn at_least_one(errs: &mut Vec<String>, field: &str, v: usize) {
    if v == 0 {
        errs.push(format!("{field}: must be >= 1"));
    }
}

impl ExperimentConfig {
    /// Minimal config: everything but the experiment and world kind defaulted.
    pub fn new(experiment: ExperimentKind, kind: WorldKind) -> Self {
        ExperimentConfig {
            experiment,
            world: WorldConfig {
                kind,
                extents: default_extents(),
                block_size: default_block(),
                seed: 0,
            },
            seed: 0,
            output_dir: default_output_dir(),
            sim: SimSettings::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            calibration: CalibrationSettings::default(),
            localization: LocalizationSettings::default(),
            confusion: ConfusionSettings::default(),
            matching: MatchingSettings::default(),
            drive: DriveSettings::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical serialization, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut e = Vec::new();
        let w = &self.world;
        positive(&mut e, "world.block_size", w.block_size);
        if !(w.extents >= w.block_size && w.extents.is_finite()) {
            e.push(format!("world.extents: must be >= world.block_size, got {}", w.extents));
        }

        let d = &self.sim.dynamics;
        positive(&mut e, "sim.dynamics.speed", d.speed);
        positive(&mut e, "sim.dynamics.dt", d.dt);
        positive(&mut e, "sim.dynamics.lookahead", d.lookahead);
        positive(&mut e, "sim.dynamics.kappa_max", d.kappa_max);
        non_negative(&mut e, "sim.gps.sigma_xy", self.sim.gps.sigma_xy);
        non_negative(&mut e, "sim.gps.sigma_heading", self.sim.gps.sigma_heading);
        let o = &self.sim.observation;
        non_negative(&mut e, "sim.observation.lateral_jitter", o.lateral_jitter);
        non_negative(&mut e, "sim.observation.heading_jitter", o.heading_jitter);
        if !(0.0..=1.0).contains(&o.dropout) {
            e.push(format!("sim.observation.dropout: must be in [0, 1], got {}", o.dropout));
        }
        let p = &self.sim.patch;
        positive(&mut e, "sim.patch.resolution", p.resolution);
        positive(&mut e, "sim.patch.stroke", p.stroke);
        if p.size != self.model.architecture.patch_size {
            e.push(format!(
                "sim.patch.size: must equal model.architecture.patch_size ({}), got {}",
                self.model.architecture.patch_size, p.size
            ));
        }

        if let Err(err) = self.model.hyper.validate() {
            e.push(format!("model.hyper: {err}"));
        }
        if (self.model.hyper.kappa_max - d.kappa_max).abs() > 0.0 {
            e.push("model.hyper.kappa_max: must equal sim.dynamics.kappa_max".into());
        }
        if let Err(err) = self.model.architecture.validate() {
            e.push(format!("model.architecture: {err}"));
        }
        if let Err(err) = self.train.optimizer.validate() {
            e.push(format!("train.optimizer: {err}"));
        }
        self.train.curriculum.check("train.curriculum", &mut e);

        let c = &self.calibration;
        if c.z_grid.is_empty() {
            e.push("calibration.z_grid: must not be empty".into());
        }
        for (i, &z) in c.z_grid.iter().enumerate() {
            non_negative(&mut e, &format!("calibration.z_grid[{i}]"), z);
        }
        at_least_one(&mut e, "calibration.samples", c.samples);
        at_least_one(&mut e, "calibration.resamples", c.resamples);

        let l = &self.localization;
        if l.sigma_xy.is_empty() {
            e.push("localization.sigma_xy: must not be empty".into());
        }
        if l.sigma_heading.is_empty() {
            e.push("localization.sigma_heading: must not be empty".into());
        }
        for (i, &s) in l.sigma_xy.iter().enumerate() {
            non_negative(&mut e, &format!("localization.sigma_xy[{i}]"), s);
        }
        for (i, &s) in l.sigma_heading.iter().enumerate() {
            non_negative(&mut e, &format!("localization.sigma_heading[{i}]"), s);
        }
        at_least_one(&mut e, "localization.hypotheses", l.hypotheses);
        at_least_one(&mut e, "localization.samples", l.samples);
        positive(&mut e, "localization.junction_radius", l.junction_radius);
        positive(&mut e, "localization.sigma_meas", l.sigma_meas);
        if l.n_s < 2 {
            e.push("localization.n_s: must be >= 2".into());
        }

        at_least_one(&mut e, "confusion.trials", self.confusion.trials);

        let m = &self.matching;
        if let Err(err) = m.matcher.validate() {
            e.push(format!("matching.matcher: {err}"));
        }
        non_negative(&mut e, "matching.gps_sigma", m.gps_sigma);
        at_least_one(&mut e, "matching.routes", m.routes);
        positive(&mut e, "matching.min_length", m.min_length);

        let dr = &self.drive;
        at_least_one(&mut e, "drive.routes", dr.routes);
        positive(&mut e, "drive.min_length", dr.min_length);
        positive(&mut e, "drive.branch_tolerance", dr.branch_tolerance);
        positive(&mut e, "drive.branch_window", dr.branch_window);

        if e.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(e))
        }
    }
}
