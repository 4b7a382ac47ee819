//! Discrete pose beliefs and their Bayesian update from steering evidence.

use std::f64::consts::{E, PI};
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::BeliefError;
use crate::geo::wrap_angle;
use crate::graph::RoadGraph;
use crate::mdn::{log_sum_exp, GmmParams, ModelParams};
use crate::render::{render_patch, MapPatch, PatchSpec, Pose};
use crate::sim::Observation;

/// Per-axis variance floor used by the entropy approximation.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Weights below this are ignored when deciding calibration membership.
pub const CALIBRATION_PHI_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub pose: Pose,
    pub weight: f64,
}

/// Weighted set of pose hypotheses; weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBelief {
    hypotheses: Vec<Hypothesis>,
}

#[derive(Serialize, Deserialize)]
struct BeliefRow {
    x: f64,
    y: f64,
    alpha: f64,
    weight: f64,
}

impl PoseBelief {
    pub fn new(hypotheses: Vec<Hypothesis>) -> Result<Self, BeliefError> {
        if hypotheses.is_empty() {
            return Err(BeliefError::Invalid("belief needs at least one hypothesis".into()));
        }
        if hypotheses.iter().any(|h| !(h.weight >= 0.0)) {
            return Err(BeliefError::Invalid("weights must be non-negative".into()));
        }
        let s: f64 = hypotheses.iter().map(|h| h.weight).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(BeliefError::Invalid(format!("weights sum to {s}")));
        }
        Ok(PoseBelief { hypotheses })
    }

    /// Equal weights over the given poses.
    pub fn uniform(poses: &[Pose]) -> Result<Self, BeliefError> {
        let w = 1.0 / poses.len() as f64;
        Self::new(poses.iter().map(|&pose| Hypothesis { pose, weight: w }).collect())
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.weight).collect()
    }

    /// Same support, new weights (normalized here).
    fn reweighted(&self, log_w: &[f64]) -> Option<PoseBelief> {
        let z = log_sum_exp(log_w);
        if !z.is_finite() {
            return None;
        }
        let hypotheses = self
            .hypotheses
            .iter()
            .zip(log_w)
            .map(|(h, lw)| Hypothesis {
                pose: h.pose,
                weight: (lw - z).exp(),
            })
            .collect();
        Some(PoseBelief { hypotheses })
    }

    pub fn total_variation(&self, other: &PoseBelief) -> f64 {
        0.5 * self
            .hypotheses
            .iter()
            .zip(&other.hypotheses)
            .map(|(a, b)| (a.weight - b.weight).abs())
            .sum::<f64>()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BeliefError> {
        let mut wr = csv::Writer::from_writer(w);
        for h in &self.hypotheses {
            wr.serialize(BeliefRow {
                x: h.pose.x,
                y: h.pose.y,
                alpha: h.pose.heading,
                weight: h.weight,
            })
            .map_err(|e| BeliefError::Invalid(e.to_string()))?;
        }
        wr.flush().map_err(|e| BeliefError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, BeliefError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut hyps = Vec::new();
        for row in rd.deserialize::<BeliefRow>() {
            let row = row.map_err(|e| BeliefError::Invalid(e.to_string()))?;
            hyps.push(Hypothesis {
                pose: Pose::new(row.x, row.y, row.alpha),
                weight: row.weight,
            });
        }
        Self::new(hyps)
    }
}

/// `n` hypotheses drawn from a Gaussian about `center`, uniform weights.
pub fn make_prior<R: Rng + ?Sized>(
    center: &Pose,
    sigma_xy: f64,
    sigma_heading: f64,
    n: usize,
    rng: &mut R,
) -> Result<PoseBelief, BeliefError> {
    if n == 0 {
        return Err(BeliefError::Invalid("prior needs at least one hypothesis".into()));
    }
    if !(sigma_xy >= 0.0) || !(sigma_heading >= 0.0) {
        return Err(BeliefError::Invalid("prior sigmas must be >= 0".into()));
    }
    let draw = |rng: &mut R, s: f64| {
        if s == 0.0 {
            0.0
        } else {
            Normal::new(0.0, s).expect("finite sigma").sample(rng)
        }
    };
    let poses: Vec<Pose> = (0..n)
        .map(|_| {
            let dx = draw(rng, sigma_xy);
            let dy = draw(rng, sigma_xy);
            let dh = draw(rng, sigma_heading);
            Pose::new(center.x + dx, center.y + dy, wrap_angle(center.heading + dh))
        })
        .collect();
    PoseBelief::uniform(&poses)
}

/// How the steering evidence enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UpdateMode {
    /// Condition on a measured executed curvature with Gaussian noise.
    ///
    /// The likelihood of hypothesis j is `∫ N(θ; θ_meas, σ_meas²)·P(θ | pose_j) dθ`,
    /// evaluated by `n_s`-point trapezoid quadrature.
    ObservedSteering {
        theta_meas: f64,
        sigma_meas: f64,
        n_s: usize,
    },
    /// The sampling loop over θ with each sample's likelihood normalized by the
    /// prior-weighted marginal, averaged over `n_s` samples.
    PaperLiteral { sampling: SteeringSampler, n_s: usize },
}

impl UpdateMode {
    pub fn observed(theta_meas: f64) -> Self {
        UpdateMode::ObservedSteering {
            theta_meas,
            sigma_meas: 0.005,
            n_s: 129,
        }
    }
}

/// Distribution the literal update draws its curvature samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteeringSampler {
    /// `Σ_j prior_j·P(θ | pose_j)`: the model's own predictive marginal.
    PriorMarginal,
    /// Uniform over [−κ_max, κ_max].
    Uniform,
}

/// Bayes' rule on a fixed support: `posterior_j ∝ prior_j·exp(log_lik_j)`.
///
/// A likelihood identical across hypotheses returns the prior unchanged; if
/// every term underflows the prior comes back inside the error.
pub fn posterior_from_log_likelihoods(prior: &PoseBelief, log_lik: &[f64]) -> Result<PoseBelief, BeliefError> {
    if log_lik.len() != prior.len() {
        return Err(BeliefError::Invalid(format!(
            "{} likelihoods for {} hypotheses",
            log_lik.len(),
            prior.len()
        )));
    }
    if log_lik.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(BeliefError::Invalid("likelihood is NaN or infinite".into()));
    }
    if log_lik.iter().all(|&l| l == log_lik[0]) && log_lik[0].is_finite() {
        return Ok(prior.clone());
    }
    let log_w: Vec<f64> = prior
        .hypotheses
        .iter()
        .zip(log_lik)
        .map(|(h, l)| h.weight.ln() + l)
        .collect();
    prior
        .reweighted(&log_w)
        .ok_or_else(|| BeliefError::DegenerateUpdate { prior: prior.clone() })
}

/// Quadrature nodes and log trapezoid weights on [−κ_max−4σ, κ_max+4σ].
fn quadrature(kappa_max: f64, sigma_meas: f64, n_s: usize) -> Vec<(f64, f64)> {
    let (a, b) = (-kappa_max - 4.0 * sigma_meas, kappa_max + 4.0 * sigma_meas);
    let h = (b - a) / (n_s - 1) as f64;
    (0..n_s)
        .map(|k| {
            let w = if k == 0 || k == n_s - 1 { h / 2.0 } else { h };
            (a + k as f64 * h, w.ln())
        })
        .collect()
}

/// Posterior from each hypothesis' predicted steering mixture.
pub fn posterior_from_mixtures<R: Rng + ?Sized>(
    prior: &PoseBelief,
    mixtures: &[GmmParams],
    mode: &UpdateMode,
    kappa_max: f64,
    rng: &mut R,
) -> Result<PoseBelief, BeliefError> {
    if mixtures.len() != prior.len() {
        return Err(BeliefError::Invalid(format!(
            "{} mixtures for {} hypotheses",
            mixtures.len(),
            prior.len()
        )));
    }
    match *mode {
        UpdateMode::ObservedSteering {
            theta_meas,
            sigma_meas,
            n_s,
        } => {
            if n_s < 2 || !(sigma_meas > 0.0) || !theta_meas.is_finite() {
                return Err(BeliefError::Invalid(
                    "observed-steering needs n_s >= 2, sigma_meas > 0 and a finite measurement".into(),
                ));
            }
            let nodes = quadrature(kappa_max, sigma_meas, n_s);
            let log_meas: Vec<f64> = nodes
                .iter()
                .map(|&(t, lw)| {
                    let z = (t - theta_meas) / sigma_meas;
                    lw - 0.5 * z * z - sigma_meas.ln() - 0.5 * (2.0 * PI).ln()
                })
                .collect();
            let log_lik: Vec<f64> = mixtures
                .iter()
                .map(|g| {
                    let terms: Vec<f64> = nodes
                        .iter()
                        .zip(&log_meas)
                        .map(|(&(t, _), lm)| lm + g.log_density(t))
                        .collect();
                    log_sum_exp(&terms)
                })
                .collect();
            posterior_from_log_likelihoods(prior, &log_lik)
        }
        UpdateMode::PaperLiteral { sampling, n_s } => {
            if n_s == 0 {
                return Err(BeliefError::Invalid("paper-literal needs n_s >= 1".into()));
            }
            let prior_w = prior.weights();
            let mut acc = vec![0.0; prior.len()];
            for _ in 0..n_s {
                let theta = match sampling {
                    SteeringSampler::PriorMarginal => {
                        let j = pick(&prior_w, rng.random());
                        mixtures[j].sample(rng)
                    }
                    SteeringSampler::Uniform => rng.random_range(-kappa_max..=kappa_max),
                };
                let lp: Vec<f64> = mixtures.iter().map(|g| g.log_density(theta)).collect();
                let joint: Vec<f64> = lp.iter().zip(&prior_w).map(|(l, w)| l + w.ln()).collect();
                let marginal = log_sum_exp(&joint);
                if !marginal.is_finite() {
                    continue;
                }
                for (a, j) in acc.iter_mut().zip(&joint) {
                    *a += (j - marginal).exp();
                }
            }
            let s: f64 = acc.iter().sum();
            if !(s > 0.0) {
                return Err(BeliefError::DegenerateUpdate { prior: prior.clone() });
            }
            let log_w: Vec<f64> = acc.iter().map(|a| a.ln()).collect();
            prior
                .reweighted(&log_w)
                .ok_or_else(|| BeliefError::DegenerateUpdate { prior: prior.clone() })
        }
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Reweights `prior` by how well each hypothesis' own unrouted map patch,
/// together with the observation from the true pose, explains the steering.
#[allow(clippy::too_many_arguments)]
pub fn posterior_update<R: Rng + ?Sized>(
    prior: &PoseBelief,
    obs: &Observation,
    graph: &RoadGraph,
    model: &ModelParams,
    spec: &PatchSpec,
    mode: &UpdateMode,
    rng: &mut R,
) -> Result<PoseBelief, BeliefError> {
    let mixtures = hypothesis_mixtures(prior, obs, graph, model, spec)?;
    posterior_from_mixtures(prior, &mixtures, mode, model.hyper().kappa_max, rng)
}

/// The model's steering mixture at every hypothesis.
pub fn hypothesis_mixtures(
    belief: &PoseBelief,
    obs: &Observation,
    graph: &RoadGraph,
    model: &ModelParams,
    spec: &PatchSpec,
) -> Result<Vec<GmmParams>, BeliefError> {
    let feats = model.encode_observation(obs)?;
    belief
        .hypotheses
        .iter()
        .map(|h| {
            let patch = render_patch(graph, &h.pose, None, spec)
                .map_err(|e| BeliefError::Invalid(e.to_string()))?;
            Ok(model.stochastic_with(&feats, &patch)?)
        })
        .collect()
}

/// Weighted second moments of a belief.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefStats {
    /// σ²(x) + σ²(y), m².
    pub spatial_variance: f64,
    /// Variance of heading residuals about the circular mean, rad².
    pub angular_variance: f64,
    pub total_variance: f64,
    /// Entropy of the moment-matched Gaussian, nats.
    pub entropy: f64,
}

pub fn belief_stats(b: &PoseBelief) -> BeliefStats {
    let (mut mx, mut my, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for h in &b.hypotheses {
        mx += h.weight * h.pose.x;
        my += h.weight * h.pose.y;
        s += h.weight * h.pose.heading.sin();
        c += h.weight * h.pose.heading.cos();
    }
    let ma = s.atan2(c);
    let mut cov = [[0.0; 3]; 3];
    for h in &b.hypotheses {
        let d = [h.pose.x - mx, h.pose.y - my, wrap_angle(h.pose.heading - ma)];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += h.weight * d[i] * d[j];
            }
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] = row[i].max(VARIANCE_FLOOR);
    }
    let det = det3(&cov).max(VARIANCE_FLOOR.powi(3));
    let spatial = cov[0][0] + cov[1][1];
    BeliefStats {
        spatial_variance: spatial,
        angular_variance: cov[2][2],
        total_variance: spatial + cov[2][2],
        entropy: 0.5 * ((2.0 * PI * E).powi(3) * det).ln(),
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// True when some component with φ ≥ `phi_min` has `|θ − μ| ≤ z·σ`.
pub fn within_z(g: &GmmParams, theta: f64, z: f64, phi_min: f64) -> bool {
    g.components
        .iter()
        .any(|c| c.phi >= phi_min && (theta - c.mu).abs() <= z * c.sigma)
}

/// Probability mass the mixture itself assigns to the union of its
/// component intervals `[μ_i − zσ_i, μ_i + zσ_i]` (components with φ ≥ `phi_min`).
pub fn interval_coverage(g: &GmmParams, z: f64, phi_min: f64) -> f64 {
    let mut iv: Vec<(f64, f64)> = g
        .components
        .iter()
        .filter(|c| c.phi >= phi_min)
        .map(|c| (c.mu - z * c.sigma, c.mu + z * c.sigma))
        .collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in iv {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
        .iter()
        .map(|&(a, b)| {
            g.components
                .iter()
                .map(|c| c.phi * (normal_cdf((b - c.mu) / c.sigma) - normal_cdf((a - c.mu) / c.sigma)))
                .sum::<f64>()
        })
        .sum()
}

/// Fraction of (mixture, target) pairs whose target lies within `z` of some
/// component carrying at least [`CALIBRATION_PHI_MIN`] weight.
pub fn coverage_fraction(pairs: &[(GmmParams, f64)], z: f64) -> Result<f64, BeliefError> {
    if pairs.is_empty() {
        return Err(BeliefError::EmptyDataset);
    }
    if !(z >= 0.0) {
        return Err(BeliefError::Invalid("z must be >= 0".into()));
    }
    let hits = pairs
        .iter()
        .filter(|(g, t)| within_z(g, *t, z, CALIBRATION_PHI_MIN))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// [`coverage_fraction`] over the model's predictions for `(obs, unrouted patch, target)` items.
pub fn calibration_fraction(
    model: &ModelParams,
    dataset: &[(Observation, MapPatch, f64)],
    z: f64,
) -> Result<f64, BeliefError> {
    let pairs = dataset
        .iter()
        .map(|(o, m, t)| Ok((model.forward_stochastic(o, m)?, *t)))
        .collect::<Result<Vec<_>, BeliefError>>()?;
    coverage_fraction(&pairs, z)
}

/// Scores of every observation against every map patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// `raw[i][j]`: mixture density of location i's executed steering given
    /// observation i and patch j.
    pub raw: Vec<Vec<f64>>,
    /// Natural logs of `raw`, kept separately so tiny densities stay comparable.
    pub log: Vec<Vec<f64>>,
    /// Each row scaled to sum to one.
    pub normalized: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    /// Column of the largest score in each row (lowest index on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        self.log
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn diagonal_hits(&self) -> usize {
        self.row_argmax().iter().enumerate().filter(|(i, j)| i == *j).count()
    }
}

/// Confusion scores: observation and executed steering from location i,
/// unrouted patch from location j.
pub fn place_recognition(
    model: &ModelParams,
    locations: &[(Observation, f64)],
    patches: &[MapPatch],
) -> Result<ScoreMatrix, BeliefError> {
    if locations.is_empty() || locations.len() != patches.len() {
        return Err(BeliefError::Invalid(format!(
            "need equal, non-zero numbers of locations ({}) and patches ({})",
            locations.len(),
            patches.len()
        )));
    }
    let mut log = Vec::with_capacity(locations.len());
    for (obs, theta) in locations {
        let feats = model.encode_observation(obs)?;
        let row = patches
            .iter()
            .map(|p| Ok(model.stochastic_with(&feats, p)?.log_density(*theta)))
            .collect::<Result<Vec<f64>, BeliefError>>()?;
        log.push(row);
    }
    let raw = log.iter().map(|r| r.iter().map(|l| l.exp()).collect()).collect();
    let normalized = log
        .iter()
        .map(|r| {
            let z = log_sum_exp(r);
            r.iter().map(|l| (l - z).exp()).collect()
        })
        .collect();
    Ok(ScoreMatrix { raw, log, normalized })
}
