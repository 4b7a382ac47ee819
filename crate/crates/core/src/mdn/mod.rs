//! Mixture-density steering model.
//!
//! The stochastic head maps an observation and an unrouted map patch to a
//! Gaussian mixture over curvature; the deterministic head maps the same
//! observation plus a routed patch to a single curvature. Both share the
//! observation/map encoders and the fully connected trunk. All math is f64
//! and every gradient is computed exactly by hand-written reverse mode.

mod net;
mod train;

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::render::{Grid, MapPatch};
use crate::sim::{Observation, KAPPA_MAX};

pub use net::Architecture;
pub use train::{train, write_history_csv, EpochRecord, TrainConfig};

use net::*;

/// Model hyperparameters that are not stage widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    /// Number of mixture components.
    pub k: usize,
    /// Center of the log-σ regularizer, in log-curvature units.
    pub c: f64,
    /// Scale of the ‖φ‖_{1/2} penalty.
    pub lambda_phi: f64,
    /// Scale of the log-σ regularizer.
    pub lambda_sigma: f64,
    /// Smoothing inside the square roots of ‖φ‖_{1/2}.
    pub eps: f64,
    pub kappa_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Offset added to the raw σ output before exponentiation.
    pub s0: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            k: 3,
            c: 0.02f64.ln(),
            lambda_phi: 0.01,
            lambda_sigma: 0.05,
            eps: 1e-6,
            kappa_max: KAPPA_MAX,
            sigma_min: 1e-3,
            sigma_max: 1.0,
            s0: 0.02f64.ln(),
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut bad = Vec::new();
        if self.k == 0 {
            bad.push("k must be >= 1");
        }
        if !(self.eps > 0.0) {
            bad.push("eps must be > 0");
        }
        if !(self.kappa_max > 0.0) {
            bad.push("kappa_max must be > 0");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            bad.push("need 0 < sigma_min < sigma_max");
        }
        if !(self.lambda_phi >= 0.0 && self.lambda_sigma >= 0.0) {
            bad.push("penalty scales must be >= 0");
        }
        if !self.c.is_finite() || !self.s0.is_finite() {
            bad.push("c and s0 must be finite");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(bad.join("; ")))
        }
    }
}

/// One weighted Gaussian over curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub phi: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// A Gaussian mixture over curvature (1/m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub components: Vec<Component>,
}

impl GmmParams {
    pub fn new(components: Vec<Component>) -> Self {
        GmmParams { components }
    }

    /// Checks weights, widths and mean bounds.
    pub fn validate(&self, kappa_max: f64) -> Result<(), ModelError> {
        if self.components.is_empty() {
            return Err(ModelError::Config("mixture has no components".into()));
        }
        let sum: f64 = self.components.iter().map(|c| c.phi).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::Config(format!("weights sum to {sum}")));
        }
        for c in &self.components {
            if !(c.phi >= 0.0) || !(c.sigma > 0.0) || !(c.mu.abs() <= kappa_max) {
                return Err(ModelError::Config(format!("invalid component {c:?}")));
            }
        }
        Ok(())
    }

    pub fn density(&self, theta: f64) -> f64 {
        gmm_density(self, theta)
    }

    /// Natural log of the density, computed without underflow.
    pub fn log_density(&self, theta: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.phi.ln() + log_normal(theta, c.mu, c.sigma.ln(), c.sigma))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws one curvature from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.phi;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = self.components[pick];
        Normal::new(c.mu, c.sigma).expect("positive sigma").sample(rng)
    }

    /// Index of the largest weight (lowest index on ties).
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.components.iter().enumerate() {
            if c.phi > self.components[best].phi {
                best = i;
            }
        }
        best
    }
}

/// Mixture density `Σ φ_i·N(θ; μ_i, σ_i²)`.
pub fn gmm_density(g: &GmmParams, theta: f64) -> f64 {
    g.components
        .iter()
        .map(|c| {
            let z = (theta - c.mu) / c.sigma;
            c.phi * (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * c.sigma)
        })
        .sum()
}

fn log_normal(theta: f64, mu: f64, log_sigma: f64, sigma: f64) -> f64 {
    let z = (theta - mu) / sigma;
    -0.5 * (2.0 * PI).ln() - log_sigma - 0.5 * z * z
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The smoothed ‖φ‖_{1/2} = (Σ √(φ_i + ε))².
pub fn phi_half_norm(phi: &[f64], eps: f64) -> f64 {
    let s: f64 = phi.iter().map(|p| (p + eps).sqrt()).sum();
    s * s
}

/// One supervised example.
///
/// `map` is the routed patch M_R; its drivable channel is the unrouted patch
/// M_U seen by the stochastic head.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    pub map: MapPatch,
    pub target: f64,
}

/// Mean loss over a batch, split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub phi_penalty: f64,
    pub sigma_penalty: f64,
    pub det: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.nll += o.nll;
        self.phi_penalty += o.phi_penalty;
        self.sigma_penalty += o.sigma_penalty;
        self.det += o.det;
    }

    fn scale(&mut self, k: f64) {
        self.total *= k;
        self.nll *= k;
        self.phi_penalty *= k;
        self.sigma_penalty *= k;
        self.det *= k;
    }
}

/// Cached observation-encoder output, reusable across many map patches.
#[derive(Debug, Clone)]
pub struct ObsFeatures {
    a2: Vec<f64>,
}

/// All trainable weights plus the hyperparameters they were trained under.
#[derive(Debug, Clone)]
pub struct ModelParams {
    hyper: Hyper,
    layout: Layout,
    weights: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.layout.arch == other.layout.arch && self.weights == other.weights
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    hyper: Hyper,
    arch: Architecture,
    weights: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "topo-nav-mdn";
const CHECKPOINT_VERSION: u32 = 1;

struct Acts {
    x_obs: Vec<f64>,
    x_map: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    m1: Vec<f64>,
    f: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    raw: Vec<f64>,
    x_route: Vec<f64>,
    r1: Vec<f64>,
    dcat: Vec<f64>,
    d: Vec<f64>,
    u: f64,
}

/// Head outputs decoded into a mixture, plus which σ's sit on a clamp.
fn decode(h: &Hyper, raw: &[f64]) -> (GmmParams, Vec<f64>, Vec<bool>) {
    let k = h.k;
    let logits = &raw[..k];
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
    let mut comps = Vec::with_capacity(k);
    let mut log_sigma = Vec::with_capacity(k);
    let mut clamped = Vec::with_capacity(k);
    for i in 0..k {
        let phi = (logits[i] - lse).exp();
        let mu = h.kappa_max * raw[k + i].tanh();
        let ls = h.s0 + raw[2 * k + i];
        let (sigma, ls, cl) = if ls < h.sigma_min.ln() {
            (h.sigma_min, h.sigma_min.ln(), true)
        } else if ls > h.sigma_max.ln() {
            (h.sigma_max, h.sigma_max.ln(), true)
        } else {
            (ls.exp(), ls, false)
        };
        comps.push(Component { phi, mu, sigma });
        log_sigma.push(ls);
        clamped.push(cl);
    }
    // renormalize away the last ulp so the weights sum to 1 as tightly as possible
    let s: f64 = comps.iter().map(|c| c.phi).sum();
    for c in &mut comps {
        c.phi /= s;
    }
    (GmmParams { components: comps }, log_sigma, clamped)
}

struct HeadLoss {
    terms: LossBreakdown,
    g_raw: Vec<f64>,
    g_u: f64,
}

fn head_loss(h: &Hyper, raw: &[f64], u: f64, target: f64) -> Result<HeadLoss, ModelError> {
    let k = h.k;
    let logits = &raw[..k];
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
    let log_phi: Vec<f64> = logits.iter().map(|a| a - lse).collect();
    let phi: Vec<f64> = log_phi.iter().map(|l| l.exp()).collect();
    let (g, log_sigma, clamped) = decode(h, raw);

    let mut lw = Vec::with_capacity(k);
    let mut z = Vec::with_capacity(k);
    for i in 0..k {
        let c = g.components[i];
        let zi = (target - c.mu) / c.sigma;
        z.push(zi);
        lw.push(log_phi[i] + log_normal(target, c.mu, log_sigma[i], c.sigma));
    }
    let log_p = log_sum_exp(&lw);
    let nll = -log_p;
    if !nll.is_finite() {
        return Err(ModelError::NumericOverflow("negative log-likelihood"));
    }
    let resp: Vec<f64> = lw.iter().map(|l| (l - log_p).exp()).collect();

    let s: f64 = phi.iter().map(|p| (p + h.eps).sqrt()).sum();
    let phi_pen = h.lambda_phi * s * s;
    if !phi_pen.is_finite() {
        return Err(ModelError::NumericOverflow("weight penalty"));
    }
    let sig_pen = h.lambda_sigma * log_sigma.iter().map(|l| (l - h.c).powi(2)).sum::<f64>();
    if !sig_pen.is_finite() {
        return Err(ModelError::NumericOverflow("log-sigma regularizer"));
    }
    let y = h.kappa_max * u.tanh();
    let det = (y - target).powi(2);
    if !det.is_finite() {
        return Err(ModelError::NumericOverflow("deterministic head"));
    }

    let mut g_raw = vec![0.0; 3 * k];
    let gp: Vec<f64> = phi.iter().map(|p| h.lambda_phi * s / (p + h.eps).sqrt()).collect();
    let gp_mean: f64 = phi.iter().zip(&gp).map(|(p, g)| p * g).sum();
    for i in 0..k {
        let c = g.components[i];
        g_raw[i] = (phi[i] - resp[i]) + phi[i] * (gp[i] - gp_mean);
        let t = raw[k + i].tanh();
        g_raw[k + i] = -resp[i] * (target - c.mu) / (c.sigma * c.sigma) * h.kappa_max * (1.0 - t * t);
        if !clamped[i] {
            g_raw[2 * k + i] = resp[i] * (1.0 - z[i] * z[i]) + 2.0 * h.lambda_sigma * (log_sigma[i] - h.c);
        }
    }
    let tu = u.tanh();
    let g_u = 2.0 * (y - target) * h.kappa_max * (1.0 - tu * tu);
    if g_raw.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NumericOverflow("mixture-head gradient"));
    }
    Ok(HeadLoss {
        terms: LossBreakdown {
            total: nll + phi_pen + sig_pen + det,
            nll,
            phi_penalty: phi_pen,
            sigma_penalty: sig_pen,
            det,
        },
        g_raw,
        g_u,
    })
}

impl ModelParams {
    /// A network with every weight and bias zero.
    pub fn zeros(hyper: Hyper, arch: Architecture) -> Result<Self, ModelError> {
        hyper.validate()?;
        arch.validate()?;
        let layout = Layout::new(arch, hyper.k);
        Ok(ModelParams {
            hyper,
            weights: vec![0.0; layout.total],
            layout,
        })
    }

    /// He-normal initialization for ReLU stages, small weights on the output
    /// stages, and component means spread across the curvature range.
    pub fn init<R: Rng + ?Sized>(hyper: Hyper, arch: Architecture, rng: &mut R) -> Result<Self, ModelError> {
        let mut p = Self::zeros(hyper, arch)?;
        for t in [OC1_W, OC2_W, MC_W, FC1_W, FC2_W, HEAD_W, RC_W, D1_W, D2_W] {
            let fan = p.layout.fan_in(t) as f64;
            let std = match t {
                HEAD_W | D2_W => 0.1 / fan.sqrt(),
                _ => (2.0 / fan).sqrt(),
            };
            let dist = Normal::new(0.0, std).expect("finite std");
            for w in &mut p.weights[p.layout.range(t)] {
                *w = dist.sample(rng);
            }
        }
        let k = hyper.k;
        if k > 1 {
            let hb = p.layout.range(HEAD_B);
            for i in 0..k {
                let frac = -0.5 + i as f64 / (k - 1) as f64;
                p.weights[hb.start + k + i] = frac.atanh();
            }
        }
        Ok(p)
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn architecture(&self) -> &Architecture {
        &self.layout.arch
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Named parameter tensors as ranges into [`Self::weights`].
    pub fn tensors(&self) -> Vec<(&'static str, Range<usize>)> {
        self.layout.tensors.clone()
    }

    /// Start of the parameters owned by the deterministic head.
    pub fn det_head_start(&self) -> usize {
        self.layout.range(DET_GROUP_START).start
    }

    fn w(&self, t: usize) -> &[f64] {
        &self.weights[self.layout.range(t)]
    }

    fn check_grid(&self, g: &Grid) -> Result<(), ModelError> {
        let s = self.layout.arch.patch_size;
        if g.size() != s {
            return Err(ModelError::SizeMismatch {
                expected: s,
                got: g.size(),
            });
        }
        Ok(())
    }

    pub fn encode_observation(&self, obs: &Observation) -> Result<ObsFeatures, ModelError> {
        self.check_grid(&obs.raster)?;
        let (_, a2) = self.obs_encoder(&obs.raster.to_f64());
        Ok(ObsFeatures { a2 })
    }

    fn obs_encoder(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.layout.dims;
        let [c1, c2] = self.layout.arch.obs_channels;
        let mut a1 = vec![0.0; c1 * d.o1 * d.o1];
        conv_forward(x, 1, d.s, self.w(OC1_W), self.w(OC1_B), 5, 2, &mut a1);
        relu(&mut a1);
        let mut a2 = vec![0.0; c2 * d.o2 * d.o2];
        conv_forward(&a1, c1, d.o1, self.w(OC2_W), self.w(OC2_B), 3, 2, &mut a2);
        relu(&mut a2);
        (a1, a2)
    }

    fn trunk(&self, a2: &[f64], x_map: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.layout.dims;
        let a = &self.layout.arch;
        let mut m1 = vec![0.0; a.map_channels * d.m * d.m];
        conv_forward(x_map, 1, d.s, self.w(MC_W), self.w(MC_B), 4, 4, &mut m1);
        relu(&mut m1);
        let mut f = Vec::with_capacity(a2.len() + m1.len());
        f.extend_from_slice(a2);
        f.extend_from_slice(&m1);
        let mut h1 = vec![0.0; a.hidden[0]];
        dense_forward(&f, self.w(FC1_W), self.w(FC1_B), &mut h1);
        relu(&mut h1);
        let mut h2 = vec![0.0; a.hidden[1]];
        dense_forward(&h1, self.w(FC2_W), self.w(FC2_B), &mut h2);
        relu(&mut h2);
        (m1, f, h1, h2)
    }

    fn mixture_raw(&self, h2: &[f64]) -> Vec<f64> {
        let mut raw = vec![0.0; 3 * self.hyper.k];
        dense_forward(h2, self.w(HEAD_W), self.w(HEAD_B), &mut raw);
        raw
    }

    fn det_head(&self, h2: &[f64], x_route: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let d = self.layout.dims;
        let a = &self.layout.arch;
        let mut r1 = vec![0.0; a.route_channels * d.m * d.m];
        conv_forward(x_route, 2, d.s, self.w(RC_W), self.w(RC_B), 4, 4, &mut r1);
        relu(&mut r1);
        let mut dcat = Vec::with_capacity(h2.len() + r1.len());
        dcat.extend_from_slice(h2);
        dcat.extend_from_slice(&r1);
        let mut dh = vec![0.0; a.det_hidden];
        dense_forward(&dcat, self.w(D1_W), self.w(D1_B), &mut dh);
        relu(&mut dh);
        let mut u = [0.0];
        dense_forward(&dh, self.w(D2_W), self.w(D2_B), &mut u);
        (r1, dcat, dh, u[0])
    }

    /// Mixture over curvature given an observation and an unrouted patch.
    pub fn forward_stochastic(&self, obs: &Observation, map_u: &MapPatch) -> Result<GmmParams, ModelError> {
        let feats = self.encode_observation(obs)?;
        self.stochastic_with(&feats, map_u)
    }

    /// Like [`Self::forward_stochastic`] with a precomputed observation encoding.
    pub fn stochastic_with(&self, feats: &ObsFeatures, map_u: &MapPatch) -> Result<GmmParams, ModelError> {
        if map_u.is_routed() {
            return Err(ModelError::ChannelMismatch(
                "stochastic head takes an unrouted patch",
            ));
        }
        self.check_grid(&map_u.drivable)?;
        let (_, _, _, h2) = self.trunk(&feats.a2, &map_u.drivable.to_f64());
        Ok(decode(&self.hyper, &self.mixture_raw(&h2)).0)
    }

    /// Single curvature command given an observation and a routed patch.
    pub fn forward_deterministic(&self, obs: &Observation, map_r: &MapPatch) -> Result<f64, ModelError> {
        let route = map_r.route.as_ref().ok_or(ModelError::ChannelMismatch(
            "deterministic head takes a routed patch",
        ))?;
        self.check_grid(&map_r.drivable)?;
        self.check_grid(route)?;
        let feats = self.encode_observation(obs)?;
        let x_map = map_r.drivable.to_f64();
        let (_, _, _, h2) = self.trunk(&feats.a2, &x_map);
        let mut xr = x_map;
        xr.extend(route.to_f64());
        let (_, _, _, u) = self.det_head(&h2, &xr);
        Ok(self.hyper.kappa_max * u.tanh())
    }

    fn forward_all(&self, s: &Sample) -> Result<Acts, ModelError> {
        let route = s.map.route.as_ref().ok_or(ModelError::ChannelMismatch(
            "training samples need a routed patch",
        ))?;
        self.check_grid(&s.obs.raster)?;
        self.check_grid(&s.map.drivable)?;
        let x_obs = s.obs.raster.to_f64();
        let x_map = s.map.drivable.to_f64();
        let (a1, a2) = self.obs_encoder(&x_obs);
        let (m1, f, h1, h2) = self.trunk(&a2, &x_map);
        let raw = self.mixture_raw(&h2);
        let mut x_route = x_map.clone();
        x_route.extend(route.to_f64());
        let (r1, dcat, d, u) = self.det_head(&h2, &x_route);
        Ok(Acts {
            x_obs,
            x_map,
            a1,
            a2,
            m1,
            f,
            h1,
            h2,
            raw,
            x_route,
            r1,
            dcat,
            d,
            u,
        })
    }

    fn sample_loss(&self, s: &Sample) -> Result<LossBreakdown, ModelError> {
        let a = self.forward_all(s)?;
        Ok(head_loss(&self.hyper, &a.raw, a.u, s.target)?.terms)
    }

    /// Accumulates the gradient of one sample's loss into `grad`.
    fn sample_backward(&self, s: &Sample, grad: &mut [f64]) -> Result<LossBreakdown, ModelError> {
        let a = self.forward_all(s)?;
        let hl = head_loss(&self.hyper, &a.raw, a.u, s.target)?;
        let l = &self.layout;
        let d = l.dims;
        let arch = &l.arch;
        // weight and bias tensors are adjacent, so one split yields both gradients
        macro_rules! wb {
            ($w:expr) => {{
                let (rw, rb) = (l.range($w), l.range($w + 1));
                let (gw, gb) = grad[rw.start..rb.end].split_at_mut(rw.len());
                (gw, gb)
            }};
        }

        let mut g_h2 = vec![0.0; arch.hidden[1]];
        {
            let (gw, gb) = wb!(HEAD_W);
            dense_backward(&a.h2, self.w(HEAD_W), &hl.g_raw, gw, gb, Some(&mut g_h2));
        }

        // deterministic head
        let mut g_d = vec![0.0; arch.det_hidden];
        {
            let (gw, gb) = wb!(D2_W);
            dense_backward(&a.d, self.w(D2_W), &[hl.g_u], gw, gb, Some(&mut g_d));
        }
        relu_mask(&a.d, &mut g_d);
        let mut g_dcat = vec![0.0; a.dcat.len()];
        {
            let (gw, gb) = wb!(D1_W);
            dense_backward(&a.dcat, self.w(D1_W), &g_d, gw, gb, Some(&mut g_dcat));
        }
        for (g, v) in g_h2.iter_mut().zip(&g_dcat[..arch.hidden[1]]) {
            *g += v;
        }
        let mut g_r1 = g_dcat[arch.hidden[1]..].to_vec();
        relu_mask(&a.r1, &mut g_r1);
        {
            let (gw, gb) = wb!(RC_W);
            conv_backward(&a.x_route, 2, d.s, self.w(RC_W), 4, 4, &g_r1, gw, gb, None);
        }

        // trunk
        relu_mask(&a.h2, &mut g_h2);
        let mut g_h1 = vec![0.0; arch.hidden[0]];
        {
            let (gw, gb) = wb!(FC2_W);
            dense_backward(&a.h1, self.w(FC2_W), &g_h2, gw, gb, Some(&mut g_h1));
        }
        relu_mask(&a.h1, &mut g_h1);
        let mut g_f = vec![0.0; a.f.len()];
        {
            let (gw, gb) = wb!(FC1_W);
            dense_backward(&a.f, self.w(FC1_W), &g_h1, gw, gb, Some(&mut g_f));
        }
        let (g_a2, g_m1) = g_f.split_at_mut(a.a2.len());
        relu_mask(&a.m1, g_m1);
        {
            let (gw, gb) = wb!(MC_W);
            conv_backward(&a.x_map, 1, d.s, self.w(MC_W), 4, 4, g_m1, gw, gb, None);
        }
        relu_mask(&a.a2, g_a2);
        let mut g_a1 = vec![0.0; a.a1.len()];
        {
            let (gw, gb) = wb!(OC2_W);
            conv_backward(&a.a1, arch.obs_channels[0], d.o1, self.w(OC2_W), 3, 2, g_a2, gw, gb, Some(&mut g_a1));
        }
        relu_mask(&a.a1, &mut g_a1);
        {
            let (gw, gb) = wb!(OC1_W);
            conv_backward(&a.x_obs, 1, d.s, self.w(OC1_W), 5, 2, &g_a1, gw, gb, None);
        }
        Ok(hl.terms)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: self.hyper,
            arch: self.layout.arch,
            weights: self.weights.clone(),
        };
        serde_json::to_writer(w, &ck).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self, ModelError> {
        let ck: Checkpoint =
            serde_json::from_reader(r).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut p = Self::zeros(ck.hyper, ck.arch)?;
        if ck.weights.len() != p.weights.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} weights, found {}",
                p.weights.len(),
                ck.weights.len()
            )));
        }
        if ck.weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Checkpoint("non-finite weight".into()));
        }
        p.weights = ck.weights;
        Ok(p)
    }
}

fn check_batch(params: &ModelParams, batch: &[Sample]) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let km = params.hyper.kappa_max;
    if let Some(s) = batch.iter().find(|s| !(s.target.abs() <= km)) {
        return Err(ModelError::Config(format!(
            "target {} outside [-{km}, {km}]",
            s.target
        )));
    }
    Ok(())
}

/// Mean loss over the batch.
pub fn loss(params: &ModelParams, batch: &[Sample]) -> Result<LossBreakdown, ModelError> {
    check_batch(params, batch)?;
    let mut acc = LossBreakdown::default();
    for s in batch {
        acc.add(&params.sample_loss(s)?);
    }
    acc.scale(1.0 / batch.len() as f64);
    Ok(acc)
}

/// Mean loss and its exact gradient with respect to every weight.
pub fn backprop_gradients(
    params: &ModelParams,
    batch: &[Sample],
) -> Result<(LossBreakdown, Vec<f64>), ModelError> {
    check_batch(params, batch)?;
    let mut grad = vec![0.0; params.num_params()];
    let mut acc = LossBreakdown::default();
    for s in batch {
        acc.add(&params.sample_backward(s, &mut grad)?);
    }
    let inv = 1.0 / batch.len() as f64;
    acc.scale(inv);
    for g in &mut grad {
        *g *= inv;
    }
    Ok((acc, grad))
}
