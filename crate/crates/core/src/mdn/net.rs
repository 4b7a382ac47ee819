//! Layer primitives and the fixed encoder/trunk/head topology over one flat
//! parameter vector.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Stage widths of the network. Input rasters are `patch_size`² single channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub patch_size: usize,
    /// Channels of the two strided observation convolutions (5×5/2, 3×3/2).
    pub obs_channels: [usize; 2],
    /// Channels of the map convolution (4×4/4).
    pub map_channels: usize,
    /// Channels of the routed-map convolution feeding the deterministic head (4×4/4).
    pub route_channels: usize,
    /// Widths of the two fully connected trunk stages.
    pub hidden: [usize; 2],
    /// Width of the deterministic head's hidden stage.
    pub det_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            patch_size: 64,
            obs_channels: [6, 8],
            map_channels: 4,
            route_channels: 4,
            hidden: [24, 24],
            det_hidden: 16,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        let s = self.patch_size;
        if s < 16 || !s.is_multiple_of(4) {
            return Err(ModelError::Config(format!(
                "patch_size must be a multiple of 4 and >= 16, got {s}"
            )));
        }
        let widths = [
            self.obs_channels[0],
            self.obs_channels[1],
            self.map_channels,
            self.route_channels,
            self.hidden[0],
            self.hidden[1],
            self.det_hidden,
        ];
        if widths.contains(&0) {
            return Err(ModelError::Config("all stage widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Spatial sizes derived from the architecture.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub s: usize,
    pub o1: usize,
    pub o2: usize,
    pub m: usize,
}

impl Dims {
    fn new(s: usize) -> Self {
        let o1 = (s - 5) / 2 + 1;
        let o2 = (o1 - 3) / 2 + 1;
        Dims { s, o1, o2, m: s / 4 }
    }
}

/// Named slices of the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub arch: Architecture,
    pub dims: Dims,
    pub tensors: Vec<(&'static str, Range<usize>)>,
    pub total: usize,
}

pub(crate) const OC1_W: usize = 0;
pub(crate) const OC1_B: usize = 1;
pub(crate) const OC2_W: usize = 2;
pub(crate) const OC2_B: usize = 3;
pub(crate) const MC_W: usize = 4;
pub(crate) const MC_B: usize = 5;
pub(crate) const FC1_W: usize = 6;
pub(crate) const FC1_B: usize = 7;
pub(crate) const FC2_W: usize = 8;
pub(crate) const FC2_B: usize = 9;
pub(crate) const HEAD_W: usize = 10;
pub(crate) const HEAD_B: usize = 11;
pub(crate) const RC_W: usize = 12;
pub(crate) const RC_B: usize = 13;
pub(crate) const D1_W: usize = 14;
pub(crate) const D1_B: usize = 15;
pub(crate) const D2_W: usize = 16;
pub(crate) const D2_B: usize = 17;

/// First tensor index belonging to the deterministic head.
pub(crate) const DET_GROUP_START: usize = RC_W;

impl Layout {
    pub fn new(arch: Architecture, k: usize) -> Self {
        let dims = Dims::new(arch.patch_size);
        let [c1, c2] = arch.obs_channels;
        let (cm, cr) = (arch.map_channels, arch.route_channels);
        let [h1, h2] = arch.hidden;
        let hd = arch.det_hidden;
        let f = c2 * dims.o2 * dims.o2 + cm * dims.m * dims.m;
        let sizes: [(&'static str, usize); 18] = [
            ("obs_conv1.weight", c1 * 25),
            ("obs_conv1.bias", c1),
            ("obs_conv2.weight", c2 * c1 * 9),
            ("obs_conv2.bias", c2),
            ("map_conv.weight", cm * 16),
            ("map_conv.bias", cm),
            ("trunk1.weight", h1 * f),
            ("trunk1.bias", h1),
            ("trunk2.weight", h2 * h1),
            ("trunk2.bias", h2),
            ("mixture_head.weight", 3 * k * h2),
            ("mixture_head.bias", 3 * k),
            ("route_conv.weight", cr * 2 * 16),
            ("route_conv.bias", cr),
            ("det1.weight", hd * (h2 + cr * dims.m * dims.m)),
            ("det1.bias", hd),
            ("det2.weight", hd),
            ("det2.bias", 1),
        ];
        let mut tensors = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for (name, n) in sizes {
            tensors.push((name, at..at + n));
            at += n;
        }
        Layout {
            arch,
            dims,
            tensors,
            total: at,
        }
    }

    pub fn range(&self, t: usize) -> Range<usize> {
        self.tensors[t].1.clone()
    }

    pub fn fan_in(&self, t: usize) -> usize {
        let a = &self.arch;
        let d = &self.dims;
        match t {
            OC1_W => 25,
            OC2_W => a.obs_channels[0] * 9,
            MC_W => 16,
            FC1_W => a.obs_channels[1] * d.o2 * d.o2 + a.map_channels * d.m * d.m,
            FC2_W => a.hidden[0],
            HEAD_W => a.hidden[1],
            RC_W => 32,
            D1_W => a.hidden[1] + a.route_channels * d.m * d.m,
            D2_W => a.det_hidden,
            _ => 1,
        }
    }
}

/// Valid (no padding) strided convolution, `out = b + w ⋆ inp`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: &[f64],
    b: &[f64],
    k: usize,
    stride: usize,
    out: &mut [f64],
) {
    let cout = b.len();
    let o = (h - k) / stride + 1;
    for co in 0..cout {
        let plane = &mut out[co * o * o..(co + 1) * o * o];
        plane.fill(b[co]);
        for ci in 0..cin {
            let src = &inp[ci * h * h..(ci + 1) * h * h];
            let ker = &w[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for oy in 0..o {
                for ox in 0..o {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = &src[(oy * stride + ky) * h + ox * stride..][..k];
                        let kr = &ker[ky * k..(ky + 1) * k];
                        for kx in 0..k {
                            acc += row[kx] * kr[kx];
                        }
                    }
                    plane[oy * o + ox] += acc;
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of [`conv_forward`], and optionally the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: &[f64],
    k: usize,
    stride: usize,
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    let cout = gb.len();
    let o = (h - k) / stride + 1;
    for co in 0..cout {
        for oy in 0..o {
            for ox in 0..o {
                let g = gout[co * o * o + oy * o + ox];
                if g == 0.0 {
                    continue;
                }
                gb[co] += g;
                for ci in 0..cin {
                    let base = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let at = ci * h * h + (oy * stride + ky) * h + ox * stride;
                        for kx in 0..k {
                            gw[base + ky * k + kx] += g * inp[at + kx];
                        }
                        if let Some(gi) = gin.as_deref_mut() {
                            for kx in 0..k {
                                gi[at + kx] += g * w[base + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = W·inp + b` with `W` stored row-major `[out × in]`.
pub(crate) fn dense_forward(inp: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = inp.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n..(j + 1) * n];
        *o = b[j] + row.iter().zip(inp).map(|(a, x)| a * x).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    inp: &[f64],
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    let n = inp.len();
    for (j, &g) in gout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[j] += g;
        let grow = &mut gw[j * n..(j + 1) * n];
        for (gv, x) in grow.iter_mut().zip(inp) {
            *gv += g * x;
        }
        if let Some(gi) = gin.as_deref_mut() {
            let row = &w[j * n..(j + 1) * n];
            for (gv, a) in gi.iter_mut().zip(row) {
                *gv += g * a;
            }
        }
    }
}

pub(crate) fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the post-ReLU activation is zero.
pub(crate) fn relu_mask(act: &[f64], g: &mut [f64]) {
    for (gv, a) in g.iter_mut().zip(act) {
        if *a <= 0.0 {
            *gv = 0.0;
        }
    }
}
