//! Heading-up map patches around a pose, route charts, and PGM dumps.
//!
//! Pixel `(col, row)` has its center at continuous pixel coordinate
//! `(col, row)`; the pose sits at `(S/2, S/2)` and its heading points toward
//! row 0. A pixel is drawn when its center lies within `stroke/2` meters of a
//! polyline segment. No anti-aliasing.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::RenderError;
use crate::geo::{point_segment_distance, wrap_angle, Point2};
use crate::graph::{EdgeId, NodeId, RoadGraph};

/// Planar pose. Heading 0 points along +y and grows counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Unit vector along the heading.
    pub fn forward(&self) -> Point2 {
        let (s, c) = sin_cos(self.heading);
        Point2::new(-s, c)
    }

    /// Unit vector pointing to the vehicle's left.
    pub fn left(&self) -> Point2 {
        let (s, c) = sin_cos(self.heading);
        Point2::new(-c, -s)
    }
}

/// sin/cos that are exact at multiples of a right angle.
pub(crate) fn sin_cos(a: f64) -> (f64, f64) {
    let q = a / FRAC_PI_2;
    if (q - q.round()).abs() < 1e-12 {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        a.sin_cos()
    }
}

/// Raster geometry shared by map patches and observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    /// Pixels per side.
    pub size: usize,
    /// Meters per pixel.
    pub resolution: f64,
    /// Road stroke width, meters.
    pub stroke: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: 64,
            resolution: 1.0,
            stroke: 3.0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.size < 8 {
            return Err(RenderError::InvalidSpec("size must be >= 8".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(RenderError::InvalidSpec("resolution must be > 0".into()));
        }
        if !(self.stroke >= self.resolution) {
            return Err(RenderError::InvalidSpec("stroke must be >= resolution".into()));
        }
        Ok(())
    }
}

/// Square single-channel raster, row-major, values in [0,1] stored as 0..=255.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    size: usize,
    data: Vec<u8>,
}

impl Grid {
    pub fn zeros(size: usize) -> Self {
        Grid {
            size,
            data: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        f64::from(self.data[row * self.size + col]) / 255.0
    }

    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.data[row * self.size + col] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    /// Values as floats in [0,1], row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.size, self.size)?;
        w.write_all(&self.data)
    }

    pub fn read_pgm<R: Read>(mut r: R) -> Result<Self, RenderError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RenderError::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        pos += 1;
        let bad = |m: &str| RenderError::Format(m.to_string());
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected a P5 PGM with maxval 255"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        if w != h || buf.len() < pos + w * h {
            return Err(bad("PGM must be square and complete"));
        }
        Ok(Grid {
            size: w,
            data: buf[pos..pos + w * h].to_vec(),
        })
    }
}

/// A pose-centered, heading-up map raster (M_U when `route` is absent, M_R otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct MapPatch {
    pub spec: PatchSpec,
    pub center: Pose,
    pub drivable: Grid,
    pub route: Option<Grid>,
}

impl MapPatch {
    pub fn is_routed(&self) -> bool {
        self.route.is_some()
    }

    /// The same patch with the route channel dropped.
    pub fn unrouted(&self) -> MapPatch {
        MapPatch {
            route: None,
            ..self.clone()
        }
    }

    /// Writes `<stem>.drivable.pgm`, `<stem>.route.pgm` (routed only) and `<stem>.json`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<(), RenderError> {
        let mut f = std::fs::File::create(dir.join(format!("{stem}.drivable.pgm")))?;
        self.drivable.write_pgm(&mut f)?;
        if let Some(route) = &self.route {
            let mut f = std::fs::File::create(dir.join(format!("{stem}.route.pgm")))?;
            route.write_pgm(&mut f)?;
        }
        let sidecar = PatchSidecar {
            center: self.center,
            size: self.spec.size,
            resolution: self.spec.resolution,
            stroke: self.spec.stroke,
            routed: self.is_routed(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(())
    }

    pub fn read_files(dir: &Path, stem: &str) -> Result<MapPatch, RenderError> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let sidecar: PatchSidecar =
            serde_json::from_str(&text).map_err(|e| RenderError::Format(e.to_string()))?;
        let drivable = Grid::read_pgm(std::fs::File::open(
            dir.join(format!("{stem}.drivable.pgm")),
        )?)?;
        let route = if sidecar.routed {
            Some(Grid::read_pgm(std::fs::File::open(
                dir.join(format!("{stem}.route.pgm")),
            )?)?)
        } else {
            None
        };
        Ok(MapPatch {
            spec: PatchSpec {
                size: sidecar.size,
                resolution: sidecar.resolution,
                stroke: sidecar.stroke,
            },
            center: sidecar.center,
            drivable,
            route,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchSidecar {
    center: Pose,
    size: usize,
    resolution: f64,
    stroke: f64,
    routed: bool,
}

/// Continuous pixel coordinate `(col, row)` of a world point.
pub fn world_to_pixel(pose: &Pose, p: Point2, size: usize, resolution: f64) -> (f64, f64) {
    let d = p.sub(pose.position());
    let (s, c) = sin_cos(pose.heading);
    // rotate by −heading: forward maps to +y
    let xr = c * d.x + s * d.y;
    let yr = -s * d.x + c * d.y;
    let half = (size / 2) as f64;
    (half + xr / resolution, half - yr / resolution)
}

/// Inverse of [`world_to_pixel`].
pub fn pixel_to_world(pose: &Pose, col: f64, row: f64, size: usize, resolution: f64) -> Point2 {
    let half = (size / 2) as f64;
    let xr = (col - half) * resolution;
    let yr = (half - row) * resolution;
    let (s, c) = sin_cos(pose.heading);
    Point2::new(pose.x + c * xr - s * yr, pose.y + s * xr + c * yr)
}

fn stroke_edges<'a>(
    grid: &mut Grid,
    pose: &Pose,
    spec: &PatchSpec,
    polylines: impl Iterator<Item = &'a [Point2]>,
) {
    let n = spec.size;
    let radius = spec.stroke / 2.0;
    let tol = 1e-9;
    let margin = radius / spec.resolution + 1.0;
    for poly in polylines {
        for w in poly.windows(2) {
            let (c0, r0) = world_to_pixel(pose, w[0], n, spec.resolution);
            let (c1, r1) = world_to_pixel(pose, w[1], n, spec.resolution);
            let cmin = (c0.min(c1) - margin).floor().max(0.0);
            let cmax = (c0.max(c1) + margin).ceil().min(n as f64 - 1.0);
            let rmin = (r0.min(r1) - margin).floor().max(0.0);
            let rmax = (r0.max(r1) + margin).ceil().min(n as f64 - 1.0);
            if cmin > cmax || rmin > rmax {
                continue;
            }
            for row in rmin as usize..=rmax as usize {
                for col in cmin as usize..=cmax as usize {
                    let idx = row * n + col;
                    if grid.data[idx] == 255 {
                        continue;
                    }
                    let p = pixel_to_world(pose, col as f64, row as f64, n, spec.resolution);
                    if point_segment_distance(p, w[0], w[1]).0 <= radius + tol {
                        grid.data[idx] = 255;
                    }
                }
            }
        }
    }
}

/// Rasterizes the drivable channel and, when `route` is given, the route channel.
pub fn render_patch(
    graph: &RoadGraph,
    pose: &Pose,
    route: Option<&[EdgeId]>,
    spec: &PatchSpec,
) -> Result<MapPatch, RenderError> {
    spec.validate()?;
    let drivable = render_drivable(graph, pose, spec);
    let route = match route {
        None => None,
        Some(edges) => {
            if let Some(bad) = edges.iter().find(|e| e.0 >= graph.edges().len()) {
                return Err(RenderError::UnknownEdge(*bad));
            }
            let mut g = Grid::zeros(spec.size);
            stroke_edges(
                &mut g,
                pose,
                spec,
                edges.iter().map(|&e| graph.edge(e).polyline.as_slice()),
            );
            Some(g)
        }
    };
    Ok(MapPatch {
        spec: *spec,
        center: *pose,
        drivable,
        route,
    })
}

pub(crate) fn render_drivable(graph: &RoadGraph, pose: &Pose, spec: &PatchSpec) -> Grid {
    let mut g = Grid::zeros(spec.size);
    stroke_edges(
        &mut g,
        pose,
        spec,
        graph.edges().iter().map(|e| e.polyline.as_slice()),
    );
    g
}

/// A self-crossing-free stretch `[start, end)` of a route.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chart {
    pub edges: Vec<EdgeId>,
    pub start: usize,
    pub end: usize,
}

/// Splits a head-to-tail route into charts in which no node is visited twice.
///
/// Greedy left-to-right: a chart grows until the next edge would enter a node
/// the chart already visited. Entering the chart's own start node closes the
/// chart as a loop; entering any other visited node starts a new chart at
/// that edge.
pub fn split_charts(graph: &RoadGraph, route: &[EdgeId]) -> Result<Vec<Chart>, RenderError> {
    if let Some(bad) = route.iter().find(|e| e.0 >= graph.edges().len()) {
        return Err(RenderError::UnknownEdge(*bad));
    }
    for w in route.windows(2) {
        if graph.edge(w[0]).to != graph.edge(w[1]).from {
            return Err(RenderError::InvalidRoute {
                prev: w[0],
                next: w[1],
            });
        }
    }
    let mut charts = Vec::new();
    let mut start = 0;
    let mut visited: BTreeSet<NodeId> = BTreeSet::new();
    let mut first: Option<NodeId> = None;
    let mut i = 0;
    while i < route.len() {
        let e = graph.edge(route[i]);
        if first.is_none() {
            first = Some(e.from);
            visited.insert(e.from);
        }
        if !visited.contains(&e.to) {
            visited.insert(e.to);
            i += 1;
            continue;
        }
        if Some(e.to) == first {
            // closing a pure loop back to the chart's start
            charts.push(chart(route, start, i + 1));
            start = i + 1;
            i += 1;
        } else {
            charts.push(chart(route, start, i));
            start = i;
        }
        visited.clear();
        first = None;
    }
    if start < route.len() {
        charts.push(chart(route, start, route.len()));
    }
    Ok(charts)
}

fn chart(route: &[EdgeId], start: usize, end: usize) -> Chart {
    Chart {
        edges: route[start..end].to_vec(),
        start,
        end,
    }
}
