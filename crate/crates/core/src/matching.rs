//! Offline HMM map matching of noisy position fixes to road edges.
//!
//! Emissions are Gaussian in the perpendicular distance to a candidate edge.
//! Transitions penalize the mismatch between the on-road routing distance and
//! the straight-line distance between consecutive fixes. The most likely
//! candidate sequence is found by log-domain Viterbi.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::MatchError;
use crate::geo::Point2;
use crate::graph::{EdgeId, NodeId, RoadGraph};
use crate::sim::RoutePath;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// GPS emission standard deviation, m.
    pub sigma_emit: f64,
    /// Transition sharpness.
    pub beta: f64,
    /// Candidate search radius, m.
    pub radius: f64,
    /// Fixes closer than this to the previously kept fix are not scored by
    /// the HMM; they are placed on the matched route afterwards. Zero scores
    /// every fix. Defaults to twice `sigma_emit`.
    pub min_spacing: f64,
    /// Half-width, in samples, of a moving average applied to the fixes
    /// before matching. Zero matches the raw fixes.
    pub presmooth: usize,
    /// Half-width, in samples, of the moving average applied to route
    /// positions when placing fixes on the matched route.
    pub smoothing: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            sigma_emit: 4.07,
            beta: 3.0,
            radius: 30.0,
            min_spacing: 2.0 * 4.07,
            presmooth: 10,
            smoothing: 10,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        let mut bad = Vec::new();
        if !(self.sigma_emit > 0.0) {
            bad.push("sigma_emit must be > 0");
        }
        if !(self.beta > 0.0) {
            bad.push("beta must be > 0");
        }
        if !(self.radius > 0.0) {
            bad.push("radius must be > 0");
        }
        if !(self.min_spacing >= 0.0) {
            bad.push("min_spacing must be >= 0");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(MatchError::Config(bad.join("; ")))
        }
    }
}

/// A road position a fix may have come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub edge: EdgeId,
    /// Perpendicular distance from the fix, m.
    pub distance: f64,
    /// Arc length along the edge polyline, m.
    pub arc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Matched edge for every fix.
    pub edges: Vec<EdgeId>,
    /// Candidate sets, for diagnostics.
    pub candidates: Vec<Vec<Candidate>>,
    /// Indices of the fixes scored by the HMM.
    pub scored: Vec<usize>,
}

/// Edges within `radius` of `p`, ordered by edge id.
pub fn candidates(graph: &RoadGraph, p: Point2, radius: f64) -> Vec<Candidate> {
    graph
        .edge_ids()
        .filter_map(|id| {
            let (distance, arc) = graph.edge(id).project(p);
            (distance <= radius).then_some(Candidate {
                edge: id,
                distance,
                arc,
            })
        })
        .collect()
}

/// Most likely state sequence.
///
/// `emission[t][i]` is the log emission of state i at step t and
/// `transition(t, i, j)` the log probability of moving from state i at t−1 to
/// state j at t. Ties go to the lowest state index.
pub fn viterbi<F>(emission: &[Vec<f64>], mut transition: F) -> Vec<usize>
where
    F: FnMut(usize, usize, usize) -> f64,
{
    if emission.is_empty() {
        return Vec::new();
    }
    let mut score = emission[0].clone();
    let mut back: Vec<Vec<usize>> = vec![Vec::new()];
    for (t, row) in emission.iter().enumerate().skip(1) {
        let mut next = vec![f64::NEG_INFINITY; row.len()];
        let mut from = vec![0usize; row.len()];
        for (j, e) in row.iter().enumerate() {
            for (i, s) in score.iter().enumerate() {
                let v = s + transition(t, i, j);
                if v > next[j] {
                    next[j] = v;
                    from[j] = i;
                }
            }
            next[j] += e;
        }
        score = next;
        back.push(from);
    }
    let mut best = 0;
    for (i, s) in score.iter().enumerate() {
        if *s > score[best] {
            best = i;
        }
    }
    let mut path = vec![best; emission.len()];
    for t in (1..emission.len()).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Total log score of one state sequence under the same model.
pub fn path_score<F>(emission: &[Vec<f64>], path: &[usize], mut transition: F) -> f64
where
    F: FnMut(usize, usize, usize) -> f64,
{
    let mut s = emission[0][path[0]];
    for t in 1..path.len() {
        s += transition(t, path[t - 1], path[t]) + emission[t][path[t]];
    }
    s
}

fn log_emission(distance: f64, sigma: f64) -> f64 {
    let z = distance / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

/// On-road distance between two candidates, capped at `cap`.
fn routing_distance(
    graph: &RoadGraph,
    a: &Candidate,
    b: &Candidate,
    from_node: &BTreeMap<NodeId, f64>,
    cap: f64,
) -> f64 {
    if a.edge == b.edge && b.arc >= a.arc {
        return (b.arc - a.arc).min(cap);
    }
    let ea = graph.edge(a.edge);
    let eb = graph.edge(b.edge);
    let rest = ea.planar_length() - a.arc;
    match from_node.get(&eb.from) {
        Some(d) => (rest + d + b.arc).min(cap),
        None => cap,
    }
}

/// Matches a trace of noisy positions to edges, one edge per fix.
pub fn match_trace(graph: &RoadGraph, fixes: &[Point2], cfg: &MatchConfig) -> Result<MatchResult, MatchError> {
    cfg.validate()?;
    if fixes.is_empty() {
        return Err(MatchError::EmptyTrace);
    }
    let smoothed;
    let fixes = if cfg.presmooth > 0 {
        smoothed = moving_average(fixes, cfg.presmooth);
        &smoothed[..]
    } else {
        fixes
    };
    let cands: Vec<Vec<Candidate>> = fixes.iter().map(|&p| candidates(graph, p, cfg.radius)).collect();
    if let Some(i) = cands.iter().position(|c| c.is_empty()) {
        return Err(MatchError::NoCandidate(i));
    }

    let mut scored = vec![0];
    for i in 1..fixes.len() {
        if fixes[i].dist(fixes[*scored.last().unwrap()]) >= cfg.min_spacing {
            scored.push(i);
        }
    }
    if *scored.last().unwrap() != fixes.len() - 1 {
        scored.push(fixes.len() - 1);
    }

    let emission: Vec<Vec<f64>> = scored
        .iter()
        .map(|&i| cands[i].iter().map(|c| log_emission(c.distance, cfg.sigma_emit)).collect())
        .collect();

    // log transition tables, one per scored step
    let mut trans: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for t in 1..scored.len() {
        let (pi, ci) = (scored[t - 1], scored[t]);
        let straight = fixes[pi].dist(fixes[ci]);
        let denom = straight.max(1e-3);
        let cap = 4.0 * straight;
        let mut reach: BTreeMap<NodeId, BTreeMap<NodeId, f64>> = BTreeMap::new();
        let mut table = Vec::with_capacity(cands[pi].len());
        for a in &cands[pi] {
            let to = graph.edge(a.edge).to;
            let from_node = reach.entry(to).or_insert_with(|| graph.distances_within(to, cap));
            table.push(
                cands[ci]
                    .iter()
                    .map(|b| {
                        let r = routing_distance(graph, a, b, from_node, cap);
                        -cfg.beta * (r - straight).abs() / denom
                    })
                    .collect::<Vec<f64>>(),
            );
        }
        trans.push(table);
    }
    let states = viterbi(&emission, |t, i, j| trans[t][i][j]);
    let picks: Vec<Candidate> = states
        .iter()
        .zip(&scored)
        .map(|(&s, &i)| cands[i][s])
        .collect();

    let edges = if scored.len() == fixes.len() {
        picks.iter().map(|c| c.edge).collect()
    } else {
        place_on_route(graph, fixes, &scored, &picks, cfg.smoothing)?
    };
    Ok(MatchResult {
        edges,
        candidates: cands,
        scored,
    })
}

fn moving_average(fixes: &[Point2], half: usize) -> Vec<Point2> {
    let n = fixes.len();
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + half).min(n - 1));
            let sum = fixes[a..=b].iter().fold(Point2::default(), |acc, &p| acc.add(p));
            sum.scale(1.0 / (b - a + 1) as f64)
        })
        .collect()
}

/// Joins the matched fixes into one route and assigns every fix a monotone
/// position along it.
fn place_on_route(
    graph: &RoadGraph,
    fixes: &[Point2],
    scored: &[usize],
    picks: &[Candidate],
    smoothing: usize,
) -> Result<Vec<EdgeId>, MatchError> {
    let mut route = vec![picks[0].edge];
    // route index of each scored fix's edge
    let mut at = vec![0usize];
    for w in picks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.edge == b.edge && b.arc >= a.arc {
            at.push(*at.last().unwrap());
            continue;
        }
        let (ea, eb) = (graph.edge(a.edge), graph.edge(b.edge));
        let link = graph
            .shortest_route(ea.to, eb.from)
            .map_err(|_| MatchError::BrokenRoute {
                index: route.len(),
                prev: a.edge,
                next: b.edge,
            })?;
        route.extend(link);
        route.push(b.edge);
        at.push(route.len() - 1);
    }
    let path = RoutePath::new(graph, &route).map_err(|_| MatchError::BrokenRoute {
        index: 0,
        prev: route[0],
        next: route[0],
    })?;
    let anchors: Vec<f64> = picks
        .iter()
        .zip(&at)
        .map(|(c, &k)| path.edge_start(k) + c.arc)
        .collect();

    let mut arcs = vec![0.0; fixes.len()];
    for (k, w) in scored.windows(2).enumerate() {
        let (lo, hi) = (anchors[k], anchors[k + 1].max(anchors[k]));
        arcs[w[0]] = anchors[k];
        for i in w[0] + 1..w[1] {
            arcs[i] = path.project_range(fixes[i], lo, hi).1.clamp(lo, hi);
        }
    }
    arcs[*scored.last().unwrap()] = *anchors.last().unwrap();

    let n = arcs.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(smoothing), (i + smoothing).min(n - 1));
            arcs[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let mut hi = f64::NEG_INFINITY;
    Ok(smooth
        .into_iter()
        .map(|s| {
            hi = hi.max(s);
            path.edges()[path.edge_index_at(hi)]
        })
        .collect())
}

/// Collapses repeated edges and checks the result is connected head to tail.
pub fn route_edges(graph: &RoadGraph, matched: &[EdgeId]) -> Result<Vec<EdgeId>, MatchError> {
    let mut out: Vec<EdgeId> = Vec::new();
    for &e in matched {
        if out.last() == Some(&e) {
            continue;
        }
        if let Some(&prev) = out.last() {
            if graph.edge(prev).to != graph.edge(e).from {
                return Err(MatchError::BrokenRoute {
                    index: out.len(),
                    prev,
                    next: e,
                });
            }
        }
        out.push(e);
    }
    Ok(out)
}
