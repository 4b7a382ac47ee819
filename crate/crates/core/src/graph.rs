//! The directed road network and its native line-oriented JSON format.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::geo::{point_segment_distance, GeoPoint, LocalProjection, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub i64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of an edge in [`RoadGraph::edges`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub usize);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    /// Great-circle length of the polyline, meters.
    pub weight: f64,
    pub polyline: Vec<Point2>,
}

impl Edge {
    /// Distance from `p` to the polyline and the arc-length position of the closest point.
    pub fn project(&self, p: Point2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        let mut s0 = 0.0;
        for w in self.polyline.windows(2) {
            let seg = w[0].dist(w[1]);
            let (d, t) = point_segment_distance(p, w[0], w[1]);
            if d < best.0 {
                best = (d, s0 + t * seg);
            }
            s0 += seg;
        }
        best
    }

    /// Planar length of the polyline.
    pub fn planar_length(&self) -> f64 {
        self.polyline.windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

/// Directed planar road network with great-circle edge weights.
///
/// Nodes live in a local metric frame about `origin`. Edges are appended
/// through [`RoadGraph::add_edge`], which derives the weight from the
/// polyline, so the weight/geometry invariant holds by construction.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    origin: GeoPoint,
    projection: LocalProjection,
    nodes: BTreeMap<NodeId, Point2>,
    edges: Vec<Edge>,
    out: BTreeMap<NodeId, Vec<EdgeId>>,
}

impl PartialEq for RoadGraph {
    fn eq(&self, other: &Self) -> bool {
        self.origin == other.origin && self.nodes == other.nodes && self.edges == other.edges
    }
}

impl RoadGraph {
    pub fn new(origin: GeoPoint) -> Self {
        RoadGraph {
            origin,
            projection: LocalProjection::new(origin),
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            out: BTreeMap::new(),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, Point2> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id.0]
    }

    pub fn node(&self, id: NodeId) -> Option<Point2> {
        self.nodes.get(&id).copied()
    }

    pub fn edge_ids(&self) -> impl Iterator<Item = EdgeId> + '_ {
        (0..self.edges.len()).map(EdgeId)
    }

    pub fn out_edges(&self, node: NodeId) -> &[EdgeId] {
        self.out.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of distinct neighbours (in either direction) of a node.
    pub fn degree(&self, node: NodeId) -> usize {
        let mut nbrs: Vec<NodeId> = self
            .edges
            .iter()
            .filter_map(|e| {
                if e.from == node {
                    Some(e.to)
                } else if e.to == node {
                    Some(e.from)
                } else {
                    None
                }
            })
            .collect();
        nbrs.sort();
        nbrs.dedup();
        nbrs.len()
    }

    pub fn add_node(&mut self, id: NodeId, at: Point2) {
        self.nodes.insert(id, at);
    }

    /// Adds a straight edge between two existing nodes.
    pub fn add_straight_edge(&mut self, from: NodeId, to: NodeId) -> Result<EdgeId, GraphError> {
        let a = self.node(from).ok_or(GraphError::UnknownNode(from))?;
        let b = self.node(to).ok_or(GraphError::UnknownNode(to))?;
        self.add_edge(from, to, vec![a, b])
    }

    /// Adds a directed edge. The polyline's endpoints are snapped to the node
    /// coordinates and the weight is its great-circle length.
    pub fn add_edge(
        &mut self,
        from: NodeId,
        to: NodeId,
        mut polyline: Vec<Point2>,
    ) -> Result<EdgeId, GraphError> {
        let a = self.node(from).ok_or(GraphError::UnknownNode(from))?;
        let b = self.node(to).ok_or(GraphError::UnknownNode(to))?;
        if polyline.len() < 2 {
            return Err(GraphError::Invariant(format!(
                "edge {from}->{to} needs at least two polyline points"
            )));
        }
        polyline[0] = a;
        let last = polyline.len() - 1;
        polyline[last] = b;
        let weight = self.projection.polyline_length(&polyline);
        if !(weight > 0.0) {
            return Err(GraphError::Invariant(format!(
                "edge {from}->{to} has non-positive length"
            )));
        }
        let id = EdgeId(self.edges.len());
        self.edges.push(Edge {
            from,
            to,
            weight,
            polyline,
        });
        self.out.entry(from).or_default().push(id);
        Ok(id)
    }

    /// Adds `a→b` and `b→a` with mirrored polylines.
    pub fn add_two_way(
        &mut self,
        a: NodeId,
        b: NodeId,
        polyline: Vec<Point2>,
    ) -> Result<(EdgeId, EdgeId), GraphError> {
        let mut rev = polyline.clone();
        rev.reverse();
        Ok((self.add_edge(a, b, polyline)?, self.add_edge(b, a, rev)?))
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<(), GraphError> {
        self.origin.validate()?;
        for (i, e) in self.edges.iter().enumerate() {
            let a = self.node(e.from).ok_or(GraphError::UnknownNode(e.from))?;
            let b = self.node(e.to).ok_or(GraphError::UnknownNode(e.to))?;
            if e.polyline.len() < 2 || e.polyline[0] != a || *e.polyline.last().unwrap() != b {
                return Err(GraphError::Invariant(format!(
                    "edge {i} polyline endpoints do not match its nodes"
                )));
            }
            let len = self.projection.polyline_length(&e.polyline);
            if !(e.weight > 0.0) || ((e.weight - len) / len).abs() > 1e-6 {
                return Err(GraphError::Invariant(format!(
                    "edge {i} weight {} differs from polyline length {len}",
                    e.weight
                )));
            }
        }
        Ok(())
    }

    /// Nearest edge to a point, ties broken by lowest id.
    pub fn nearest_edge(&self, p: Point2) -> Option<(EdgeId, f64)> {
        let mut best: Option<(EdgeId, f64)> = None;
        for id in self.edge_ids() {
            let (d, _) = self.edge(id).project(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        best
    }

    /// Minimal-weight directed route from `src` to `dst` as an ordered edge list.
    ///
    /// Dijkstra with the lowest node id expanded first among equal distances
    /// and the lowest edge id kept among equal-weight relaxations.
    pub fn shortest_route(&self, src: NodeId, dst: NodeId) -> Result<Vec<EdgeId>, GraphError> {
        for n in [src, dst] {
            if !self.nodes.contains_key(&n) {
                return Err(GraphError::UnknownNode(n));
            }
        }
        if src == dst {
            return Ok(Vec::new());
        }
        let (_, pred) = self.dijkstra(src, f64::INFINITY, Some(dst));
        if !pred.contains_key(&dst) {
            return Err(GraphError::NoRoute { from: src, to: dst });
        }
        let mut route = Vec::new();
        let mut cur = dst;
        while cur != src {
            let e = pred[&cur];
            route.push(e);
            cur = self.edges[e.0].from;
        }
        route.reverse();
        Ok(route)
    }

    /// Shortest distances from `src` to every node within `limit` meters.
    pub fn distances_within(&self, src: NodeId, limit: f64) -> BTreeMap<NodeId, f64> {
        self.dijkstra(src, limit, None).0
    }

    fn dijkstra(
        &self,
        src: NodeId,
        limit: f64,
        target: Option<NodeId>,
    ) -> (BTreeMap<NodeId, f64>, BTreeMap<NodeId, EdgeId>) {
        let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut pred: BTreeMap<NodeId, EdgeId> = BTreeMap::new();
        let mut done: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(src, 0.0);
        heap.push(Frontier { dist: 0.0, node: src });
        while let Some(Frontier { dist: d, node }) = heap.pop() {
            if done.contains_key(&node) || d > dist[&node] {
                continue;
            }
            done.insert(node, d);
            if Some(node) == target {
                break;
            }
            for &eid in self.out_edges(node) {
                let e = &self.edges[eid.0];
                let nd = d + e.weight;
                if nd > limit || done.contains_key(&e.to) {
                    continue;
                }
                let better = match dist.get(&e.to) {
                    None => true,
                    Some(&old) => nd < old || (nd == old && eid < pred[&e.to]),
                };
                if better {
                    dist.insert(e.to, nd);
                    pred.insert(e.to, eid);
                    heap.push(Frontier { dist: nd, node: e.to });
                }
            }
        }
        (done, pred)
    }

    /// Serializes to the native line-oriented JSON form.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), GraphError> {
        let line = |r: &Record| serde_json::to_string(r).expect("graph records serialize");
        writeln!(w, "{}", line(&Record::Origin(self.origin)))?;
        for (&id, p) in &self.nodes {
            writeln!(w, "{}", line(&Record::Node { id, x: p.x, y: p.y }))?;
        }
        for e in &self.edges {
            writeln!(w, "{}", line(&Record::Edge(e.clone())))?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 JSON")
    }

    /// Parses the native line-oriented JSON form; the origin record comes first.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, GraphError> {
        let mut graph: Option<RoadGraph> = None;
        let mut pending_edges = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| GraphError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            match (rec, graph.as_mut()) {
                (Record::Origin(o), None) => {
                    o.validate()?;
                    graph = Some(RoadGraph::new(o));
                }
                (Record::Origin(_), Some(_)) => {
                    return Err(GraphError::Format {
                        line: i + 1,
                        message: "duplicate origin record".into(),
                    })
                }
                (_, None) => {
                    return Err(GraphError::Format {
                        line: i + 1,
                        message: "origin record must come first".into(),
                    })
                }
                (Record::Node { id, x, y }, Some(g)) => g.add_node(id, Point2::new(x, y)),
                (Record::Edge(e), Some(_)) => pending_edges.push(e),
            }
        }
        let mut g = graph.ok_or(GraphError::Format {
            line: 0,
            message: "missing origin record".into(),
        })?;
        for e in pending_edges {
            let id = EdgeId(g.edges.len());
            g.out.entry(e.from).or_default().push(id);
            g.edges.push(e);
        }
        g.validate()?;
        Ok(g)
    }

    pub fn from_jsonl_str(s: &str) -> Result<Self, GraphError> {
        Self::read_jsonl(s.as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Origin(GeoPoint),
    Node { id: NodeId, x: f64, y: f64 },
    Edge(Edge),
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    node: NodeId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, node id)
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
