//! OSM XML subset ingestion.
//!
//! Only `<node id lat lon>`, `<way>`, `<nd ref>` and the way's `oneway` tag
//! are interpreted. Ways are split at junctions (nodes shared by several ways)
//! and at their own endpoints; each piece becomes one edge whose polyline runs
//! through the intermediate node coordinates.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::GraphError;
use crate::geo::{GeoPoint, LocalProjection};
use crate::graph::{NodeId, RoadGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Both,
    Forward,
    Backward,
}

struct Way {
    id: i64,
    refs: Vec<i64>,
    direction: Direction,
}

fn attr<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str, GraphError> {
    node.attribute(name).ok_or_else(|| GraphError::BadAttribute {
        element: node.tag_name().name().to_string(),
        attr: name.to_string(),
        message: "missing".into(),
    })
}

fn num<T: std::str::FromStr>(node: roxmltree::Node<'_, '_>, name: &str) -> Result<T, GraphError> {
    let raw = attr(node, name)?;
    raw.parse().map_err(|_| GraphError::BadAttribute {
        element: node.tag_name().name().to_string(),
        attr: name.to_string(),
        message: format!("cannot parse {raw:?}"),
    })
}

/// Parses an OSM XML document into a [`RoadGraph`] projected about `origin`.
pub fn parse_osm(document: &str, origin: GeoPoint) -> Result<RoadGraph, GraphError> {
    origin.validate()?;
    let doc = roxmltree::Document::parse(document).map_err(|e| {
        let pos = e.pos();
        GraphError::Xml {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;

    let mut coords: BTreeMap<i64, GeoPoint> = BTreeMap::new();
    let mut ways = Vec::new();
    for el in doc.root_element().children().filter(|n| n.is_element()) {
        match el.tag_name().name() {
            "node" => {
                let id: i64 = num(el, "id")?;
                let p = GeoPoint::new(num(el, "lat")?, num(el, "lon")?)?;
                coords.insert(id, p);
            }
            "way" => {
                let id: i64 = num(el, "id")?;
                let mut refs = Vec::new();
                let mut direction = Direction::Both;
                for child in el.children().filter(|n| n.is_element()) {
                    match child.tag_name().name() {
                        "nd" => refs.push(num::<i64>(child, "ref")?),
                        "tag" if child.attribute("k") == Some("oneway") => {
                            direction = match child.attribute("v") {
                                Some("yes" | "true" | "1") => Direction::Forward,
                                Some("-1" | "reverse") => Direction::Backward,
                                _ => Direction::Both,
                            };
                        }
                        _ => {}
                    }
                }
                ways.push(Way { id, refs, direction });
            }
            _ => {}
        }
    }

    for way in &mut ways {
        if let Some(&missing) = way.refs.iter().find(|r| !coords.contains_key(r)) {
            return Err(GraphError::DanglingReference {
                way: way.id,
                node: missing,
            });
        }
        way.refs.dedup();
        if way.refs.len() < 2 {
            return Err(GraphError::DegenerateWay { way: way.id });
        }
    }

    // a node becomes a graph vertex if it ends a way or is shared between ways
    // (or appears twice within one way)
    let mut uses: BTreeMap<i64, usize> = BTreeMap::new();
    let mut vertices: BTreeSet<i64> = BTreeSet::new();
    for way in &ways {
        vertices.insert(way.refs[0]);
        vertices.insert(*way.refs.last().unwrap());
        for r in &way.refs {
            *uses.entry(*r).or_default() += 1;
        }
    }
    vertices.extend(uses.iter().filter(|(_, &n)| n > 1).map(|(&id, _)| id));

    let projection = LocalProjection::new(origin);
    let mut graph = RoadGraph::new(origin);
    for &v in &vertices {
        graph.add_node(NodeId(v), projection.forward(coords[&v]));
    }

    for way in &ways {
        let mut start = 0;
        for i in 1..way.refs.len() {
            if !vertices.contains(&way.refs[i]) {
                continue;
            }
            let piece = &way.refs[start..=i];
            let polyline: Vec<_> = piece.iter().map(|r| projection.forward(coords[r])).collect();
            let (a, b) = (NodeId(piece[0]), NodeId(piece[piece.len() - 1]));
            if matches!(way.direction, Direction::Both | Direction::Forward) {
                graph.add_edge(a, b, polyline.clone())?;
            }
            if matches!(way.direction, Direction::Both | Direction::Backward) {
                let mut rev = polyline;
                rev.reverse();
                graph.add_edge(b, a, rev)?;
            }
            start = i;
        }
    }
    Ok(graph)
}
