use thiserror::Error;

use crate::graph::{EdgeId, NodeId};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed XML at line {line}, column {column}: {message}")]
    Xml {
        line: u32,
        column: u32,
        message: String,
    },
    #[error("way {way} references missing node {node}")]
    DanglingReference { way: i64, node: i64 },
    #[error("way {way} has fewer than two node references")]
    DegenerateWay { way: i64 },
    #[error("invalid attribute `{attr}` on <{element}>: {message}")]
    BadAttribute {
        element: String,
        attr: String,
        message: String,
    },
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("world configuration error: {0}")]
    Config(String),
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("no route from {from} to {to}")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("graph format error on line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error("route is not connected between edges {prev} and {next}")]
    InvalidRoute { prev: EdgeId, next: EdgeId },
    #[error("edge {0} is not in the graph")]
    UnknownEdge(EdgeId),
    #[error("patch format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("pose is {distance:.2} m from the route (limit {limit} m)")]
    OffRoute { distance: f64, limit: f64 },
    #[error("simulation diverged at t = {t:.2} s: {distance:.2} m from the route")]
    Diverged { t: f64, distance: f64 },
    #[error("invalid simulation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("channel mismatch: {0}")]
    ChannelMismatch(&'static str),
    #[error("input grid is {got}x{got}, model expects {expected}x{expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("non-finite value in the {0} term")]
    NumericOverflow(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss} vs initial {initial}")]
    TrainingDiverged { epoch: usize, loss: f64, initial: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("all hypothesis likelihoods underflowed; prior returned unchanged")]
    DegenerateUpdate { prior: crate::belief::PoseBelief },
    #[error("invalid belief input: {0}")]
    Invalid(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("sample {0} has no candidate edge within the search radius")]
    NoCandidate(usize),
    #[error("empty trace")]
    EmptyTrace,
    #[error("invalid match configuration: {0}")]
    Config(String),
    #[error("route broken between edge {prev} and edge {next} (index {index})")]
    BrokenRoute {
        index: usize,
        prev: EdgeId,
        next: EdgeId,
    },
}
