use std::path::PathBuf;

use thiserror::Error;

use topo_nav_core::{BeliefError, GraphError, MatchError, ModelError, RenderError, SimError};

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Every violated field, one message each.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("missing metric series {0:?}")]
    MissingSeries(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
