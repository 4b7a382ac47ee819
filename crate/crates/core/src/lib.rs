//! Probabilistic map-conditioned steering and pose localization on road networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`geo`], [`graph`], [`osm`], [`world`]: road networks (parsed or synthetic)
//!   with great-circle edge weights and shortest routes.
//! * [`render`]: heading-up map patches (unrouted and routed) and route charts.
//! * [`sim`]: observations, the pure-pursuit driver, unicycle dynamics, traces
//!   and GPS corruption.
//! * [`mdn`]: the mixture-density steering model, its loss, exact gradients and
//!   training.
//! * [`belief`]: pose beliefs, posterior updates, statistics, calibration and
//!   place recognition.
//! * [`matching`]: offline HMM map matching.

// Negated float comparisons are deliberate throughout: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod error;
pub mod geo;
pub mod graph;
pub mod matching;
pub mod mdn;
pub mod osm;
pub mod render;
pub mod sim;
pub mod world;

pub use error::{BeliefError, GraphError, MatchError, ModelError, RenderError, SimError};
pub use geo::{GeoPoint, Point2};
pub use graph::{Edge, EdgeId, NodeId, RoadGraph};
pub use render::{MapPatch, PatchSpec, Pose};

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Deterministic generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Creates the crate's generator from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
