// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod curriculum;
pub mod error;
pub mod experiments;
pub mod locations;
pub mod output;
pub mod report;

pub use error::HarnessError;
