//! Agent-based simulation of an urban ride-hailing market offering solo
//! rides alone or alongside pooled rides.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod charts;
pub mod demand;
pub mod engine;
pub mod experiment;
pub mod matching;
pub mod metrics;
pub mod netgraph;
mod par;
pub mod pricing;
pub mod scenario;

pub use par::with_jobs;
