//! Particle sampling from densities truncated to `{g ≤ 0}` by a learned
//! interior velocity field and a fixed inward push outside the domain.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod domains;
pub mod engine;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod targets;

pub use error::{Error, Result};
