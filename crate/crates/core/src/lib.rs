//! Cost-sensitive feature acquisition for nearest-neighbour retrieval.
//!
//! Given a complete training set, a per-feature acquisition cost and a budget,
//! the crate learns which features of a new, mostly unknown point are worth
//! revealing so that its nearest clusters and neighbours can still be found.
//!
//! Two policies are provided: [`cbctree`], a cost-balancing clustering tree,
//! and [`dqn`], a dueling double deep Q-network trained against the
//! environment in [`env`]. [`eval`] compares both against a random agent.

pub mod cbctree;
pub mod cluster;
pub mod data;
pub mod dqn;
pub mod env;
mod error;
pub mod eval;
mod features;
pub mod provenance;
pub mod synthetic;

pub use error::{Error, Result};
pub use features::FeatureSet;

/// Slack used whenever a cost is compared against a budget, so that e.g.
/// three features at 0.1 fit into a budget of 0.3.
pub const COST_TOLERANCE: f64 = 1e-9;
