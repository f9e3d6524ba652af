//! Computation allocation for multi-stage (retrieval → pre-ranking → ranking)
//! recommender pipelines.
//!
//! The crate contains a seeded pipeline simulator, a load-test cost bench,
//! cooperative multi-agent Q-learning with a monotone mixing network, the
//! baseline learners it is compared against, the per-request Lagrangian
//! allocator, revenue–cost balancing controllers and evaluation metrics.

pub mod allocator;
pub mod awrq;
pub mod balancer;
pub mod baselines;
pub mod costbench;
pub mod envsim;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod mixer;
pub mod nncore;
pub mod qtable;
pub mod replay;

pub use error::{Error, Result};
