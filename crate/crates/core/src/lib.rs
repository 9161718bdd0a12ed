//! Model selection for contextual and linear bandits.
//!
//! Environments, regression oracles and the bandit algorithms (FALCON,
//! ACB, explore-then-commit, ALB-Dim and its linear base learners), plus an
//! experiment harness that writes per-round regret CSVs.

pub mod acb;
pub mod alb_dim;
pub mod domain;
pub mod envs;
pub mod error;
pub mod etc_algo;
pub mod falcon;
pub mod harness;
pub mod igw;
pub mod linear_base;
pub mod oracle;
pub mod rng;

pub use domain::{ActionIndex, InteractionRecord, PolicyDistribution, RegretLedger, RunOutcome, Segment};
pub use error::{Error, Result};
