//! Hindsight trust-region policy optimisation for sparse-reward, goal-conditioned tasks.

pub mod agent;
pub mod diagnostics;
pub mod diffnet;
pub mod divergence;
pub mod envs;
pub mod experiment;
pub mod error;
pub mod hindsight;
pub mod rollout;
pub mod seeding;
pub mod trustregion;

pub use error::{Error, Result};
