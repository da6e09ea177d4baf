//! Offline meta-reinforcement learning with flow-refined task inference and
//! successor-feature critics corrected by a return-driven bandit.

pub mod aco;
pub mod envs;
pub mod error;
pub mod persistence;
pub mod policy;
pub mod sf_critic;
pub mod task_inference;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
