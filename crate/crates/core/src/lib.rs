//! Reward learning from pairwise trajectory preferences, with auxiliary
//! triplet and action-distance losses that draw on unlabeled trajectories.
//!
//! The crate is organized around the training loop in [`trainer`]:
//! [`envs`] produces trajectories, [`oracle`] labels pairs of them,
//! [`reward_model`] fits a reward to the labels, [`agent`] learns a policy
//! on the learned reward and [`eval`] scores it against the true one.

pub mod agent;
pub mod approximator;
pub mod envs;
pub mod eval;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod reward_model;
pub mod trainer;
