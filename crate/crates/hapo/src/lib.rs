//! Critic-free multi-turn RL toolkit for grid-world object navigation.
//!
//! The centerpiece is horizon-adaptive advantage estimation: per-step
//! baselines come from a leave-one-out kernel regression over the rollout
//! buffer (Gaussian temporal kernel, with constant-kernel special cases)
//! instead of a learned critic. Around it: a deterministic grid-navigation
//! environment with geodesic reward shaping, a token-pruning state encoder,
//! a two-phase trainer (imitation warm-up, then dual-clip policy-gradient
//! updates with a KL anchor), an exactly-once rollout orchestrator, and
//! horizon-bucketed evaluation/ablation drivers.

pub mod advantage;
pub mod config;
pub mod encode;
pub mod error;
pub mod eval;
pub mod grid;
pub mod orchestrator;
pub mod parallel;
pub mod policy;
pub mod records;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use error::{HapoError, HapoResult};
