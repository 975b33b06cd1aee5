//! Decentralized consensus optimization with a learned per-round parameter policy.
//!
//! A network of nodes cooperatively minimizes a sum of per-node convex
//! objectives by alternating local proximal subproblem solves with
//! gossip-style neighbor averaging. The three penalty parameters of the
//! per-node subproblem are re-selected every communication round, either by
//! a fixed hand-tuned rule or by a small Gaussian policy network trained
//! with PPO against the distance to the centralized solution.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! experiment pipeline uses the [`Real`] alias throughout.

pub mod baselines;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod problems;
pub mod prox;
pub mod rl;
pub mod scalar;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the experiment pipeline.
pub type Real = f64;
