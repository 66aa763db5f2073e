//! Dynamic routing over parallel exponential servers learned by restrained
//! semi-gradient SARSA(0) with linear basis functions.
//!
//! - [`queueing`]: the embedded jump chain and its simulator.
//! - [`features`]: basis functions, Q̂ and the basis growth checker.
//! - [`policy`]: softmax, greedy, JSQ and Bernoulli routing.
//! - [`learner`]: costs, step sizes, the restrained update and training loop.
//! - [`oracle`]: exact computations on a truncated state space.
//! - [`diagnostics`]: drift certificates and trajectory statistics.
//! - [`harness`]: run configuration, replications, comparison tables, I/O.

pub mod diagnostics;
pub mod error;
pub mod features;
pub mod harness;
pub mod learner;
pub mod oracle;
pub mod policy;
pub mod queueing;
pub mod rng;

pub use error::{Error, Result};
