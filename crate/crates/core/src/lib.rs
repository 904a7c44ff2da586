//! Cooperative training of heterogeneous neural networks that share a common stem.
//!
//! Each simulated device trains the branch of a [`topology::BranchedTopology`] that fits its
//! resources. Only the parameters of the shared part cross the device/coordinator boundary,
//! and the coordinator merges them with per-device weights (see [`protocol`]).
//!
//! Module map:
//!
//! - [`nn`]: tensors, layers with paired forward/backward, losses, optimizers, gradient checks.
//! - [`topology`]: share-first and cascaded topologies and their shared/local parameter split.
//! - [`protocol`]: device sync, synchronous and asynchronous coordinators, merge weights, wire frames.
//! - [`learners`]: double deep Q-learning with replay and the round-based supervised trainer.
//! - [`worlds`]: synthetic and CIFAR-10 data, shard partitioning, and a gridworld environment.
//! - [`harness`]: experiment configs, run modes, metrics CSVs, checkpoints.

pub mod error;
pub mod harness;
pub mod learners;
pub mod nn;
pub mod parallel;
pub mod protocol;
pub mod rng;
pub mod topology;
pub mod worlds;

pub use error::{Error, Result};
