//! Data sources and environments.

pub mod cifar;
pub mod dataset;
pub mod gridworld;
pub mod partition;

pub use cifar::{load_cifar10_binary, write_cifar10_binary, CIFAR_RECORD_BYTES};
pub use dataset::{generate_synthetic_dataset, Dataset, Provenance, SyntheticSpec};
pub use gridworld::{Action, GridConfig, GridWorld, Step};
pub use partition::{partition_dataset, split_train_validation, DataPartition, Shard};
