//! Synchronization of shared parameters between devices and a coordinator.
//!
//! Devices accumulate (or locally apply) updates, send the shared slice of their update at
//! sync points, and adopt the coordinator's merged shared parameters. Local parameters never
//! leave the device.

pub mod channel;
pub mod coordinator;
pub mod device;
pub mod merge;
pub mod message;

pub use channel::{spawn_coordinator, DeviceEndpoint};
pub use coordinator::{Coordinator, CoordinatorMode};
pub use device::{CoordinatorLink, DeviceMode, DeviceState, InlineLink};
pub use merge::{compute_merge_weights, merge_deltas, MergeWeights, WeightingSource};
pub use message::{decode_frame, encode_frame, DeviceId, RealWidth, SyncMessage};
