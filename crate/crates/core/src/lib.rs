//! Deterministic simulator for decentralized training over label-skewed
//! partitions, with BSP, Gaia, FederatedAveraging and Deep Gradient
//! Compression synchronization and the SkewScout communication controller.

pub mod codec;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod scalar;
pub mod scout;
pub mod sim;
pub mod sync;
pub mod testkit;

pub use error::{Error, Result};
pub use par::Exec;
pub use scalar::{Precision, Scalar};
