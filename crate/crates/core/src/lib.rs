//! Low-damage knowledge implanting on a desk-scale transformer.
//!
//! The pipeline has three stages:
//!
//! 1. **Analyze** ([`kva`]): path-integrated gradient attribution for every
//!    FFN knowledge output node (row of each down-projection) over a sample set.
//! 2. **Select** ([`selector`]): per-layer quotas of low-contribution nodes,
//!    chosen by per-sample rank and cross-sample frequency.
//! 3. **Implant** ([`trainer`]): fine-tune only the selected down-projection
//!    rows through a [`loki_layer::PartitionedDownProjection`].
//!
//! [`harness`] provides synthetic tasks, the forgetting metric and the
//! end-to-end experiment with its baselines.

pub mod error;
pub mod numerics;
pub mod model;
pub mod kva;
pub mod selector;
pub mod loki_layer;
pub mod trainer;
pub mod harness;
pub mod digest;

pub use error::{Error, Result};
