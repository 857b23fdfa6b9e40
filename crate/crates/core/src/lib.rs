//! Event-based patch visual odometry: voxelization, feature extraction,
//! patch-graph correlation, recurrent updates and bundle adjustment, plus an
//! analytical cost model, sweep tooling and trajectory evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod correlation;
pub mod costsweep;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod nn;
pub mod patchifier;
pub mod pipeline;
pub mod update;

pub use error::{Error, Result};
