// index loops mirror the math they implement, and negated comparisons like
// `!(x > 0.0)` deliberately reject NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

//! Camera/LiDAR query-fusion 3D detection on synthetic desk-scale scenes.
//!
//! The crate builds modality-specific object queries (3D-point queries from a
//! LiDAR-side oracle detector, depth-distribution queries from per-view 2D
//! oracle detections), fuses them in an attention decoder with per-layer
//! image-query calibration and a temporal history queue, and trains the whole
//! stack with a Hungarian-matched detection objective — all in deterministic
//! f64 with tape-based reverse-mode gradients.

pub mod decoder;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod query_gen;
pub mod scenesim;
pub mod training;

pub use error::{Error, Result};
