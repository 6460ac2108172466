//! Grid-based 2D submap joining.
//!
//! Local occupancy submaps are fused into one global log-odds map by jointly
//! optimizing the submap frames and the global map. The map block of the
//! Gauss-Newton normal equations is diagonal, so the map is eliminated in
//! closed form and each iteration only solves for the frame increments.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod builder;
pub mod error;
pub mod eval;
pub mod grid;
pub mod joiner;
pub mod pipeline;
pub mod raytrace;
pub mod se2;
pub mod sim;

pub use error::{Error, Result};
