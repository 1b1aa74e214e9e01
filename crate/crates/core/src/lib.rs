//! Zero-shot volumetric CT super-resolution.
//!
//! The pipeline has two halves:
//!
//! * [`ddnm`] upsamples each low-resolution X-ray projection with a diffusion
//!   sampler constrained to the null space of a mean-pooling operator, picking
//!   the start step per projection.
//! * [`trainer`] fits a signed-density Gaussian field ([`field`]) to the
//!   residual between the upsampled projections and reprojections of the
//!   cubic-upsampled low-resolution volume, rendering through the
//!   differentiable [`rasterizer`].
//!
//! [`volume`], [`geometry`] and [`projector`] provide the voxel grids,
//! cone-beam scanner model and ray-marching projector shared by both halves.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ddnm;
pub mod error;
pub mod field;
pub mod geometry;
pub mod hashing;
pub mod math;
pub mod metrics;
pub mod projector;
pub mod rasterizer;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
