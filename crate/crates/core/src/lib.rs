//! Differentiable Gaussian splatting on the CPU, with a refined-depth prior,
//! relative depth guidance and error-driven densification for sparse-view
//! reconstruction.
//!
//! The crate is organized bottom-up:
//!
//! - [`gaussian`], [`camera`], [`raster`], [`projection`]: scene types.
//! - [`splat`]: forward compositing and the analytic backward pass.
//! - [`refine`]: RGB-guided MRF refinement of a coarse depth map.
//! - [`guidance`]: patch cosine-similarity tensors and the guidance loss.
//! - [`losses`]: photometric and depth losses, metrics.
//! - [`densify`]: clone/split/prune and ray-sampled densification.
//! - [`train`]: the optimization loop.
//! - [`synth`]: synthetic scenes and coarse-depth corruption.
//! - [`io`]: PFM, PNG and JSON documents.

// `!(x >= 0.0)` is how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod densify;
pub mod gaussian;
pub mod guidance;
pub mod io;
pub mod losses;
pub mod optim;
pub mod projection;
pub mod raster;
pub mod refine;
pub mod splat;
pub mod synth;
pub mod train;

#[cfg(test)]
mod testutil;

pub use camera::Camera;
pub use gaussian::{GaussianPrimitive, GaussianSet};
pub use raster::{DepthMap, ImageBuffer, ScalarMap};
pub use splat::{backward, render, GradientSet, RenderOutput};
