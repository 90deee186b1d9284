//! Feed-forward generation of 3D Gaussian scenes from multi-view latents.
//!
//! The crate is organised bottom-up:
//!
//! * [`camera`]: intrinsics, poses, per-pixel rays and Plücker ray maps.
//! * [`gaussians`]: pixel-aligned Gaussian maps, activation, lifting, merging and PLY I/O.
//! * [`renderer`]: tile-based splatting rasterizer, a brute-force reference and
//!   colour/opacity gradients.
//! * [`metrics`]: losses (MSE, scale/shift invariant depth) and evaluation metrics.
//! * [`diffusion`]: EDM-style noising, preconditioning, Euler sampling and guidance.
//! * [`nets`]: desk-scale networks (analytic mixture denoiser, tiny MLP, toy
//!   cross-view fusion and Gaussian decoder) and their training loops.
//! * [`pipeline`]: end-to-end composition used by the `splatforge` binary.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled (the
//! default). Every parallel path has a sequential twin selected at runtime, so
//! results can be compared on the same build.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod diffusion;
pub mod gaussians;
pub mod imaging;
pub mod metrics;
pub mod nets;
pub mod par;
pub mod pipeline;
pub mod renderer;
pub mod synthetic;

pub use camera::{Intrinsics, Pose, Ray, RayMap};
pub use diffusion::LatentGrid;
pub use gaussians::{GaussianPrimitive, GaussianScene, PixelGaussianMap};
pub use imaging::Image;
pub use renderer::RenderOutput;
