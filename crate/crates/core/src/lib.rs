//! Geometric, scheduling and optimisation core of a progressive
//! image-to-3D texture refinement pipeline.
//!
//! A coarse asset (Gaussian cloud or textured mesh) is rendered around an
//! orbit. Every novel view is compared against its already-refined neighbours
//! to find occluded and better-seen regions, the coarse render is DDIM
//! inverted and selectively repainted under a pluggable denoiser, and the
//! refined views finally drive an MSE texture fit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod fixtures;
pub mod gbuffer;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod meshtex;
pub mod metrics;
pub mod pipeline;
pub mod splat;
pub mod visibility;

pub use error::{Error, Result};
pub use gbuffer::GBuffer;
pub use geometry::{CameraView, PointCloud3D};
pub use grid::{Grid, Image, Mask, Rgb};
