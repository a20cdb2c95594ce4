//! Asset and raster file formats.

pub mod config;
pub mod obj;
pub mod pfm;
pub mod ply;
pub mod png;

pub use config::RunConfig;
pub use obj::{load_mesh, save_mesh};
pub use pfm::{load_depth, save_depth};
pub use ply::{load_gaussians, save_gaussians};
