//! Software 3D Gaussian splatting: depth-sorted front-to-back alpha
//! compositing of screen-space projected Gaussians, plus exact gradients of
//! the composited colour with respect to per-Gaussian colour and opacity.

mod render;

pub use render::{render, render_backward, render_with, RenderOptions, SplatGradients};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::grid::Rgb;

const QUAT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Standard deviations along the local axes, world units.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub color: Rgb,
    pub opacity: f64,
}

impl Gaussian {
    /// `rotation` is `[w, x, y, z]` and must already be unit length.
    pub fn new(mean: Vector3<f64>, scale: Vector3<f64>, rotation: [f64; 4], color: Rgb, opacity: f64) -> Result<Self> {
        let q = Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]);
        if !((q.norm() - 1.0).abs() <= QUAT_NORM_TOL) {
            return Err(Error::invalid(format!("quaternion norm {} is not 1", q.norm())));
        }
        let g = Self {
            mean,
            scale,
            rotation: UnitQuaternion::new_unchecked(q),
            color,
            opacity,
        };
        g.validate()?;
        Ok(g)
    }

    /// Isotropic Gaussian, identity rotation.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, color: Rgb, opacity: f64) -> Result<Self> {
        Self::new(mean, Vector3::repeat(sigma), [1.0, 0.0, 0.0, 0.0], color, opacity)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("gaussian mean must be finite"));
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("gaussian scales must be positive"));
        }
        if !((self.rotation.norm() - 1.0).abs() <= QUAT_NORM_TOL) {
            return Err(Error::invalid("gaussian rotation is not a unit quaternion"));
        }
        if !(0.0..=1.0).contains(&self.opacity) || !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("gaussian colour and opacity must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `R S S^T R^T` with `S = diag(scale)`.
pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation.to_rotation_matrix().into_inner();
    let rs = r * Matrix3::from_diagonal(&g.scale);
    rs * rs.transpose()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Result<Self> {
        for (i, g) in gaussians.iter().enumerate() {
            g.validate().map_err(|e| Error::invalid(format!("gaussian {i}: {e}")))?;
        }
        Ok(Self { gaussians })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Indices ordered by camera-space depth, nearest first. Stable, so equal
/// depths keep their input order.
pub fn sort_front_to_back(cloud: &GaussianCloud, cam: &CameraView) -> Vec<usize> {
    let depths: Vec<f64> = cloud.gaussians.iter().map(|g| cam.to_camera(&g.mean).z).collect();
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));
    order
}
