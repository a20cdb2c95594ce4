//! Pinhole cameras, projection and back-projection, and z-buffered point
//! splatting.
//!
//! Conventions: right-handed world, camera looks down its +z axis, image x to
//! the right and y down. Pixel `(x, y)` has its centre at integer coordinates.
//! Depth is camera-space z, not ray length.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gbuffer::{GBuffer, DEPTH_SENTINEL};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    /// Degrees; bookkeeping for view scheduling.
    pub azimuth: f64,
    pub elevation: f64,
}

impl CameraView {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            azimuth: 0.0,
            elevation: 0.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere of radius `distance` around the origin, looking at
    /// the origin with world +y up. Azimuth 0 sits on +z, positive azimuth
    /// swings towards +x, positive elevation lifts the camera.
    pub fn orbit(
        azimuth_deg: f64,
        elevation_deg: f64,
        distance: f64,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(distance > 0.0) || !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(Error::invalid(format!(
                "orbit camera needs distance > 0 and 0 < fov < 180 (got {distance}, {fov_y_deg})"
            )));
        }
        if elevation_deg.abs() >= 90.0 {
            return Err(Error::invalid("orbit elevation must be within (-90, 90)"));
        }
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = distance * Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos());
        let forward = -position.normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let mut cam = Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        )?;
        cam.azimuth = azimuth_deg;
        cam.elevation = elevation_deg;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be at least 1x1"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera translation must be finite"));
        }
        Ok(())
    }

    /// Same pose, intrinsics rescaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel and camera-space depth of a world point, `None` when the point
    /// is on or behind the camera plane. The pixel may fall outside the image.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let pc = self.to_camera(p);
        if !(pc.z > 0.0) {
            return None;
        }
        Some((
            Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy),
            pc.z,
        ))
    }

    /// World point at camera-space depth `depth` along the ray through `pixel`.
    pub fn back_project(&self, pixel: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::invalid(format!(
                "back-projection depth must be positive, got {depth}"
            )));
        }
        Ok(self.back_project_unchecked(pixel, depth))
    }

    #[inline]
    pub(crate) fn back_project_unchecked(&self, pixel: Vector2<f64>, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation.transpose() * (pc - self.translation)
    }

    /// Unit world-space direction of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        let d = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// Integer pixel containing `pixel`, if inside the image.
    #[inline]
    pub fn pixel_of(&self, pixel: Vector2<f64>) -> Option<(usize, usize)> {
        let x = pixel.x.round();
        let y = pixel.y.round();
        (x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64).then_some((x as usize, y as usize))
    }
}

pub fn project(point: &Vector3<f64>, cam: &CameraView) -> Option<(Vector2<f64>, f64)> {
    cam.project(point)
}

pub fn back_project(pixel: Vector2<f64>, depth: f64, cam: &CameraView) -> Result<Vector3<f64>> {
    cam.back_project(pixel, depth)
}

/// World points with an optional fixed-width payload per point.
#[derive(Clone, Debug, Default)]
pub struct PointCloud3D {
    points: Vec<Vector3<f64>>,
    attributes: Vec<f64>,
    attribute_dim: usize,
}

impl PointCloud3D {
    pub fn new(points: Vec<Vector3<f64>>, attributes: Vec<f64>, attribute_dim: usize) -> Result<Self> {
        if attributes.len() != points.len() * attribute_dim {
            return Err(Error::invalid(format!(
                "{} points need {} attribute values, got {}",
                points.len(),
                points.len() * attribute_dim,
                attributes.len()
            )));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        Ok(Self {
            points,
            attributes,
            attribute_dim,
        })
    }

    pub fn from_points(points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::new(points, Vec::new(), 0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn attribute_dim(&self) -> usize {
        self.attribute_dim
    }

    pub fn attribute(&self, i: usize) -> &[f64] {
        &self.attributes[i * self.attribute_dim..(i + 1) * self.attribute_dim]
    }

    /// Append another cloud with the same attribute width.
    pub fn extend(&mut self, other: PointCloud3D) -> Result<()> {
        if other.attribute_dim != self.attribute_dim && !other.is_empty() {
            return Err(Error::invalid("attribute widths differ"));
        }
        self.points.extend(other.points);
        self.attributes.extend(other.attributes);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatOptions {
    /// Each point covers the `(2r+1)^2` square of pixels around its centre.
    pub radius: usize,
    /// When set, a pixel that contains some point's centre only takes depth
    /// from centre hits; the dilated footprint only fills pixels that no
    /// centre landed in. When unset, every covered pixel takes the pointwise
    /// minimum depth over all footprints.
    pub center_priority: bool,
}

impl Default for SplatOptions {
    fn default() -> Self {
        Self {
            radius: 1,
            center_priority: false,
        }
    }
}

/// z-buffered point rendering with the default 1-pixel dilation.
pub fn splat_points(pts: &PointCloud3D, cam: &CameraView) -> GBuffer {
    splat_points_with(pts, cam, &SplatOptions::default())
}

pub fn splat_points_with(pts: &PointCloud3D, cam: &CameraView, opts: &SplatOptions) -> GBuffer {
    let (w, h) = (cam.width, cam.height);
    let r = opts.radius as i64;

    // (pixel, class, depth, point); class 0 = centre hit, 1 = dilation.
    let fragments: Vec<(usize, u8, f64, usize)> = (0..pts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = Vec::new();
            if let Some((px, depth)) = cam.project(&pts.points[i]) {
                let (cx, cy) = (px.x.round() as i64, px.y.round() as i64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (x, y) = (cx + dx, cy + dy);
                        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                            continue;
                        }
                        let class = u8::from(opts.center_priority && (dx != 0 || dy != 0));
                        out.push((y as usize * w + x as usize, class, depth, i));
                    }
                }
            }
            out.into_iter()
        })
        .collect();

    let mut best: Vec<Option<(u8, f64, usize)>> = vec![None; w * h];
    for (pix, class, depth, i) in fragments {
        let cand = (class, depth, i);
        let slot = &mut best[pix];
        let better = match slot {
            None => true,
            Some(cur) => cand
                .0
                .cmp(&cur.0)
                .then(cand.1.total_cmp(&cur.1))
                .then(cand.2.cmp(&cur.2))
                .is_lt(),
        };
        if better {
            *slot = Some(cand);
        }
    }

    let k = pts.attribute_dim;
    let mut out = GBuffer::empty(w, h, [0.0; 3]);
    out.attribute_dim = k;
    out.attributes = vec![f64::NAN; w * h * k];
    for (pix, b) in best.iter().enumerate() {
        if let Some((_, depth, i)) = *b {
            out.depth.as_mut_slice()[pix] = depth;
            out.alpha.as_mut_slice()[pix] = 1.0;
            out.attributes[pix * k..(pix + 1) * k].copy_from_slice(pts.attribute(i));
        }
    }
    debug_assert!(out.depth.iter().all(|&d| d > 0.0 || d == DEPTH_SENTINEL));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera() -> CameraView {
        CameraView::new(
            100.0,
            100.0,
            64.0,
            64.0,
            Matrix3::identity(),
            Vector3::zeros(),
            128,
            128,
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let (px, d) = project(&Vector3::new(0.0, 0.0, 2.0), &axis_camera()).unwrap();
        assert_eq!(px, Vector2::new(64.0, 64.0));
        assert_eq!(d, 2.0);
    }

    #[test]
    fn pinhole_closed_form() {
        let (px, _) = project(&Vector3::new(1.0, 0.0, 2.0), &axis_camera()).unwrap();
        assert_eq!(px.x, 114.0);
    }

    #[test]
    fn behind_camera_has_no_pixel() {
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &axis_camera()).is_none());
        assert!(project(&Vector3::new(0.3, 0.0, 0.0), &axis_camera()).is_none());
    }

    #[test]
    fn principal_ray_back_projects_forward() {
        let cam = CameraView::orbit(30.0, 10.0, 3.0, 50.0, 64, 64).unwrap();
        let p = back_project(Vector2::new(cam.cx, cam.cy), 1.0, &cam).unwrap();
        let forward = cam.rotation.row(2).transpose();
        assert!((p - (cam.center() + forward)).norm() < 1e-12);
    }

    #[test]
    fn non_positive_depth_rejected() {
        let cam = axis_camera();
        assert!(back_project(Vector2::new(1.0, 1.0), 0.0, &cam).is_err());
        assert!(back_project(Vector2::new(1.0, 1.0), -2.0, &cam).is_err());
    }

    #[test]
    fn round_trip_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let cam = CameraView::orbit(
                rng.random_range(-180.0..180.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(1.5..6.0),
                rng.random_range(20.0..90.0),
                96,
                64,
            )
            .unwrap();
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let (px, d) = cam.project(&p).unwrap();
            let q = cam.back_project(px, d).unwrap();
            assert!((p - q).norm() < 1e-9, "{p} vs {q}");
            let (px2, d2) = cam.project(&q).unwrap();
            assert!((px - px2).norm() < 1e-9 && (d - d2).abs() < 1e-9);
        }
    }

    #[test]
    fn orbit_rotation_is_orthonormal() {
        for az in [-170.0, -40.0, 0.0, 40.0, 180.0] {
            for el in [-45.0, 0.0, 30.0] {
                let cam = CameraView::orbit(az, el, 2.0, 45.0, 8, 8).unwrap();
                assert!(cam.validate().is_ok());
                assert!((cam.center().norm() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_cameras_rejected() {
        let bad_rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(1.0, 1.0, 0.0, 0.0, bad_rot, Vector3::zeros(), 4, 4).is_err());
        assert!(CameraView::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
        assert!(CameraView::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 0, 4).is_err());
    }

    fn cloud_at(pixels: &[(f64, f64, f64, f64)], cam: &CameraView) -> PointCloud3D {
        let pts = pixels
            .iter()
            .map(|&(x, y, d, _)| cam.back_project(Vector2::new(x, y), d).unwrap())
            .collect();
        let attrs = pixels.iter().map(|p| p.3).collect();
        PointCloud3D::new(pts, attrs, 1).unwrap()
    }

    #[test]
    fn empty_cloud_is_all_sentinel() {
        let cam = axis_camera();
        let g = splat_points(&PointCloud3D::default(), &cam);
        assert!(g.depth.iter().all(|&d| d == DEPTH_SENTINEL));
        assert!(g.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_point_radius_zero() {
        let cam = axis_camera();
        let cloud = cloud_at(&[(10.0, 10.0, 3.0, 0.5)], &cam);
        let g = splat_points_with(
            &cloud,
            &cam,
            &SplatOptions {
                radius: 0,
                center_priority: false,
            },
        );
        for y in 0..cam.height {
            for x in 0..cam.width {
                if (x, y) == (10, 10) {
                    assert!((g.depth[(x, y)] - 3.0).abs() < 1e-12);
                    assert_eq!(g.attribute(x, y), &[0.5]);
                } else {
                    assert_eq!(g.depth[(x, y)], DEPTH_SENTINEL);
                }
            }
        }
    }

    #[test]
    fn nearer_point_wins() {
        let cam = axis_camera();
        let cloud = cloud_at(&[(20.0, 20.0, 3.0, 3.0), (20.0, 20.0, 2.0, 2.0)], &cam);
        let g = splat_points(&cloud, &cam);
        assert!((g.depth[(20, 20)] - 2.0).abs() < 1e-12);
        assert_eq!(g.attribute(20, 20), &[2.0]);
        // dilation: neighbours covered too
        assert!((g.depth[(21, 19)] - 2.0).abs() < 1e-12);
        assert!(!g.has_depth(22, 20));
    }

    #[test]
    fn ties_break_by_index() {
        let cam = axis_camera();
        let cloud = cloud_at(&[(5.0, 5.0, 2.0, 1.0), (5.0, 5.0, 2.0, 2.0)], &cam);
        let g = splat_points(&cloud, &cam);
        assert_eq!(g.attribute(5, 5), &[1.0]);
    }

    #[test]
    fn center_priority_keeps_own_pixel() {
        let cam = axis_camera();
        // neighbour is nearer but only reaches (30,30) through dilation
        let cloud = cloud_at(&[(30.0, 30.0, 3.0, 1.0), (31.0, 30.0, 2.0, 2.0)], &cam);
        let plain = splat_points(&cloud, &cam);
        assert_eq!(plain.attribute(30, 30), &[2.0]);
        let prio = splat_points_with(
            &cloud,
            &cam,
            &SplatOptions {
                radius: 1,
                center_priority: true,
            },
        );
        assert_eq!(prio.attribute(30, 30), &[1.0]);
        assert_eq!(prio.attribute(29, 30), &[1.0]);
        assert_eq!(prio.attribute(32, 30), &[2.0]);
    }
}
