//! Procedural test scenes: an analytically ray-cast sphere, textured sphere
//! and cube meshes, Gaussian clouds sampled on a sphere, and matching
//! reference images.

use nalgebra::{Vector2, Vector3};

use crate::error::Result;
use crate::gbuffer::GBuffer;
use crate::geometry::CameraView;
use crate::grid::{Grid, Image};
use crate::meshtex::{rasterize, sample_bilinear, TexturedMesh};
use crate::splat::{Gaussian, GaussianCloud};

/// Exact G-buffer of a sphere of `radius` at the origin: depth from the
/// ray-sphere intersection, normals from the surface point. Colour is white.
pub fn analytic_sphere(cam: &CameraView, radius: f64) -> GBuffer {
    let (w, h) = (cam.width, cam.height);
    let mut gb = GBuffer::empty(w, h, [0.0; 3]);
    let o = cam.center();
    for y in 0..h {
        for x in 0..w {
            let d = cam.ray_direction(Vector2::new(x as f64, y as f64));
            let b = o.dot(&d);
            let disc = b * b - (o.norm_squared() - radius * radius);
            if disc < 0.0 {
                continue;
            }
            let s = -b - disc.sqrt();
            if s <= 0.0 {
                continue;
            }
            let p = o + d * s;
            gb.depth[(x, y)] = cam.to_camera(&p).z;
            gb.normal[(x, y)] = p.normalize();
            gb.alpha[(x, y)] = 1.0;
            gb.color[(x, y)] = [1.0; 3];
        }
    }
    gb
}

/// Unit vector on the sphere at `(azimuth, elevation)` degrees, matching the
/// orbit camera convention.
pub fn sphere_direction(azimuth_deg: f64, elevation_deg: f64) -> Vector3<f64> {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos())
}

/// Smooth hue bands with a checker overlay, so both low and high
/// frequencies show up in renders.
pub fn pattern_texture(width: usize, height: usize) -> Image {
    Grid::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let checker = if ((8.0 * u) as usize + (4.0 * v) as usize).is_multiple_of(2) {
            0.15
        } else {
            -0.15
        };
        let tau = std::f64::consts::TAU;
        [
            0.5 + 0.3 * (tau * u).cos() + checker,
            0.5 + 0.3 * (tau * (u + v)).sin() + checker,
            0.5 + 0.3 * (tau * 2.0 * v).cos() - checker,
        ]
        .map(|c| c.clamp(0.0, 1.0))
    })
}

/// Blurred and desaturated copy of `texture`: the stand-in for a coarse
/// stage that gets shape right and appearance only roughly.
pub fn degrade(texture: &Image, radius: usize) -> Image {
    let (w, h) = texture.dims();
    let r = radius as isize;
    Grid::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for c in 0..3 {
                    acc[c] += texture[(sx, sy)][c];
                }
                n += 1.0;
            }
        }
        let mean = acc.map(|a| a / n);
        let grey = (mean[0] + mean[1] + mean[2]) / 3.0;
        mean.map(|c| 0.5 * c + 0.5 * grey)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
}

/// A coarse mesh, the detailed mesh it approximates, and the reference
/// image of the detailed mesh seen from azimuth 0.
#[derive(Clone, Debug)]
pub struct Scene {
    pub coarse: TexturedMesh,
    pub truth: TexturedMesh,
    pub reference: Image,
    pub reference_cam: CameraView,
}

pub const SCENE_DISTANCE: f64 = 2.8;
pub const SCENE_FOV: f64 = 45.0;

pub fn scene_camera(azimuth: f64, elevation: f64, resolution: usize) -> Result<CameraView> {
    CameraView::orbit(azimuth, elevation, SCENE_DISTANCE, SCENE_FOV, resolution, resolution)
}

pub fn textured_mesh(shape: Shape, texture: Image) -> Result<TexturedMesh> {
    match shape {
        Shape::Sphere => TexturedMesh::uv_sphere(1.0, 64, 32, texture),
        Shape::Cube => TexturedMesh::cube(0.6, texture),
    }
}

pub fn scene(shape: Shape, resolution: usize, texture_size: usize) -> Result<Scene> {
    let (tw, th) = match shape {
        Shape::Sphere => (2 * texture_size, texture_size),
        Shape::Cube => (3 * texture_size / 2, texture_size),
    };
    let fine = pattern_texture(tw, th);
    let truth = textured_mesh(shape, fine.clone())?;
    let coarse = textured_mesh(shape, degrade(&fine, (texture_size / 32).max(1)))?;
    let reference_cam = scene_camera(0.0, 0.0, resolution)?;
    let reference = rasterize(&truth, &reference_cam).color;
    Ok(Scene {
        coarse,
        truth,
        reference,
        reference_cam,
    })
}

/// Isotropic Gaussians on a Fibonacci lattice over the sphere of `radius`,
/// coloured by `texture` at the matching UV.
pub fn sphere_gaussians(count: usize, radius: f64, texture: &Image) -> Result<GaussianCloud> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spacing = radius * (4.0 * std::f64::consts::PI / count.max(1) as f64).sqrt();
    let gaussians = (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            let dir = Vector3::new(r * phi.sin(), y, r * phi.cos());
            let u = 0.5 + dir.x.atan2(dir.z) / std::f64::consts::TAU;
            let v = dir.y.acos() / std::f64::consts::PI;
            let color = sample_bilinear(texture, Vector2::new(u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)));
            Gaussian::isotropic(dir * radius, 0.6 * spacing, color, 0.95)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianCloud::new(gaussians)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::render;

    #[test]
    fn analytic_sphere_depth_at_centre() {
        let cam = scene_camera(30.0, 10.0, 65).unwrap();
        let gb = analytic_sphere(&cam, 1.0);
        assert!((gb.depth[(32, 32)] - (SCENE_DISTANCE - 1.0)).abs() < 1e-12);
        let n = gb.normal[(32, 32)];
        assert!((n - sphere_direction(30.0, 10.0)).norm() < 1e-12);
        assert!(!gb.has_depth(0, 0));
    }

    #[test]
    fn scene_reference_matches_truth_texture() {
        let s = scene(Shape::Sphere, 64, 32).unwrap();
        assert_eq!(s.reference.dims(), (64, 64));
        assert_ne!(s.coarse.texture, s.truth.texture);
        assert_eq!(s.coarse.vertices, s.truth.vertices);
        let c = scene(Shape::Cube, 64, 32).unwrap();
        assert_eq!(c.truth.faces.len(), 12);
    }

    #[test]
    fn gaussian_sphere_covers_the_disc() {
        let tex = pattern_texture(32, 16);
        let cloud = sphere_gaussians(2000, 1.0, &tex).unwrap();
        let cam = scene_camera(0.0, 0.0, 64).unwrap();
        let gb = render(&cloud, &cam, [0.0; 3]);
        let exact = analytic_sphere(&cam, 1.0);
        let (mut both, mut total) = (0, 0);
        for y in 0..64 {
            for x in 0..64 {
                if exact.has_depth(x, y) {
                    total += 1;
                    if gb.alpha[(x, y)] > 0.5 {
                        both += 1;
                    }
                }
            }
        }
        assert!(both as f64 / total as f64 > 0.95, "{both}/{total}");
    }
}
