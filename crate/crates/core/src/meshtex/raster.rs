use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{nearest_texel, sample_bilinear, TexturedMesh};
use crate::gbuffer::GBuffer;
use crate::geometry::CameraView;
use crate::grid::Grid;

const TILE: usize = 16;
const NEAR: f64 = 1e-3;

/// Visible surface sample at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub depth: f64,
    /// Interpolated, renormalised world-space normal.
    pub normal: Vector3<f64>,
    pub uv: Vector2<f64>,
    pub face: usize,
}

struct ScreenTri {
    face: usize,
    p: [Vector2<f64>; 3],
    inv_z: [f64; 3],
    area: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

#[inline]
fn edge(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn setup(mesh: &TexturedMesh, cam: &CameraView) -> Vec<ScreenTri> {
    let projected: Vec<Option<(Vector2<f64>, f64)>> = mesh
        .vertices
        .iter()
        .map(|v| cam.project(v).filter(|(_, z)| *z > NEAR))
        .collect();
    let (w, h) = (cam.width as f64, cam.height as f64);
    mesh.faces
        .iter()
        .enumerate()
        .filter_map(|(face, f)| {
            // no near-plane clipping: triangles crossing it are dropped
            let [a, b, c] = [projected[f[0]]?, projected[f[1]]?, projected[f[2]]?];
            let p = [a.0, b.0, c.0];
            let area = edge(p[0], p[1], p[2]);
            if area.abs() < 1e-12 {
                return None;
            }
            let lo_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let hi_x = p
                .iter()
                .map(|q| q.x)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(w - 1.0);
            let lo_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let hi_y = p
                .iter()
                .map(|q| q.y)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(h - 1.0);
            if lo_x > hi_x || lo_y > hi_y {
                return None;
            }
            Some(ScreenTri {
                face,
                p,
                inv_z: [1.0 / a.1, 1.0 / b.1, 1.0 / c.1],
                area,
                x0: lo_x as usize,
                x1: hi_x as usize,
                y0: lo_y as usize,
                y1: hi_y as usize,
            })
        })
        .collect()
}

/// Nearest fragment per pixel. Triangles are tested in face order and a
/// later triangle must be strictly nearer to win, so output is independent
/// of thread count.
pub fn rasterize_fragments(mesh: &TexturedMesh, cam: &CameraView) -> Grid<Option<Fragment>> {
    let (w, h) = (cam.width, cam.height);
    let tris = setup(mesh, cam);
    let (tw, th) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tw * th];
    for (i, t) in tris.iter().enumerate() {
        for ty in t.y0 / TILE..=t.y1 / TILE {
            for tx in t.x0 / TILE..=t.x1 / TILE {
                bins[ty * tw + tx].push(i);
            }
        }
    }

    let tiles: Vec<Vec<(usize, Fragment)>> = bins
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (bx, by) = ((ti % tw) * TILE, (ti / tw) * TILE);
            let (ex, ey) = ((bx + TILE).min(w), (by + TILE).min(h));
            let mut out = Vec::new();
            for y in by..ey {
                for x in bx..ex {
                    let p = Vector2::new(x as f64, y as f64);
                    let mut best: Option<(f64, &ScreenTri, [f64; 3])> = None;
                    for &i in list {
                        let t = &tris[i];
                        if x < t.x0 || x > t.x1 || y < t.y0 || y > t.y1 {
                            continue;
                        }
                        let b = [
                            edge(t.p[1], t.p[2], p) / t.area,
                            edge(t.p[2], t.p[0], p) / t.area,
                            edge(t.p[0], t.p[1], p) / t.area,
                        ];
                        if b.iter().any(|&v| v < 0.0) {
                            continue;
                        }
                        let wsum: f64 = (0..3).map(|k| b[k] * t.inv_z[k]).sum();
                        let depth = 1.0 / wsum;
                        if best.as_ref().is_none_or(|(d, _, _)| depth < *d) {
                            let pb = [
                                b[0] * t.inv_z[0] * depth,
                                b[1] * t.inv_z[1] * depth,
                                b[2] * t.inv_z[2] * depth,
                            ];
                            best = Some((depth, t, pb));
                        }
                    }
                    if let Some((depth, t, pb)) = best {
                        let f = mesh.faces[t.face];
                        let mut normal = Vector3::zeros();
                        let mut uv = Vector2::zeros();
                        for k in 0..3 {
                            normal += mesh.normals[f[k]] * pb[k];
                            uv += mesh.uvs[f[k]] * pb[k];
                        }
                        let norm = normal.norm();
                        let normal = if norm > 1e-12 { normal / norm } else { Vector3::zeros() };
                        uv = uv.map(|c| c.clamp(0.0, 1.0));
                        out.push((
                            y * w + x,
                            Fragment {
                                depth,
                                normal,
                                uv,
                                face: t.face,
                            },
                        ));
                    }
                }
            }
            out
        })
        .collect();

    let mut grid = Grid::new(w, h, None);
    for (i, frag) in tiles.into_iter().flatten() {
        grid.as_mut_slice()[i] = Some(frag);
    }
    grid
}

/// Rasterize with a black background.
pub fn rasterize(mesh: &TexturedMesh, cam: &CameraView) -> GBuffer {
    let frags = rasterize_fragments(mesh, cam);
    let (tw, th) = mesh.texture.dims();
    let mut gb = GBuffer::empty(cam.width, cam.height, [0.0; 3]);
    for (i, f) in frags.iter().enumerate() {
        if let Some(f) = f {
            gb.color.as_mut_slice()[i] = sample_bilinear(&mesh.texture, f.uv);
            gb.depth.as_mut_slice()[i] = f.depth;
            gb.alpha.as_mut_slice()[i] = 1.0;
            gb.normal.as_mut_slice()[i] = f.normal;
            gb.texel_id.as_mut_slice()[i] = Some(nearest_texel(f.uv, tw, th));
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use nalgebra::Matrix3;

    fn front_cam() -> CameraView {
        CameraView::new(40.0, 40.0, 15.5, 15.5, Matrix3::identity(), Vector3::zeros(), 32, 32).unwrap()
    }

    fn triangle(tilt_deg: f64) -> TexturedMesh {
        // triangle in a plane through (0,0,2), rotated about the y axis
        let t = tilt_deg.to_radians();
        let axis_x = Vector3::new(t.cos(), 0.0, t.sin());
        let n = Vector3::new(-t.sin(), 0.0, t.cos());
        let normal = -n; // faces the camera at the origin
        let c = Vector3::new(0.0, 0.0, 2.0);
        let verts = vec![
            c - axis_x * 0.5 - Vector3::y() * 0.4,
            c + axis_x * 0.5 - Vector3::y() * 0.4,
            c + Vector3::y() * 0.5,
        ];
        TexturedMesh::new(
            verts,
            vec![[0, 1, 2]],
            vec![normal; 3],
            vec![Vector2::new(0.0, 1.0), Vector2::new(1.0, 1.0), Vector2::new(0.5, 0.0)],
            Grid::new(4, 4, [0.2, 0.5, 0.7]),
        )
        .unwrap()
    }

    #[test]
    fn fronto_parallel_triangle() {
        let cam = front_cam();
        let gb = rasterize(&triangle(0.0), &cam);
        let cos = gb.cos_theta(&cam);
        let mut covered = 0;
        for y in 0..32 {
            for x in 0..32 {
                if gb.has_depth(x, y) {
                    covered += 1;
                    for (a, b) in gb.color[(x, y)].iter().zip([0.2, 0.5, 0.7]) {
                        assert!((a - b).abs() < 1e-12);
                    }
                    assert!((gb.depth[(x, y)] - 2.0).abs() < 1e-12);
                    // per-pixel ray, so cos is 1 only on the optical axis
                    let ray = cam.ray_direction(Vector2::new(x as f64, y as f64));
                    assert!((cos[(x, y)] - ray.z).abs() < 1e-12);
                } else {
                    assert_eq!(gb.color[(x, y)], [0.0; 3]);
                }
            }
        }
        assert!(covered > 50);
        assert!((cos[(15, 15)] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn tilted_triangle_cos_half() {
        let cam = front_cam();
        let gb = rasterize(&triangle(60.0), &cam);
        // view direction along the optical axis at the principal point
        let n = gb.normal_at(15, 15).unwrap();
        assert!((n.dot(&-Vector3::z()) - 0.5).abs() < 1e-12);
        let cos = gb.cos_theta(&cam);
        assert!((cos[(15, 15)] - 0.5).abs() < 0.02);
    }

    #[test]
    fn degenerate_triangle_skipped() {
        let cam = front_cam();
        let v = Vector3::new(0.0, 0.0, 2.0);
        let mesh = TexturedMesh::new(
            vec![v, v + Vector3::x() * 0.1, v + Vector3::x() * 0.2],
            vec![[0, 1, 2]],
            vec![-Vector3::z(); 3],
            vec![Vector2::zeros(); 3],
            Grid::new(1, 1, [1.0; 3]),
        )
        .unwrap();
        assert!(rasterize(&mesh, &cam).depth.iter().all(|d| !d.is_finite()));
    }

    #[test]
    fn perspective_correct_uv() {
        // a strongly tilted quad textured with u: the u at the pixel must
        // match the analytic ray-plane intersection, not the affine blend
        let cam = front_cam();
        let mesh = triangle(70.0);
        let frags = rasterize_fragments(&mesh, &cam);
        let t = 70f64.to_radians();
        let axis_x = Vector3::new(t.cos(), 0.0, t.sin());
        let n = Vector3::new(-t.sin(), 0.0, t.cos());
        let c = Vector3::new(0.0, 0.0, 2.0);
        let v0 = c - axis_x * 0.5 - Vector3::y() * 0.4;
        let v1 = c + axis_x * 0.5 - Vector3::y() * 0.4;
        let v2 = c + Vector3::y() * 0.5;
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                let Some(f) = frags[(x, y)] else { continue };
                let ray = cam.ray_direction(Vector2::new(x as f64, y as f64));
                let s = n.dot(&c) / n.dot(&ray);
                let p = ray * s;
                // barycentrics of p in 3D
                let area = (v1 - v0).cross(&(v2 - v0)).norm();
                let b0 = (v1 - p).cross(&(v2 - p)).norm() / area;
                let b1 = (v2 - p).cross(&(v0 - p)).norm() / area;
                let b2 = 1.0 - b0 - b1;
                let u = b0 * 0.0 + b1 * 1.0 + b2 * 0.5;
                assert!((f.uv.x - u).abs() < 1e-9, "({x},{y}) {} vs {}", f.uv.x, u);
                assert!((f.depth - p.z).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    fn ray_sphere(cam: &CameraView, x: usize, y: usize) -> Option<(f64, Vector3<f64>)> {
        let o = cam.center();
        let d = cam.ray_direction(Vector2::new(x as f64, y as f64));
        let b = o.dot(&d);
        let disc = b * b - (o.norm_squared() - 1.0);
        if disc < 0.0 {
            return None;
        }
        let s = -b - disc.sqrt();
        let p = o + d * s;
        Some((cam.to_camera(&p).z, p))
    }

    #[test]
    fn sphere_cos_theta_matches_analytic() {
        let cam = CameraView::orbit(0.0, 0.0, 2.5, 55.0, 128, 128).unwrap();
        let mesh = TexturedMesh::uv_sphere(1.0, 128, 64, Grid::new(2, 2, [0.5; 3])).unwrap();
        let gb = rasterize(&mesh, &cam);
        let cos = gb.cos_theta(&cam);
        let mut n = 0;
        for y in 0..128 {
            for x in 0..128 {
                let (Some((_, p)), true) = (ray_sphere(&cam, x, y), gb.has_depth(x, y)) else {
                    continue;
                };
                let d = cam.ray_direction(Vector2::new(x as f64, y as f64));
                let analytic = p.normalize().dot(&-d).max(0.0);
                assert!(
                    (cos[(x, y)] - analytic).abs() < 0.02,
                    "({x},{y}) {} vs {analytic}",
                    cos[(x, y)]
                );
                n += 1;
            }
        }
        assert!(n > 3000);
    }

    #[test]
    fn depth_agrees_with_dense_point_splat() {
        use crate::geometry::{splat_points_with, PointCloud3D, SplatOptions};
        let cam = CameraView::orbit(20.0, 10.0, 2.5, 55.0, 64, 64).unwrap();
        let mesh = TexturedMesh::uv_sphere(1.0, 128, 64, Grid::new(2, 2, [0.5; 3])).unwrap();
        let gb = rasterize(&mesh, &cam);
        // dense Fibonacci sampling of the sphere
        let n = 200_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let a = golden * i as f64;
                Vector3::new(r * a.cos(), y, r * a.sin())
            })
            .collect();
        let splat = splat_points_with(
            &PointCloud3D::from_points(pts).unwrap(),
            &cam,
            &SplatOptions {
                radius: 0,
                center_priority: false,
            },
        );
        // one depth quantum = depth change across one pixel at the local slope
        let cos = gb.cos_theta(&cam);
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                let (a, b) = (gb.depth[(x, y)], splat.depth[(x, y)]);
                if !(a.is_finite() && b.is_finite()) || cos[(x, y)] < 0.3 {
                    continue;
                }
                let quantum = a / cam.fx / cos[(x, y)];
                assert!((a - b).abs() <= quantum, "({x},{y}) mesh {a} splat {b}");
                checked += 1;
            }
        }
        assert!(checked > 500);
    }
}
