use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use super::{covariance, sort_front_to_back, GaussianCloud};
use crate::error::{Error, Result};
use crate::gbuffer::{GBuffer, DEPTH_SENTINEL};
use crate::geometry::CameraView;
use crate::grid::{Grid, Rgb};

const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Pixels whose accumulated alpha is below this get a sentinel depth.
    pub alpha_floor: f64,
    /// Added to the diagonal of every projected 2x2 covariance (px^2).
    pub low_pass: f64,
    /// Per-Gaussian alpha is clamped to `[0, alpha_max]`.
    pub alpha_max: f64,
    /// Gaussians with camera depth below this are culled.
    pub near: f64,
    /// Footprint half-extent in standard deviations of the major axis.
    pub extent_sigmas: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_floor: 1e-3,
            low_pass: 0.3,
            alpha_max: 0.999,
            near: 0.01,
            extent_sigmas: 3.5,
        }
    }
}

/// Screen-space footprint of one Gaussian.
struct Splat {
    index: usize,
    mean: Vector2<f64>,
    /// Inverse of the projected covariance.
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Rgb,
    /// Inclusive pixel bounds.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Splat {
    /// Falloff `exp(-1/2 d^T conic d)` at `p`.
    #[inline]
    fn falloff(&self, p: Vector2<f64>) -> f64 {
        let d = p - self.mean;
        let power = -0.5 * (d.transpose() * self.conic * d)[(0, 0)];
        power.exp()
    }

    #[inline]
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

fn project_splats(cloud: &GaussianCloud, cam: &CameraView, opts: &RenderOptions) -> Vec<Splat> {
    let order = sort_front_to_back(cloud, cam);
    let w = cam.rotation;
    order
        .into_iter()
        .filter_map(|index| {
            let g = &cloud.gaussians[index];
            let pc = cam.to_camera(&g.mean);
            if pc.z < opts.near {
                return None;
            }
            let (mean, depth) = cam.project(&g.mean)?;
            let (z, z2) = (pc.z, pc.z * pc.z);
            let jac = Matrix2x3::new(
                cam.fx / z,
                0.0,
                -cam.fx * pc.x / z2,
                0.0,
                cam.fy / z,
                -cam.fy * pc.y / z2,
            );
            let cov_cam = w * covariance(g) * w.transpose();
            let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * opts.low_pass;
            let det = cov2.determinant();
            let Some(conic) = cov2.try_inverse().filter(|_| det > 1e-12 && det.is_finite()) else {
                log::warn!("skipping gaussian {index}: singular projected covariance (det {det:e})");
                return None;
            };
            let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let r = opts.extent_sigmas * lambda_max.sqrt();
            let (lo_x, hi_x) = ((mean.x - r).ceil(), (mean.x + r).floor());
            let (lo_y, hi_y) = ((mean.y - r).ceil(), (mean.y + r).floor());
            if hi_x < 0.0 || hi_y < 0.0 || lo_x > (cam.width - 1) as f64 || lo_y > (cam.height - 1) as f64 {
                return None;
            }
            Some(Splat {
                index,
                mean,
                conic,
                depth,
                opacity: g.opacity,
                color: g.color,
                x0: lo_x.max(0.0) as usize,
                x1: hi_x.min((cam.width - 1) as f64) as usize,
                y0: lo_y.max(0.0) as usize,
                y1: hi_y.min((cam.height - 1) as f64) as usize,
            })
        })
        .collect()
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Indices into the depth-sorted splat list, still in depth order.
    splats: Vec<usize>,
}

fn bin_tiles(splats: &[Splat], width: usize, height: usize) -> Vec<Tile> {
    let (tw, th) = (width.div_ceil(TILE), height.div_ceil(TILE));
    let mut tiles: Vec<Tile> = (0..tw * th)
        .map(|t| {
            let (tx, ty) = (t % tw, t / tw);
            Tile {
                x0: tx * TILE,
                y0: ty * TILE,
                x1: ((tx + 1) * TILE).min(width),
                y1: ((ty + 1) * TILE).min(height),
                splats: Vec::new(),
            }
        })
        .collect();
    for (i, s) in splats.iter().enumerate() {
        for ty in s.y0 / TILE..=s.y1 / TILE {
            for tx in s.x0 / TILE..=s.x1 / TILE {
                tiles[ty * tw + tx].splats.push(i);
            }
        }
    }
    tiles
}

/// One Gaussian's contribution at one pixel.
struct Contribution {
    /// Position in the tile's splat list.
    slot: usize,
    alpha: f64,
    falloff: f64,
    clamped: bool,
    transmittance: f64,
}

fn contributions(tile: &Tile, splats: &[Splat], x: usize, y: usize, opts: &RenderOptions) -> (Vec<Contribution>, f64) {
    let p = Vector2::new(x as f64, y as f64);
    let mut t = 1.0;
    let mut out = Vec::new();
    for (slot, &si) in tile.splats.iter().enumerate() {
        let s = &splats[si];
        if !s.covers(x, y) {
            continue;
        }
        let falloff = s.falloff(p);
        let raw = s.opacity * falloff;
        let clamped = raw > opts.alpha_max;
        let alpha = raw.clamp(0.0, opts.alpha_max);
        if alpha <= 0.0 {
            continue;
        }
        out.push(Contribution {
            slot,
            alpha,
            falloff,
            clamped,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t == 0.0 {
            break;
        }
    }
    (out, t)
}

pub fn render(cloud: &GaussianCloud, cam: &CameraView, background: Rgb) -> GBuffer {
    render_with(cloud, cam, background, &RenderOptions::default())
}

/// Front-to-back compositing:
/// `C = sum_i c_i a_i prod_{j<i}(1 - a_j) + background * prod_j (1 - a_j)`.
pub fn render_with(cloud: &GaussianCloud, cam: &CameraView, background: Rgb, opts: &RenderOptions) -> GBuffer {
    let (w, h) = (cam.width, cam.height);
    let splats = project_splats(cloud, cam, opts);
    let tiles = bin_tiles(&splats, w, h);

    // (pixel index, colour, alpha, depth)
    let pixels: Vec<Vec<(usize, Rgb, f64, f64)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let (contribs, t_final) = contributions(tile, &splats, x, y, opts);
                    let mut color = [0.0; 3];
                    let mut depth_acc = 0.0;
                    for c in &contribs {
                        let s = &splats[tile.splats[c.slot]];
                        let weight = c.alpha * c.transmittance;
                        for (acc, sc) in color.iter_mut().zip(s.color) {
                            *acc += weight * sc;
                        }
                        depth_acc += weight * s.depth;
                    }
                    for (acc, bg) in color.iter_mut().zip(background) {
                        *acc += t_final * bg;
                    }
                    let alpha = 1.0 - t_final;
                    let depth = if alpha >= opts.alpha_floor {
                        depth_acc / alpha
                    } else {
                        DEPTH_SENTINEL
                    };
                    out.push((y * w + x, color, alpha, depth));
                }
            }
            out
        })
        .collect();

    let mut gb = GBuffer::empty(w, h, background);
    for (i, color, alpha, depth) in pixels.into_iter().flatten() {
        gb.color.as_mut_slice()[i] = color;
        gb.alpha.as_mut_slice()[i] = alpha;
        gb.depth.as_mut_slice()[i] = depth;
    }
    gb.fill_normals_from_depth(cam);
    gb
}

/// Gradients of a scalar loss with respect to each Gaussian's colour and
/// opacity, indexed like the input cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGradients {
    pub color: Vec<Rgb>,
    pub opacity: Vec<f64>,
}

/// Backpropagate `dL/dC` (per pixel, per channel) through the compositing.
///
/// Walking each pixel's list back to front, the colour seen behind Gaussian
/// `i` is `B_i = a_{i+1} c_{i+1} + (1 - a_{i+1}) B_{i+1}` with `B_last` the
/// background, so `dC/da_i = T_i (c_i - B_i)` without dividing by `1 - a_i`.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraView,
    background: Rgb,
    dl_dcolor: &Grid<Rgb>,
    opts: &RenderOptions,
) -> Result<SplatGradients> {
    let (w, h) = (cam.width, cam.height);
    if dl_dcolor.dims() != (w, h) {
        return Err(Error::shape(
            "render_backward upstream gradient",
            (w, h),
            dl_dcolor.dims(),
        ));
    }
    let splats = project_splats(cloud, cam, opts);
    let tiles = bin_tiles(&splats, w, h);

    // Per-tile partial sums in tile-list order, reduced below in tile order.
    let partials: Vec<Vec<(Rgb, f64)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut acc = vec![([0.0; 3], 0.0); tile.splats.len()];
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let up = dl_dcolor[(x, y)];
                    if up == [0.0; 3] {
                        continue;
                    }
                    let (contribs, _) = contributions(tile, &splats, x, y, opts);
                    let mut behind = background;
                    for c in contribs.iter().rev() {
                        let s = &splats[tile.splats[c.slot]];
                        let weight = c.alpha * c.transmittance;
                        let mut dl_dalpha = 0.0;
                        for k in 0..3 {
                            acc[c.slot].0[k] += up[k] * weight;
                            dl_dalpha += up[k] * c.transmittance * (s.color[k] - behind[k]);
                            behind[k] = c.alpha * s.color[k] + (1.0 - c.alpha) * behind[k];
                        }
                        if !c.clamped {
                            acc[c.slot].1 += dl_dalpha * c.falloff;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut grads = SplatGradients {
        color: vec![[0.0; 3]; cloud.len()],
        opacity: vec![0.0; cloud.len()],
    };
    for (tile, acc) in tiles.iter().zip(partials) {
        for (&si, (dc, dop)) in tile.splats.iter().zip(acc) {
            let gi = splats[si].index;
            for (g, d) in grads.color[gi].iter_mut().zip(dc) {
                *g += d;
            }
            grads.opacity[gi] += dop;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;
    use nalgebra::{Matrix3, Vector3};

    fn cam(n: usize) -> CameraView {
        let c = (n as f64 - 1.0) / 2.0;
        CameraView::new(40.0, 40.0, c, c, Matrix3::identity(), Vector3::zeros(), n, n).unwrap()
    }

    fn exact() -> RenderOptions {
        RenderOptions {
            alpha_max: 1.0,
            ..RenderOptions::default()
        }
    }

    #[test]
    fn empty_cloud_shows_background() {
        let cam = cam(8);
        let gb = render(&GaussianCloud::default(), &cam, [0.1, 0.2, 0.3]);
        assert!(gb.color.iter().all(|&c| c == [0.1, 0.2, 0.3]));
        assert!(gb.alpha.iter().all(|&a| a == 0.0));
        assert!(gb.depth.iter().all(|&d| d == DEPTH_SENTINEL));
    }

    #[test]
    fn opaque_gaussian_at_mean_shows_its_colour() {
        let cam = cam(9);
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, [0.9, 0.4, 0.1], 1.0).unwrap();
        let cloud = GaussianCloud::new(vec![g]).unwrap();
        let gb = render_with(&cloud, &cam, [0.0, 0.0, 1.0], &exact());
        assert_eq!(gb.alpha[(4, 4)], 1.0);
        assert_eq!(gb.color[(4, 4)], [0.9, 0.4, 0.1]);
        assert_eq!(gb.depth[(4, 4)], 2.0);
        // default clamp leaves a sliver of background
        let clamped = render(&cloud, &cam, [0.0, 0.0, 1.0]);
        assert!((clamped.color[(4, 4)][2] - (0.999 * 0.1 + 0.001)).abs() < 1e-12);
    }

    #[test]
    fn two_layer_compositing() {
        let cam = cam(9);
        let near = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, [1.0, 0.0, 0.0], 0.5).unwrap();
        let far = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.05, [0.0, 1.0, 0.0], 0.5).unwrap();
        let bg = [0.0, 0.0, 1.0];
        // list order must not matter
        let cloud = GaussianCloud::new(vec![far, near]).unwrap();
        let gb = render(&cloud, &cam, bg);
        let c = gb.color[(4, 4)];
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.25).abs() < 1e-12 && (c[2] - 0.25).abs() < 1e-12);
        assert!((gb.alpha[(4, 4)] - 0.75).abs() < 1e-12);
        // alpha-weighted depth: (0.5*2 + 0.25*3) / 0.75
        assert!((gb.depth[(4, 4)] - 1.75 / 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = cam(8);
        let cloud = GaussianCloud::new(vec![Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 2.0),
            0.1,
            [0.3; 3],
            0.7,
        )
        .unwrap()])
        .unwrap();
        let g = render_backward(
            &cloud,
            &cam,
            [0.0; 3],
            &Grid::new(8, 8, [0.0; 3]),
            &RenderOptions::default(),
        )
        .unwrap();
        assert_eq!(g.color, vec![[0.0; 3]]);
        assert_eq!(g.opacity, vec![0.0]);
    }

    #[test]
    fn colour_gradient_is_alpha_for_single_pixel_loss() {
        let cam = cam(9);
        let g = Gaussian::isotropic(Vector3::new(0.01, -0.02, 2.0), 0.05, [0.3, 0.6, 0.2], 0.8).unwrap();
        let cloud = GaussianCloud::new(vec![g]).unwrap();
        let gb = render(&cloud, &cam, [0.0; 3]);
        let mut up = Grid::new(9, 9, [0.0; 3]);
        up[(4, 4)] = [1.0, 0.0, 0.0];
        let grads = render_backward(&cloud, &cam, [0.0; 3], &up, &RenderOptions::default()).unwrap();
        assert!((grads.color[0][0] - gb.alpha[(4, 4)]).abs() < 1e-15);
        assert_eq!(grads.color[0][1], 0.0);
    }

    #[test]
    fn mismatched_gradient_shape_rejected() {
        let cam = cam(8);
        let r = render_backward(
            &GaussianCloud::default(),
            &cam,
            [0.0; 3],
            &Grid::new(4, 8, [0.0; 3]),
            &RenderOptions::default(),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
