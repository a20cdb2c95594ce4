//! Repaint control signals: depth-based occlusion masks, per-pixel visibility
//! against previously refined views, and the timestep-dependent binarisation
//! that turns visibility into a per-step preserve/repaint mask.
//!
//! Polarity: an [`OcclusionMask`] is `true` where content must be invented. A
//! [`RepaintMask`] is `true` where the inverted latent is kept and `false`
//! where the denoiser repaints.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gbuffer::{is_valid_depth, GBuffer};
use crate::geometry::{splat_points_with, CameraView, PointCloud3D, SplatOptions};
use crate::grid::{Grid, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub mask: Mask,
}

impl OcclusionMask {
    pub fn new(mask: Mask) -> Self {
        Self { mask }
    }

    /// Every foreground pixel occluded: the state before any view is refined.
    pub fn all_foreground(depth: &Grid<f64>) -> Self {
        Self::new(depth.map(|&d| is_valid_depth(d)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMap {
    pub values: Grid<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepaintMask {
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionOptions {
    /// Absolute depth tolerance in world units.
    pub tau: f64,
    /// Multiplier on the local depth variation of the novel view, added to
    /// `tau` so steep surfaces are not flagged by resampling error alone.
    pub slope_factor: f64,
    pub splat: SplatOptions,
    /// Fill reference cells that spread wider than the splat footprint in
    /// the novel view.
    pub densify: bool,
    /// Continue reference-view silhouettes along their osculating circle so
    /// surface just past the reference horizon is not reported as occluded.
    pub silhouette_extension: bool,
    /// Fraction of the remaining angle to the tangent ray that an extension
    /// may cover.
    pub extension_angle: f64,
    /// Longest extension, in reference pixel footprints.
    pub max_extension_px: f64,
}

impl OcclusionOptions {
    /// Defaults scaled to a scene of the given bounding radius.
    pub fn for_scene(bounding_radius: f64) -> Self {
        Self {
            tau: 0.01 * bounding_radius,
            ..Self::default()
        }
    }
}

impl Default for OcclusionOptions {
    fn default() -> Self {
        Self {
            tau: 0.01,
            slope_factor: 1.0,
            splat: SplatOptions::default(),
            densify: true,
            silhouette_extension: true,
            extension_angle: 0.8,
            max_extension_px: 32.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityOptions {
    /// Depth agreement test for reprojected samples, with the same meaning
    /// as in [`OcclusionOptions`].
    pub tau: f64,
    pub slope_factor: f64,
    /// Samples with cos below this are grazing and never count as best view.
    pub grazing_cos: f64,
    /// Footprint radius of reprojected samples, in pixels.
    pub radius: usize,
    pub densify: bool,
}

impl VisibilityOptions {
    pub fn for_scene(bounding_radius: f64) -> Self {
        Self {
            tau: 0.01 * bounding_radius,
            ..Self::default()
        }
    }
}

impl Default for VisibilityOptions {
    fn default() -> Self {
        Self {
            tau: 0.01,
            slope_factor: 1.0,
            grazing_cos: 0.05,
            radius: 1,
            densify: true,
        }
    }
}

fn check_camera<T>(cam: &CameraView, grid: &Grid<T>, context: &'static str) -> Result<()> {
    if grid.dims() != (cam.width, cam.height) {
        return Err(Error::shape(context, (cam.width, cam.height), grid.dims()));
    }
    Ok(())
}

/// Largest |D(q) - D(p)| over valid q in the `(2r+1)^2` window around p.
fn local_variation(depth: &Grid<f64>, r: usize) -> Grid<f64> {
    let (w, h) = depth.dims();
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let d = depth.as_slice()[i];
            if !is_valid_depth(d) {
                return 0.0;
            }
            let mut m: f64 = 0.0;
            for qy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for qx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let q = depth[(qx, qy)];
                    if is_valid_depth(q) {
                        m = m.max((q - d).abs());
                    }
                }
            }
            m
        })
        .collect();
    Grid::from_vec(w, h, data).expect("same length")
}

/// Back-project every foreground pixel, carrying `attr(x, y)` as payload.
fn back_project_buffer(
    cam: &CameraView,
    depth: &Grid<f64>,
    attr_dim: usize,
    attr: impl Fn(usize, usize) -> Vec<f64> + Sync,
) -> PointCloud3D {
    let (w, h) = depth.dims();
    let rows: Vec<(Vec<Vector3<f64>>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut pts = Vec::new();
            let mut attrs = Vec::new();
            for x in 0..w {
                let d = depth[(x, y)];
                if is_valid_depth(d) {
                    pts.push(cam.back_project_unchecked(Vector2::new(x as f64, y as f64), d));
                    attrs.extend(attr(x, y));
                }
            }
            (pts, attrs)
        })
        .collect();
    let mut points = Vec::new();
    let mut attributes = Vec::new();
    for (p, a) in rows {
        points.extend(p);
        attributes.extend(a);
    }
    PointCloud3D::new(points, attributes, attr_dim).expect("back-projected points are finite")
}

/// Largest |n . c| / |c| for a chord `c` between two samples to count as
/// lying on one smooth surface rather than spanning a depth discontinuity.
const CHORD_NORMAL_COS: f64 = 0.5;

/// Extra samples inside reference pixel cells that a novel camera sees
/// stretched beyond the splat footprint.
///
/// A cell is the quad of four adjacent foreground pixels. It is filled only
/// when all its edges are tangent to the normals at their ends, so depth
/// discontinuities are never bridged. Samples are placed bilinearly with
/// bilinearly blended attributes.
fn densify(
    cam: &CameraView,
    buf: &GBuffer,
    target: &CameraView,
    max_gap_px: f64,
    attr: &(impl Fn(usize, usize) -> Vec<f64> + Sync),
) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let (w, h) = buf.dims();
    if w < 2 || h < 2 {
        return (Vec::new(), Vec::new());
    }
    let sample = |x: usize, y: usize| -> Option<(Vector3<f64>, Vector3<f64>)> {
        let n = buf.normal_at(x, y)?;
        buf.has_depth(x, y).then(|| {
            (
                cam.back_project_unchecked(Vector2::new(x as f64, y as f64), buf.depth[(x, y)]),
                n,
            )
        })
    };
    let rows: Vec<(Vec<Vector3<f64>>, Vec<f64>)> = (0..h - 1)
        .into_par_iter()
        .map(|y| {
            let mut pts = Vec::new();
            let mut attrs = Vec::new();
            for x in 0..w - 1 {
                let corners = [sample(x, y), sample(x + 1, y), sample(x, y + 1), sample(x + 1, y + 1)];
                let [Some(a), Some(b), Some(c), Some(d)] = corners else {
                    continue;
                };
                let smooth = [(a, b), (c, d), (a, c), (b, d)].iter().all(|(p, q)| {
                    let chord = q.0 - p.0;
                    let len = chord.norm();
                    len == 0.0
                        || (p.1.dot(&chord).abs() <= CHORD_NORMAL_COS * len
                            && q.1.dot(&chord).abs() <= CHORD_NORMAL_COS * len)
                });
                if !smooth {
                    continue;
                }
                let px = |p: &Vector3<f64>| target.project(p).map(|(v, _)| v);
                let (Some(pa), Some(pb), Some(pc), Some(pd)) = (px(&a.0), px(&b.0), px(&c.0), px(&d.0)) else {
                    continue;
                };
                let span_u = (pb - pa).norm().max((pd - pc).norm());
                let span_v = (pc - pa).norm().max((pd - pb).norm());
                let nu = (span_u / max_gap_px).ceil() as usize;
                let nv = (span_v / max_gap_px).ceil() as usize;
                if nu <= 1 && nv <= 1 {
                    continue;
                }
                let (nu, nv) = (nu.max(1), nv.max(1));
                let attr_corners = [attr(x, y), attr(x + 1, y), attr(x, y + 1), attr(x + 1, y + 1)];
                for j in 0..=nv {
                    for i in 0..=nu {
                        // corners are already present
                        if (i == 0 || i == nu) && (j == 0 || j == nv) {
                            continue;
                        }
                        let (s, t) = (i as f64 / nu as f64, j as f64 / nv as f64);
                        let wts = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
                        pts.push(a.0 * wts[0] + b.0 * wts[1] + c.0 * wts[2] + d.0 * wts[3]);
                        let width = attr_corners[0].len();
                        attrs.extend((0..width).map(|k| (0..4).map(|q| wts[q] * attr_corners[q][k]).sum::<f64>()));
                    }
                }
            }
            (pts, attrs)
        })
        .collect();
    let mut points = Vec::new();
    let mut attributes = Vec::new();
    for (p, a) in rows {
        points.extend(p);
        attributes.extend(a);
    }
    (points, attributes)
}

/// Points continuing the reference surface past its silhouette.
///
/// At a boundary pixel with normal n, the surface is approximated by a
/// circle of curvature k (mean normal change per unit length towards the
/// interior neighbours) curving away along the tangent direction of the view
/// ray. Points are laid along that arc up to a fraction of the angle left
/// before the surface turns edge-on to the reference camera.
fn silhouette_points(cam: &CameraView, buf: &GBuffer, opts: &OcclusionOptions) -> Vec<Vector3<f64>> {
    let (w, h) = buf.dims();
    let center = cam.center();
    let point = |x: usize, y: usize| cam.back_project_unchecked(Vector2::new(x as f64, y as f64), buf.depth[(x, y)]);
    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                if !buf.has_depth(x, y) {
                    continue;
                }
                let Some(n) = buf.normal_at(x, y) else { continue };
                let neighbours = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                let inside = |&(qx, qy): &(usize, usize)| qx < w && qy < h && buf.has_depth(qx, qy);
                if neighbours.iter().all(inside) {
                    continue;
                }
                let p = point(x, y);
                let mut ks = Vec::new();
                for q in neighbours.iter().filter(|q| inside(q)) {
                    let Some(nq) = buf.normal_at(q.0, q.1) else { continue };
                    let dx = (point(q.0, q.1) - p).norm();
                    if dx > 0.0 {
                        ks.push((nq - n).norm() / dx);
                    }
                }
                if ks.is_empty() {
                    continue;
                }
                let k = ks.iter().sum::<f64>() / ks.len() as f64;
                if k < 1e-6 {
                    continue;
                }
                let ray = (p - center).normalize();
                let cos = -n.dot(&ray);
                if cos <= 0.0 {
                    continue;
                }
                let tangent = ray - n * ray.dot(&n);
                let tn = tangent.norm();
                if tn < 1e-12 {
                    continue;
                }
                let tangent = tangent / tn;
                let footprint = buf.depth[(x, y)] / cam.fx;
                let beta = (cos.min(1.0).asin() * opts.extension_angle).min(k * opts.max_extension_px * footprint);
                let arc = beta / k;
                let m = ((2.0 * arc / footprint).ceil() as usize).max(2);
                for i in 1..m {
                    let u = beta * i as f64 / (m - 1) as f64;
                    out.push(p + (tangent * u.sin() - n * (1.0 - u.cos())) / k);
                }
            }
            out.into_iter()
        })
        .collect()
}

/// Pixels of the novel view whose surface the reference view does not see.
///
/// The reference depth is back-projected and splatted into the novel view;
/// a foreground pixel is occluded where nothing lands or where the splatted
/// depth differs from the novel depth by more than the tolerance.
pub fn occlusion_mask(
    ref_cam: &CameraView,
    reference: &GBuffer,
    novel_cam: &CameraView,
    novel_depth: &Grid<f64>,
    opts: &OcclusionOptions,
) -> Result<OcclusionMask> {
    check_camera(ref_cam, &reference.depth, "occlusion reference depth")?;
    check_camera(novel_cam, novel_depth, "occlusion novel depth")?;
    reference.depth.check_shape(novel_depth, "occlusion_mask")?;

    let no_attr = |_: usize, _: usize| Vec::new();
    let mut cloud = back_project_buffer(ref_cam, &reference.depth, 0, no_attr);
    if opts.densify {
        let gap = (2 * opts.splat.radius).max(1) as f64;
        let (pts, _) = densify(ref_cam, reference, novel_cam, gap, &no_attr);
        cloud.extend(PointCloud3D::from_points(pts)?)?;
    }
    if opts.silhouette_extension {
        cloud.extend(PointCloud3D::from_points(silhouette_points(ref_cam, reference, opts))?)?;
    }
    let splat = splat_points_with(&cloud, novel_cam, &opts.splat);
    let variation = local_variation(novel_depth, opts.splat.radius.max(1));
    let (w, h) = novel_depth.dims();
    let mask = Grid::from_fn(w, h, |x, y| {
        let d = novel_depth[(x, y)];
        if !is_valid_depth(d) {
            return false;
        }
        let s = splat.depth[(x, y)];
        !is_valid_depth(s) || (d - s).abs() > opts.tau + opts.slope_factor * variation[(x, y)]
    });
    Ok(OcclusionMask { mask })
}

/// Elementwise AND.
pub fn intersect(a: &OcclusionMask, b: &OcclusionMask) -> Result<OcclusionMask> {
    a.mask.check_shape(&b.mask, "intersect")?;
    let data = a.mask.iter().zip(b.mask.iter()).map(|(&x, &y)| x && y).collect();
    Ok(OcclusionMask {
        mask: Grid::from_vec(a.mask.width(), a.mask.height(), data)?,
    })
}

/// Attribute 0 of the fragment that best matches `depth` at each pixel.
///
/// Like a point splat, but the z-buffer is replaced by a depth test against
/// the novel view: only fragments within the tolerance compete, and among
/// those a point's own pixel beats dilated footprints, then the closer depth
/// wins, then the lower index. A hidden surface therefore never shadows the
/// visible one, and reprojecting a view onto itself is exact.
fn reproject_attribute(
    cloud: &PointCloud3D,
    cam: &CameraView,
    radius: usize,
    depth: &Grid<f64>,
    tolerance: &Grid<f64>,
) -> Grid<Option<f64>> {
    let (w, h) = (cam.width, cam.height);
    let r = radius as i64;
    let fragments: Vec<(usize, bool, f64, usize)> = (0..cloud.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = Vec::new();
            if let Some((px, z)) = cam.project(&cloud.points()[i]) {
                let (cx, cy) = (px.x.round() as i64, px.y.round() as i64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (x, y) = (cx + dx, cy + dy);
                        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                            continue;
                        }
                        let pix = y as usize * w + x as usize;
                        let d = depth.as_slice()[pix];
                        let err = (z - d).abs();
                        if is_valid_depth(d) && err <= tolerance.as_slice()[pix] {
                            out.push((pix, dx != 0 || dy != 0, err, i));
                        }
                    }
                }
            }
            out.into_iter()
        })
        .collect();
    let mut best: Vec<Option<(bool, f64, usize)>> = vec![None; w * h];
    for (pix, dilated, err, i) in fragments {
        let cand = (dilated, err, i);
        let better = match &best[pix] {
            None => true,
            Some(cur) => cand
                .0
                .cmp(&cur.0)
                .then(cand.1.total_cmp(&cur.1))
                .then(cand.2.cmp(&cur.2))
                .is_lt(),
        };
        if better {
            best[pix] = Some(cand);
        }
    }
    let data = best
        .into_iter()
        .map(|b| b.map(|(_, _, i)| cloud.attribute(i)[0]))
        .collect();
    Grid::from_vec(w, h, data).expect("same length")
}

/// Best previous cosine per novel pixel.
///
/// Each previous view's per-pixel cos is carried as a point attribute
/// through back-projection into the novel view; a sample counts where its
/// depth agrees with the novel depth. `None` means no previous view saw the
/// pixel at all, `Some(0.0)` that it was only seen at grazing angles.
pub fn best_previous_cos(
    novel_cam: &CameraView,
    novel: &GBuffer,
    prev: &[(CameraView, GBuffer)],
    opts: &VisibilityOptions,
) -> Result<Grid<Option<f64>>> {
    check_camera(novel_cam, &novel.depth, "visibility novel buffer")?;
    let (w, h) = novel.dims();
    let variation = local_variation(&novel.depth, opts.radius.max(1));
    let tolerance = variation.map(|v| opts.tau + opts.slope_factor * v);
    let mut best: Grid<Option<f64>> = Grid::new(w, h, None);
    for (cam, buf) in prev {
        check_camera(cam, &buf.depth, "visibility previous buffer")?;
        let cos = buf.cos_theta(cam);
        let attr = |x: usize, y: usize| vec![cos[(x, y)]];
        let mut cloud = back_project_buffer(cam, &buf.depth, 1, attr);
        if opts.densify {
            let (pts, attrs) = densify(cam, buf, novel_cam, (2 * opts.radius).max(1) as f64, &attr);
            cloud.extend(PointCloud3D::new(pts, attrs, 1)?)?;
        }
        let seen = reproject_attribute(&cloud, novel_cam, opts.radius, &novel.depth, &tolerance);
        for (slot, c) in best.as_mut_slice().iter_mut().zip(seen.iter()) {
            let Some(c) = *c else { continue };
            let c = if c < opts.grazing_cos { 0.0 } else { c };
            *slot = Some(slot.map_or(c, |b| b.max(c)));
        }
    }
    Ok(best)
}

/// Full-resolution visibility: 0 on occlusion and on pixels no previous view
/// saw, 1 where the current view is no better than the best previous one
/// (and on background), otherwise the best previous cosine.
pub fn visibility_full(
    novel_cam: &CameraView,
    novel: &GBuffer,
    prev: &[(CameraView, GBuffer)],
    occ: &OcclusionMask,
    opts: &VisibilityOptions,
) -> Result<Grid<f64>> {
    novel.depth.check_shape(&occ.mask, "visibility occlusion mask")?;
    let best = best_previous_cos(novel_cam, novel, prev, opts)?;
    let now = novel.cos_theta(novel_cam);
    let (w, h) = novel.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        if !novel.has_depth(x, y) {
            return 1.0;
        }
        if occ.mask[(x, y)] {
            return 0.0;
        }
        match best[(x, y)] {
            None => 0.0,
            // a grazing current view cannot improve on anything
            Some(_) if now[(x, y)] < opts.grazing_cos => 1.0,
            Some(b) if now[(x, y)] <= b => 1.0,
            Some(b) => b,
        }
    }))
}

/// Average-pool a full-resolution map to `size x size`. A pooled texel that
/// contains any occluded pixel is forced to 0.
pub fn downsample(values: &Grid<f64>, occ: &OcclusionMask, size: usize) -> Result<VisibilityMap> {
    values.check_shape(&occ.mask, "downsample")?;
    let (w, h) = values.dims();
    if size == 0 || w % size != 0 || h % size != 0 || w / size != h / size {
        return Err(Error::invalid(format!(
            "cannot pool {w}x{h} to {size}x{size} with a square kernel"
        )));
    }
    let f = w / size;
    let pooled = Grid::from_fn(size, size, |tx, ty| {
        let mut sum = 0.0;
        for y in ty * f..(ty + 1) * f {
            for x in tx * f..(tx + 1) * f {
                if occ.mask[(x, y)] {
                    return 0.0;
                }
                sum += values[(x, y)];
            }
        }
        sum / (f * f) as f64
    });
    Ok(VisibilityMap { values: pooled })
}

/// Visibility of the novel view pooled to `size x size`.
pub fn visibility_map(
    novel_cam: &CameraView,
    novel: &GBuffer,
    prev: &[(CameraView, GBuffer)],
    occ: &OcclusionMask,
    size: usize,
    opts: &VisibilityOptions,
) -> Result<VisibilityMap> {
    let full = visibility_full(novel_cam, novel, prev, occ, opts)?;
    downsample(&full, occ, size)
}

/// Preserve where `V > 1 - t/T`; ties repaint.
pub fn binarize(v: &VisibilityMap, t: usize, total: usize) -> Result<RepaintMask> {
    if total == 0 || t > total {
        return Err(Error::invalid(format!("timestep {t} outside [0, {total}]")));
    }
    let threshold = 1.0 - t as f64 / total as f64;
    Ok(RepaintMask {
        mask: v.values.map(|&x| x > threshold),
    })
}
