//! Per-pixel render outputs shared by the splat renderer, the mesh rasterizer
//! and the point splatter.

use nalgebra::{Vector2, Vector3};

use crate::geometry::CameraView;
use crate::grid::{Grid, Image, Mask, Rgb};

/// Depth value of pixels no surface covers.
pub const DEPTH_SENTINEL: f64 = f64::INFINITY;

#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite()
}

#[derive(Clone, Debug)]
pub struct GBuffer {
    pub color: Image,
    /// Camera-space z, [`DEPTH_SENTINEL`] where uncovered.
    pub depth: Grid<f64>,
    pub alpha: Grid<f64>,
    /// World-space unit normals; the zero vector marks "no normal".
    pub normal: Grid<Vector3<f64>>,
    /// Nearest texel (row-major index into the texture) of the visible
    /// fragment. Only the mesh rasterizer fills this.
    pub texel_id: Grid<Option<usize>>,
    /// Per-pixel payload carried by the point splatter, `attribute_dim`
    /// values per pixel, NaN where uncovered.
    pub attributes: Vec<f64>,
    pub attribute_dim: usize,
}

impl GBuffer {
    pub fn empty(width: usize, height: usize, background: Rgb) -> Self {
        Self {
            color: Grid::new(width, height, background),
            depth: Grid::new(width, height, DEPTH_SENTINEL),
            alpha: Grid::new(width, height, 0.0),
            normal: Grid::new(width, height, Vector3::zeros()),
            texel_id: Grid::new(width, height, None),
            attributes: Vec::new(),
            attribute_dim: 0,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    #[inline]
    pub fn has_depth(&self, x: usize, y: usize) -> bool {
        is_valid_depth(self.depth[(x, y)])
    }

    pub fn foreground(&self) -> Mask {
        self.depth.map(|&d| is_valid_depth(d))
    }

    pub fn normal_at(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let n = self.normal[(x, y)];
        (n != Vector3::zeros()).then_some(n)
    }

    pub fn attribute(&self, x: usize, y: usize) -> &[f64] {
        let i = self.depth.index(x, y) * self.attribute_dim;
        &self.attributes[i..i + self.attribute_dim]
    }

    /// `max(0, n . -v)` per pixel, where `v` is the unit view ray through the
    /// pixel. Zero on pixels without a normal.
    pub fn cos_theta(&self, cam: &CameraView) -> Grid<f64> {
        Grid::from_fn(self.width(), self.height(), |x, y| match self.normal_at(x, y) {
            Some(n) => {
                let ray = cam.ray_direction(Vector2::new(x as f64, y as f64));
                n.dot(&-ray).max(0.0)
            }
            None => 0.0,
        })
    }

    /// Fill `normal` from screen-space depth differences: back-project the
    /// neighbours and take the cross product of the two tangent directions.
    pub fn fill_normals_from_depth(&mut self, cam: &CameraView) {
        let (w, h) = self.dims();
        let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
            let d = self.depth[(x, y)];
            is_valid_depth(d).then(|| cam.back_project_unchecked(Vector2::new(x as f64, y as f64), d))
        };
        let tangent = |x0: Option<(usize, usize)>, c: (usize, usize), x1: Option<(usize, usize)>| {
            let pc = point(c.0, c.1)?;
            let p0 = x0.and_then(|(x, y)| point(x, y));
            let p1 = x1.and_then(|(x, y)| point(x, y));
            match (p0, p1) {
                (Some(a), Some(b)) => Some(b - a),
                (None, Some(b)) => Some(b - pc),
                (Some(a), None) => Some(pc - a),
                (None, None) => None,
            }
        };
        let center = cam.center();
        let normals = Grid::from_fn(w, h, |x, y| {
            if !self.has_depth(x, y) {
                return Vector3::zeros();
            }
            let left = (x > 0).then(|| (x - 1, y));
            let right = (x + 1 < w).then(|| (x + 1, y));
            let up = (y > 0).then(|| (x, y - 1));
            let down = (y + 1 < h).then(|| (x, y + 1));
            let (Some(tx), Some(ty)) = (tangent(left, (x, y), right), tangent(up, (x, y), down)) else {
                return Vector3::zeros();
            };
            let n = tx.cross(&ty);
            let norm = n.norm();
            if norm < 1e-15 {
                return Vector3::zeros();
            }
            let mut n = n / norm;
            let p = point(x, y).expect("depth checked above");
            if n.dot(&(center - p)) < 0.0 {
                n = -n;
            }
            n
        });
        self.normal = normals;
    }
}
