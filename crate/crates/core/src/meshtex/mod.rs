//! Textured triangle meshes: z-buffered rasterization with perspective-correct
//! UV interpolation and bilinear texture lookup, and the masked-MSE texel
//! optimiser that bakes refined views back into the texture.

mod optimize;
mod raster;

pub use optimize::{
    mse_loss, refine_texture, texture_backward, MseLoss, RefineOptions, RefineOutcome, RefineView, TexelGradient,
};
pub use raster::{rasterize, rasterize_fragments, Fragment};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::{Image, Rgb};

const NORMAL_TOL: f64 = 1e-6;

/// Triangle mesh with per-vertex normals and UVs. UV `(0, 0)` is the top-left
/// corner of the texture image; `v` grows downwards.
#[derive(Clone, Debug, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vector3<f64>>,
    pub uvs: Vec<Vector2<f64>>,
    pub texture: Image,
}

impl TexturedMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        normals: Vec<Vector3<f64>>,
        uvs: Vec<Vector2<f64>>,
        texture: Image,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            normals,
            uvs,
            texture,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.normals.len() != n || self.uvs.len() != n {
            return Err(Error::invalid(format!(
                "{} vertices but {} normals and {} uvs",
                n,
                self.normals.len(),
                self.uvs.len()
            )));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("face {f:?} indexes past {n} vertices")));
        }
        if !self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("vertex positions must be finite"));
        }
        if let Some(i) = self
            .normals
            .iter()
            .position(|nv| !((nv.norm() - 1.0).abs() <= NORMAL_TOL))
        {
            return Err(Error::invalid(format!("normal {i} is not unit length")));
        }
        if self
            .uvs
            .iter()
            .any(|uv| !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y))
        {
            return Err(Error::invalid("uvs must lie in [0, 1]"));
        }
        if self.texture.is_empty() {
            return Err(Error::invalid("texture must be at least 1x1"));
        }
        Ok(())
    }

    /// Latitude/longitude sphere centred at the origin. The seam column and
    /// the pole rows are duplicated so UVs stay continuous.
    pub fn uv_sphere(radius: f64, segments: usize, rings: usize, texture: Image) -> Result<Self> {
        if segments < 3 || rings < 2 || !(radius > 0.0) {
            return Err(Error::invalid("uv sphere needs >= 3 segments, >= 2 rings, radius > 0"));
        }
        let mut vertices = Vec::new();
        let mut normals = Vec::new();
        let mut uvs = Vec::new();
        for i in 0..=rings {
            let v = i as f64 / rings as f64;
            let polar = v * std::f64::consts::PI;
            for j in 0..=segments {
                let u = j as f64 / segments as f64;
                // u = 0.5 faces +z (the azimuth-0 camera)
                let lon = (u - 0.5) * std::f64::consts::TAU;
                let n = Vector3::new(polar.sin() * lon.sin(), polar.cos(), polar.sin() * lon.cos());
                vertices.push(n * radius);
                normals.push(n.normalize());
                uvs.push(Vector2::new(u, v));
            }
        }
        let stride = segments + 1;
        let mut faces = Vec::new();
        for i in 0..rings {
            for j in 0..segments {
                let a = i * stride + j;
                let b = a + 1;
                let c = a + stride;
                let d = c + 1;
                if i != 0 {
                    faces.push([a, c, b]);
                }
                if i != rings - 1 {
                    faces.push([b, c, d]);
                }
            }
        }
        Self::new(vertices, faces, normals, uvs, texture)
    }

    /// Axis-aligned cube with flat-shaded faces laid out on a 3x2 texture atlas.
    pub fn cube(half_size: f64, texture: Image) -> Result<Self> {
        if !(half_size > 0.0) {
            return Err(Error::invalid("cube half size must be positive"));
        }
        let axes: [(Vector3<f64>, Vector3<f64>, Vector3<f64>); 6] = [
            (Vector3::x(), -Vector3::z(), -Vector3::y()),
            (-Vector3::x(), Vector3::z(), -Vector3::y()),
            (Vector3::y(), Vector3::x(), Vector3::z()),
            (-Vector3::y(), Vector3::x(), -Vector3::z()),
            (Vector3::z(), Vector3::x(), -Vector3::y()),
            (-Vector3::z(), -Vector3::x(), -Vector3::y()),
        ];
        let inset = 0.5 / texture.width().max(texture.height()).max(1) as f64;
        let mut vertices = Vec::new();
        let mut normals = Vec::new();
        let mut uvs = Vec::new();
        let mut faces = Vec::new();
        for (k, (n, right, down)) in axes.iter().enumerate() {
            let (cu, cv) = ((k % 3) as f64 / 3.0, (k / 3) as f64 / 2.0);
            let base = vertices.len();
            for (su, sv) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)] {
                let p = (n + right * (2.0 * su - 1.0) + down * (2.0 * sv - 1.0)) * half_size;
                vertices.push(p);
                normals.push(*n);
                uvs.push(Vector2::new(
                    cu + inset + su * (1.0 / 3.0 - 2.0 * inset),
                    cv + inset + sv * (0.5 - 2.0 * inset),
                ));
            }
            faces.push([base, base + 1, base + 2]);
            faces.push([base, base + 2, base + 3]);
        }
        Self::new(vertices, faces, normals, uvs, texture)
    }

    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// The four texels a bilinear lookup at `uv` reads and their weights.
/// Texel centres sit at `(k + 0.5) / size`; lookups clamp to the edge.
#[inline]
pub fn bilinear_taps(uv: Vector2<f64>, width: usize, height: usize) -> [(usize, f64); 4] {
    let x = uv.x * width as f64 - 0.5;
    let y = uv.y * height as f64 - 0.5;
    let (xf, yf) = (x.floor(), y.floor());
    let (tx, ty) = (x - xf, y - yf);
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (x0, x1) = (clamp(xf, width), clamp(xf + 1.0, width));
    let (y0, y1) = (clamp(yf, height), clamp(yf + 1.0, height));
    [
        (y0 * width + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * width + x1, tx * (1.0 - ty)),
        (y1 * width + x0, (1.0 - tx) * ty),
        (y1 * width + x1, tx * ty),
    ]
}

pub fn sample_bilinear(texture: &Image, uv: Vector2<f64>) -> Rgb {
    let data = texture.as_slice();
    let mut out = [0.0; 3];
    for (i, w) in bilinear_taps(uv, texture.width(), texture.height()) {
        for (o, t) in out.iter_mut().zip(data[i]) {
            *o += w * t;
        }
    }
    out
}

/// Row-major index of the texel containing `uv`.
#[inline]
pub fn nearest_texel(uv: Vector2<f64>, width: usize, height: usize) -> usize {
    let x = ((uv.x * width as f64) as usize).min(width - 1);
    let y = ((uv.y * height as f64) as usize).min(height - 1);
    y * width + x
}
