use log::warn;
use rayon::prelude::*;

use super::{bilinear_taps, rasterize_fragments, TexturedMesh};
use crate::error::{Error, Result};
use crate::gbuffer::GBuffer;
use crate::geometry::CameraView;
use crate::grid::{Grid, Image, Mask, Rgb};

/// Rows per scatter chunk. Fixed so partial sums merge in the same order
/// regardless of the thread pool size.
const SCATTER_ROWS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseLoss {
    pub value: f64,
    /// Set when the mask selected no pixels; `value` is then 0.
    pub empty_mask: bool,
}

/// Mean squared colour difference over masked pixels and all three channels.
pub fn mse_loss(rendered: &GBuffer, target: &Image, mask: &Mask) -> Result<MseLoss> {
    rendered.color.check_shape(target, "mse_loss target")?;
    rendered.color.check_shape(mask, "mse_loss mask")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in rendered.color.iter().zip(target.iter()).zip(mask.iter()) {
        if m {
            sum += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        warn!("mse_loss: empty mask");
        return Ok(MseLoss {
            value: 0.0,
            empty_mask: true,
        });
    }
    Ok(MseLoss {
        value: sum / (3 * n) as f64,
        empty_mask: false,
    })
}

/// Upstream colour gradient scattered onto the texture.
#[derive(Clone, Debug, PartialEq)]
pub struct TexelGradient {
    pub grad: Image,
    /// Sum of bilinear weights each texel received.
    pub weight: Grid<f64>,
}

/// Scatter `dl_dcolor` through the bilinear lookups of every covered pixel.
pub fn texture_backward(mesh: &TexturedMesh, cam: &CameraView, dl_dcolor: &Image) -> Result<TexelGradient> {
    if dl_dcolor.dims() != (cam.width, cam.height) {
        return Err(Error::shape(
            "texture_backward",
            (cam.width, cam.height),
            dl_dcolor.dims(),
        ));
    }
    let frags = rasterize_fragments(mesh, cam);
    let (tw, th) = mesh.texture.dims();
    let w = cam.width;
    let partials: Vec<(Vec<Rgb>, Vec<f64>)> = frags
        .as_slice()
        .par_chunks(SCATTER_ROWS * w)
        .zip(dl_dcolor.as_slice().par_chunks(SCATTER_ROWS * w))
        .map(|(fr, up)| {
            let mut grad = vec![[0.0; 3]; tw * th];
            let mut weight = vec![0.0; tw * th];
            for (f, g) in fr.iter().zip(up) {
                let Some(f) = f else { continue };
                for (k, wk) in bilinear_taps(f.uv, tw, th) {
                    for c in 0..3 {
                        grad[k][c] += wk * g[c];
                    }
                    weight[k] += wk;
                }
            }
            (grad, weight)
        })
        .collect();
    let mut grad = vec![[0.0; 3]; tw * th];
    let mut weight = vec![0.0; tw * th];
    for (g, wt) in partials {
        for k in 0..tw * th {
            for c in 0..3 {
                grad[k][c] += g[k][c];
            }
            weight[k] += wt[k];
        }
    }
    Ok(TexelGradient {
        grad: Grid::from_vec(tw, th, grad)?,
        weight: Grid::from_vec(tw, th, weight)?,
    })
}

/// One supervising view: pixels where `mask` is set are pulled towards `target`.
#[derive(Clone, Debug)]
pub struct RefineView {
    pub cam: CameraView,
    pub target: Image,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineOptions {
    pub steps: usize,
    /// Step size relative to the per-texel curvature; the iteration is
    /// monotone for `lr <= 1` and diverges past 2.
    pub lr: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { steps: 200, lr: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub mesh: TexturedMesh,
    /// Total loss before every step plus the final loss (`steps + 1` entries).
    pub losses: Vec<f64>,
}

struct Tap {
    pixel: usize,
    taps: Option<[(usize, f64); 4]>,
}

struct PreparedView {
    taps: Vec<Tap>,
    target: Vec<Rgb>,
    /// d(loss)/d(colour) per unit residual, 2 / (3 N).
    scale: f64,
}

fn prepare(mesh: &TexturedMesh, view: &RefineView) -> Result<PreparedView> {
    let dims = (view.cam.width, view.cam.height);
    if view.target.dims() != dims {
        return Err(Error::shape("refine target", dims, view.target.dims()));
    }
    if view.mask.dims() != dims {
        return Err(Error::shape("refine mask", dims, view.mask.dims()));
    }
    let frags = rasterize_fragments(mesh, &view.cam);
    let (tw, th) = mesh.texture.dims();
    let taps: Vec<Tap> = view
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(pixel, _)| Tap {
            pixel,
            taps: frags.as_slice()[pixel].map(|f| bilinear_taps(f.uv, tw, th)),
        })
        .collect();
    let target = taps.iter().map(|t| view.target.as_slice()[t.pixel]).collect();
    let scale = if taps.is_empty() {
        0.0
    } else {
        2.0 / (3 * taps.len()) as f64
    };
    Ok(PreparedView { taps, target, scale })
}

fn sample(texture: &[Rgb], taps: &Option<[(usize, f64); 4]>) -> Rgb {
    let mut out = [0.0; 3];
    if let Some(taps) = taps {
        for &(k, w) in taps {
            for c in 0..3 {
                out[c] += w * texture[k][c];
            }
        }
    }
    out
}

/// Gradient descent on the texels against the summed masked MSE of all views.
///
/// Each texel's step is divided by its own curvature (the weighted count of
/// pixels reading it), so one `lr` works across texture resolutions.
pub fn refine_texture(mesh: &TexturedMesh, views: &[RefineView], opts: &RefineOptions) -> Result<RefineOutcome> {
    if views.is_empty() {
        return Err(Error::invalid("refine_texture needs at least one view"));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {}",
            opts.lr
        )));
    }
    mesh.validate()?;
    let prepared = views.iter().map(|v| prepare(mesh, v)).collect::<Result<Vec<_>>>()?;
    let n_texels = mesh.texture.len();

    let mut curvature = vec![0.0; n_texels];
    for pv in &prepared {
        for t in pv.taps.iter().filter_map(|t| t.taps.as_ref()) {
            for &(k, w) in t {
                curvature[k] += pv.scale * w;
            }
        }
    }

    let mut texture = mesh.texture.as_slice().to_vec();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..=opts.steps {
        let mut loss = 0.0;
        let mut grad = vec![[0.0; 3]; n_texels];
        for pv in &prepared {
            let residuals: Vec<Rgb> = pv
                .taps
                .par_iter()
                .zip(pv.target.par_iter())
                .map(|(t, target)| {
                    let c = sample(&texture, &t.taps);
                    [c[0] - target[0], c[1] - target[1], c[2] - target[2]]
                })
                .collect();
            let sq: f64 = residuals.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum();
            if !pv.taps.is_empty() {
                loss += sq / (3 * pv.taps.len()) as f64;
            }
            for (t, r) in pv.taps.iter().zip(&residuals) {
                let Some(taps) = &t.taps else { continue };
                for &(k, w) in taps {
                    for c in 0..3 {
                        grad[k][c] += pv.scale * w * r[c];
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "texture refinement",
                timestep: step,
            });
        }
        losses.push(loss);
        if step == opts.steps {
            break;
        }
        for k in 0..n_texels {
            if curvature[k] <= 0.0 {
                continue;
            }
            for c in 0..3 {
                texture[k][c] = (texture[k][c] - opts.lr * grad[k][c] / curvature[k]).clamp(0.0, 1.0);
            }
        }
    }

    let mut out = mesh.clone();
    out.texture = Grid::from_vec(mesh.texture.width(), mesh.texture.height(), texture)?;
    Ok(RefineOutcome { mesh: out, losses })
}
