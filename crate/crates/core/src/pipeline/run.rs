use std::path::{Path, PathBuf};

use log::info;
use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::schedule::{build_schedule, ViewSchedule};
use crate::diffusion::{
    decode_residual, encode, invert_trajectory, repaint_denoise, repaint_denoise_per_step, AttentionFeatures,
    Conditioning, DdimOptions, Denoiser, Latent, NoiseSchedule, Tensor, ToyConfig, ToyDenoiser, Trajectory,
};
use crate::error::{Error, Result};
use crate::gbuffer::{is_valid_depth, GBuffer};
use crate::geometry::CameraView;
use crate::grid::{Grid, Image, Mask};
use crate::io::{obj, pfm, png};
use crate::meshtex::{mse_loss, rasterize, refine_texture, sample_bilinear, RefineOptions, RefineView, TexturedMesh};
use crate::metrics::{masked_mse, psnr_from_mse};
use crate::splat::{render, GaussianCloud};
use crate::visibility::{
    downsample, intersect, occlusion_mask, visibility_full, OcclusionMask, OcclusionOptions, VisibilityMap,
    VisibilityOptions,
};

/// The coarse stage output. Texture refinement always happens on a mesh; a
/// splat asset brings the mesh its texture is first baked onto.
#[derive(Clone, Debug)]
pub enum CoarseAsset {
    Mesh(TexturedMesh),
    Splat { cloud: GaussianCloud, mesh: TexturedMesh },
}

impl CoarseAsset {
    pub fn mesh(&self) -> &TexturedMesh {
        match self {
            Self::Mesh(m) | Self::Splat { mesh: m, .. } => m,
        }
    }
}

/// Everything produced for one scheduled view.
#[derive(Clone, Debug)]
pub struct ViewOutput {
    pub azimuth: f64,
    pub cam: CameraView,
    pub coarse: GBuffer,
    /// `None` for the reference view.
    pub occlusion: Option<OcclusionMask>,
    pub visibility: Option<Grid<f64>>,
    pub visibility_map: Option<VisibilityMap>,
    pub fine: Image,
    /// Pixels whose refined colour was baked into the working texture.
    pub bake_mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub azimuth: f64,
    pub neighbors: Vec<f64>,
    pub foreground_px: usize,
    pub occluded_px: usize,
    /// Latent texels with visibility below 1.
    pub repainted_texels: usize,
    pub mean_visibility: f64,
    /// Pixels this view supervises in the final fit.
    pub owned_px: usize,
    pub masked_psnr_before: Option<f64>,
    pub masked_psnr_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: String,
    pub config: PipelineConfig,
    pub views: Vec<ViewMetrics>,
    pub total_masked_mse_before: Option<f64>,
    pub total_masked_mse_after: Option<f64>,
    pub refine_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub mesh: TexturedMesh,
    pub schedule: ViewSchedule,
    pub views: Vec<ViewOutput>,
    pub summary: RunSummary,
}

/// State shared by every view of a run.
pub struct RunContext {
    pub config: PipelineConfig,
    pub schedule: ViewSchedule,
    pub noise: NoiseSchedule,
    pub denoiser: Box<dyn Denoiser>,
    pub ddim: DdimOptions,
    pub occlusion: OcclusionOptions,
    pub visibility: VisibilityOptions,
    pub prompt: Option<Vec<f64>>,
    pub reference: Image,
    reference_features: Option<AttentionFeatures>,
    reference_trajectory: Option<Trajectory>,
}

impl RunContext {
    /// Builds the schedule, the toy denoiser and the reference attention
    /// features for a run on `mesh` against `reference`.
    pub fn new(config: &PipelineConfig, mesh: &TexturedMesh, reference: &Image) -> Result<Self> {
        let den = ToyDenoiser::new(config.seed, ToyConfig::default())?;
        Self::with_denoiser(config, mesh, reference, Box::new(den))
    }

    pub fn with_denoiser(
        config: &PipelineConfig,
        mesh: &TexturedMesh,
        reference: &Image,
        denoiser: Box<dyn Denoiser>,
    ) -> Result<Self> {
        config.validate()?;
        let res = config.resolution;
        if reference.dims() != (res, res) {
            return Err(Error::shape("reference image", (res, res), reference.dims()));
        }
        let schedule = build_schedule(config.interval, config.elevation)?;
        let noise = NoiseSchedule::scaled_linear(config.total_timesteps, config.inversion_steps)?;
        let radius = mesh.bounding_radius();
        let mut occlusion = OcclusionOptions::for_scene(radius);
        let mut visibility = VisibilityOptions::for_scene(radius);
        if let Some(tau) = config.tau {
            occlusion.tau = tau;
            visibility.tau = tau;
        }
        visibility.grazing_cos = config.grazing_cos;
        let prompt = config
            .prompt
            .then(|| prompt_embedding(config.seed, ToyConfig::default().prompt_dim));
        let ddim = DdimOptions {
            guidance: config.guidance,
            ..DdimOptions::default()
        };
        let mut ctx = Self {
            config: config.clone(),
            schedule,
            noise,
            denoiser,
            ddim,
            occlusion,
            visibility,
            prompt,
            reference: reference.clone(),
            reference_features: None,
            reference_trajectory: None,
        };
        ctx.capture_reference(mesh)?;
        Ok(ctx)
    }

    pub fn camera(&self, azimuth: f64) -> Result<CameraView> {
        let c = &self.config;
        CameraView::orbit(
            azimuth,
            c.elevation,
            c.camera_distance,
            c.fov,
            c.resolution,
            c.resolution,
        )
    }

    fn condition(&self, depth: &Grid<f64>) -> Conditioning {
        Conditioning {
            depth: Some(depth_condition(depth, self.config.latent_size)),
            prompt: self.prompt.clone(),
            reference_features: None,
        }
    }

    fn capture_reference(&mut self, mesh: &TexturedMesh) -> Result<()> {
        let cam = self.camera(0.0)?;
        let geometry = rasterize(mesh, &cam);
        let cond = self.condition(&geometry.depth);
        let x0 = encode(&self.reference, self.config.latent_size)?;
        if self.config.per_step_reference {
            let traj = invert_trajectory(
                &x0,
                self.denoiser.as_ref(),
                &cond,
                &self.noise,
                self.noise.num_steps(),
                &self.ddim,
            )?;
            self.reference_trajectory = Some(traj);
        } else {
            // one capture at mid schedule from a seeded forward-noised latent
            let t = self.config.total_timesteps / 2;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5245_4643);
            let (c, h, w) = x0.shape();
            let noise = Tensor::from_fn(c, h, w, |_, _, _| StandardNormal.sample(&mut rng));
            let xt = x0.axpby(self.noise.alpha(t), &noise, self.noise.sigma(t));
            self.reference_features = self.denoiser.capture_features(&xt, t, &cond)?;
        }
        Ok(())
    }
}

/// Stand-in text embedding: a seeded standard normal vector.
pub fn prompt_embedding(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f4d_5054);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Per latent texel: foreground depth mapped to `[0, 1]` with near at 1,
/// background 0.
pub fn depth_condition(depth: &Grid<f64>, size: usize) -> Grid<f64> {
    let valid: Vec<f64> = depth.iter().copied().filter(|&d| is_valid_depth(d)).collect();
    if valid.is_empty() {
        return Grid::new(size, size, 0.0);
    }
    let near = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let far = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (far - near).max(1e-12);
    let (fx, fy) = (depth.width() / size, depth.height() / size);
    Grid::from_fn(size, size, |tx, ty| {
        let (mut sum, mut n) = (0.0, 0usize);
        for y in ty * fy..(ty + 1) * fy {
            for x in tx * fx..(tx + 1) * fx {
                let d = depth[(x, y)];
                if is_valid_depth(d) {
                    sum += 1.0 - (d - near) / span;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / (fx * fy) as f64
        }
    })
}

/// Bilinear resample of a texture to `width x height`.
pub fn resample_texture(texture: &Image, width: usize, height: usize) -> Image {
    Grid::from_fn(width, height, |x, y| {
        let uv = Vector2::new((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
        sample_bilinear(texture, uv)
    })
}

fn refine_options(steps: usize, lr: f64) -> RefineOptions {
    RefineOptions { steps, lr }
}

/// Refine view `index` of the schedule given everything refined before it.
/// `mesh` is the working mesh: the coarse asset with earlier views baked in.
pub fn refine_view(ctx: &RunContext, mesh: &TexturedMesh, done: &[ViewOutput], index: usize) -> Result<ViewOutput> {
    let view = &ctx.schedule.views[index];
    let cam = ctx.camera(view.azimuth)?;
    let coarse = rasterize(mesh, &cam);
    let foreground = coarse.foreground();

    if index == 0 {
        // the reference view is never repainted
        return Ok(ViewOutput {
            azimuth: view.azimuth,
            cam,
            bake_mask: foreground,
            fine: ctx.reference.clone(),
            coarse,
            occlusion: None,
            visibility: None,
            visibility_map: None,
        });
    }

    let lookup = |j: usize| {
        done.get(j)
            .ok_or_else(|| Error::invalid(format!("neighbor view {j} of view {index} is not refined yet")))
    };
    let mut occ: Option<OcclusionMask> = None;
    for &j in &view.neighbors {
        let n = lookup(j)?;
        let m = occlusion_mask(&n.cam, &n.coarse, &cam, &coarse.depth, &ctx.occlusion)?;
        occ = Some(match occ {
            None => m,
            Some(prev) => intersect(&prev, &m)?,
        });
    }
    let occ = occ.ok_or_else(|| Error::invalid(format!("view {index} has no neighbors")))?;
    let previous: Vec<(CameraView, GBuffer)> = done.iter().map(|v| (v.cam.clone(), v.coarse.clone())).collect();
    let full = visibility_full(&cam, &coarse, &previous, &occ, &ctx.visibility)?;
    let vis = downsample(&full, &occ, ctx.config.latent_size)?;

    let x0 = encode(&coarse.color, ctx.config.latent_size)?;
    let cond = ctx.condition(&coarse.depth);
    let den = ctx.denoiser.as_ref();
    let traj = invert_trajectory(&x0, den, &cond, &ctx.noise, ctx.noise.num_steps(), &ctx.ddim)?;
    let x_t: &Latent = traj.last();
    let out = match &ctx.reference_trajectory {
        Some(reference) => repaint_denoise_per_step(x_t, &traj, den, &cond, reference, &vis, &ctx.noise, &ctx.ddim)?,
        None => {
            let cond = Conditioning {
                reference_features: ctx.reference_features.clone(),
                ..cond
            };
            repaint_denoise(x_t, &traj, den, &cond, &vis, &ctx.noise, &ctx.ddim)?
        }
    };
    let decoded = decode_residual(&coarse.color, &out.data)?;
    let fine = Grid::from_fn(decoded.width(), decoded.height(), |x, y| {
        if foreground[(x, y)] {
            decoded[(x, y)]
        } else {
            coarse.color[(x, y)]
        }
    });
    let bake_mask = Grid::from_fn(fine.width(), fine.height(), |x, y| {
        foreground[(x, y)] && full[(x, y)] < 1.0
    });
    Ok(ViewOutput {
        azimuth: view.azimuth,
        cam,
        coarse,
        occlusion: Some(occ),
        visibility: Some(full),
        visibility_map: Some(vis),
        fine,
        bake_mask,
    })
}

/// For every view, the foreground pixels whose nearest texel it sees at
/// the steepest angle of all views. Ties go to the earlier view.
pub fn ownership_masks(views: &[ViewOutput], texels: usize) -> Vec<Mask> {
    let mut best = vec![(f64::NEG_INFINITY, usize::MAX); texels];
    let cos: Vec<Grid<f64>> = views.iter().map(|v| v.coarse.cos_theta(&v.cam)).collect();
    for (k, v) in views.iter().enumerate() {
        for (i, id) in v.coarse.texel_id.iter().enumerate() {
            let Some(t) = *id else { continue };
            let c = cos[k].as_slice()[i];
            if c > best[t].0 {
                best[t] = (c, k);
            }
        }
    }
    views
        .iter()
        .enumerate()
        .map(|(k, v)| v.coarse.texel_id.map(|id| id.is_some_and(|t| best[t].1 == k)))
        .collect()
}

fn view_dir(root: &Path, azimuth: f64) -> PathBuf {
    root.join("views").join(format!("{azimuth}"))
}

fn persist_view(root: &Path, v: &ViewOutput) -> Result<()> {
    let dir = view_dir(root, v.azimuth);
    std::fs::create_dir_all(&dir)?;
    png::save_rgb(&dir.join("coarse.png"), &v.coarse.color)?;
    pfm::save_depth(&dir.join("depth.pfm"), &v.coarse.depth)?;
    let (w, h) = v.coarse.dims();
    let occ = v
        .occlusion
        .as_ref()
        .map(|o| o.mask.clone())
        .unwrap_or_else(|| Grid::new(w, h, false));
    png::save_mask(&dir.join("occlusion.png"), &occ)?;
    let vis = v.visibility.clone().unwrap_or_else(|| Grid::new(w, h, 1.0));
    png::save_gray(&dir.join("visibility.png"), &vis)?;
    png::save_rgb(&dir.join("fine.png"), &v.fine)?;
    Ok(())
}

fn write_summary(root: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(root.join("run.json"), text)?;
    Ok(())
}

fn bake_splat(cloud: &GaussianCloud, mesh: &TexturedMesh, ctx: &RunContext) -> Result<TexturedMesh> {
    let views = ctx
        .schedule
        .views
        .iter()
        .map(|v| {
            let cam = ctx.camera(v.azimuth)?;
            let splat = render(cloud, &cam, [0.0; 3]);
            let geometry = rasterize(mesh, &cam);
            let mask = Grid::from_fn(cam.width, cam.height, |x, y| {
                geometry.has_depth(x, y) && splat.alpha[(x, y)] > 0.5
            });
            Ok(RefineView {
                cam,
                target: splat.color,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(refine_texture(
        mesh,
        &views,
        &refine_options(ctx.config.refine_steps, ctx.config.refine_lr),
    )?
    .mesh)
}

/// Runs `f` on a dedicated pool of `threads` workers. Results do not
/// depend on the pool size.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build a pool of {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the whole schedule. With `out_dir`, per-view artifacts are written
/// as soon as each view completes, and `run.json` is written even if a
/// view fails.
pub fn run(
    config: &PipelineConfig,
    coarse: &CoarseAsset,
    reference: &Image,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    let mut mesh = coarse.mesh().clone();
    if let Some([w, h]) = config.texture_size {
        mesh.texture = resample_texture(&mesh.texture, w, h);
    }
    let ctx = RunContext::new(config, &mesh, reference)?;
    if let Some(root) = out_dir {
        std::fs::create_dir_all(root)?;
    }
    let mut summary = RunSummary {
        status: "running".into(),
        config: config.clone(),
        views: Vec::new(),
        total_masked_mse_before: None,
        total_masked_mse_after: None,
        refine_losses: Vec::new(),
    };
    let result = run_views(&ctx, coarse, mesh, out_dir, &mut summary);
    summary.status = match &result {
        Ok(_) => "ok".into(),
        Err(e) => format!("failed: {e}"),
    };
    if let Some(root) = out_dir {
        write_summary(root, &summary)?;
    }
    let (mesh, views) = result?;
    if let Some(root) = out_dir {
        let dir = root.join("mesh");
        std::fs::create_dir_all(&dir)?;
        obj::save_mesh(&dir.join("refined.obj"), &mesh, "texture.png")?;
    }
    Ok(RunOutput {
        mesh,
        schedule: ctx.schedule,
        views,
        summary,
    })
}

fn run_views(
    ctx: &RunContext,
    coarse: &CoarseAsset,
    mut mesh: TexturedMesh,
    out_dir: Option<&Path>,
    summary: &mut RunSummary,
) -> Result<(TexturedMesh, Vec<ViewOutput>)> {
    let cfg = &ctx.config;
    if let CoarseAsset::Splat { cloud, .. } = coarse {
        mesh = bake_splat(cloud, &mesh, ctx)?;
    }
    let bake_steps = if cfg.incremental {
        cfg.refine_steps
    } else {
        cfg.bake_steps
    };
    let count = cfg.max_views.map_or(ctx.schedule.len(), |n| n.min(ctx.schedule.len()));
    let mut done: Vec<ViewOutput> = Vec::with_capacity(count);
    for index in 0..count {
        let azimuth = ctx.schedule.views[index].azimuth;
        info!("refining view {index} at azimuth {azimuth}");
        let v = refine_view(ctx, &mesh, &done, index).map_err(|e| e.in_view(azimuth))?;
        if v.bake_mask.count() > 0 {
            let bake = RefineView {
                cam: v.cam.clone(),
                target: v.fine.clone(),
                mask: v.bake_mask.clone(),
            };
            mesh = refine_texture(&mesh, &[bake], &refine_options(bake_steps, cfg.refine_lr))
                .map_err(|e| e.in_view(azimuth))?
                .mesh;
        }
        if let Some(root) = out_dir {
            persist_view(root, &v)?;
        }
        summary.views.push(ViewMetrics {
            azimuth,
            neighbors: ctx.schedule.neighbor_azimuths(index),
            foreground_px: v.coarse.foreground().count(),
            occluded_px: v.occlusion.as_ref().map_or(0, |o| o.mask.count()),
            repainted_texels: v
                .visibility_map
                .as_ref()
                .map_or(0, |m| m.values.iter().filter(|&&x| x < 1.0).count()),
            mean_visibility: v
                .visibility_map
                .as_ref()
                .map_or(1.0, |m| m.values.iter().sum::<f64>() / m.values.len() as f64),
            owned_px: 0,
            masked_psnr_before: None,
            masked_psnr_after: None,
        });
        done.push(v);
    }

    let masks = ownership_masks(&done, mesh.texture.len());
    let targets: Vec<RefineView> = done
        .iter()
        .zip(&masks)
        .map(|(v, m)| RefineView {
            cam: v.cam.clone(),
            target: v.fine.clone(),
            mask: m.clone(),
        })
        .collect();
    let psnrs = |mesh: &TexturedMesh| -> Result<(Vec<Option<f64>>, f64)> {
        let mut total = 0.0;
        let mut out = Vec::new();
        for t in &targets {
            let gb = rasterize(mesh, &t.cam);
            total += mse_loss(&gb, &t.target, &t.mask)?.value;
            out.push(masked_mse(&gb.color, &t.target, &t.mask)?.map(psnr_from_mse));
        }
        Ok((out, total))
    };
    let (before, total_before) = psnrs(&mesh)?;
    if !cfg.incremental {
        let outcome = refine_texture(&mesh, &targets, &refine_options(cfg.refine_steps, cfg.refine_lr))?;
        mesh = outcome.mesh;
        summary.refine_losses = outcome.losses;
    }
    let (after, total_after) = psnrs(&mesh)?;
    for (k, m) in summary.views.iter_mut().enumerate() {
        m.owned_px = masks[k].count();
        m.masked_psnr_before = before[k];
        m.masked_psnr_after = after[k];
    }
    summary.total_masked_mse_before = Some(total_before);
    summary.total_masked_mse_after = Some(total_after);
    Ok((mesh, done))
}
