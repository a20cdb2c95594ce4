use std::path::{Path, PathBuf};

use log::info;
use repaint_core::diffusion::{
    decode_residual, encode, invert_trajectory, repaint_denoise, sample, Conditioning, DdimOptions, NoiseSchedule,
    ToyConfig, ToyDenoiser,
};
use repaint_core::fixtures::{scene, sphere_gaussians, Shape};
use repaint_core::io::{self, pfm, png, RunConfig};
use repaint_core::meshtex::{rasterize, refine_texture, RefineOptions, RefineView, TexturedMesh};
use repaint_core::metrics::{masked_mse, mse, psnr_from_mse};
use repaint_core::pipeline::{self, depth_condition, prompt_embedding, CoarseAsset, PipelineConfig};
use repaint_core::splat::{render, GaussianCloud};
use repaint_core::visibility::{
    downsample, intersect, occlusion_mask, visibility_full, OcclusionOptions, VisibilityMap, VisibilityOptions,
};
use repaint_core::{CameraView, Error, GBuffer, Grid};

use crate::{CameraArgs, Cli, Command, ShapeArg};

pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

enum Asset {
    Splat(GaussianCloud),
    Mesh(TexturedMesh),
}

impl Asset {
    fn load(path: &Path) -> CliResult<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => Ok(Asset::Splat(io::load_gaussians(path)?)),
            Some("obj") => Ok(Asset::Mesh(io::load_mesh(path)?)),
            _ => Err(usage(format!("{}: expected a .ply or .obj asset", path.display()))),
        }
    }

    fn gbuffer(&self, cam: &CameraView) -> GBuffer {
        match self {
            Asset::Splat(cloud) => render(cloud, cam, [0.0; 3]),
            Asset::Mesh(mesh) => rasterize(mesh, cam),
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            Asset::Mesh(mesh) => mesh.bounding_radius(),
            Asset::Splat(cloud) => cloud
                .gaussians
                .iter()
                .map(|g| g.mean.norm() + 3.0 * g.scale.max())
                .fold(0.0, f64::max),
        }
    }
}

struct Settings {
    pipeline: PipelineConfig,
    run: Option<RunConfig>,
}

fn settings(cli: &Cli) -> CliResult<Settings> {
    let run = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let mut pipeline = run.as_ref().map(|r| r.pipeline.clone()).unwrap_or_default();
    if let Some(seed) = cli.seed {
        pipeline.seed = seed;
    }
    Ok(Settings { pipeline, run })
}

fn camera(cfg: &PipelineConfig, args: &CameraArgs, azimuth: f64) -> CliResult<CameraView> {
    let res = args.resolution.unwrap_or(cfg.resolution);
    Ok(CameraView::orbit(
        azimuth,
        args.elevation.unwrap_or(cfg.elevation),
        args.distance.unwrap_or(cfg.camera_distance),
        args.fov.unwrap_or(cfg.fov),
        res,
        res,
    )?)
}

fn tau(cfg: &PipelineConfig, asset: &Asset) -> f64 {
    cfg.tau.unwrap_or(0.01 * asset.bounding_radius())
}

pub fn execute(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot configure {n} threads: {e}")))?;
    }
    let s = settings(cli)?;
    let cfg = &s.pipeline;
    match &cli.command {
        Command::Render {
            input,
            camera: cam_args,
            output,
            depth,
        } => {
            let asset = Asset::load(input)?;
            let cam = camera(cfg, cam_args, cam_args.azimuth)?;
            let gb = asset.gbuffer(&cam);
            png::save_rgb(output, &gb.color)?;
            if let Some(d) = depth {
                pfm::save_depth(d, &gb.depth)?;
            }
            Ok(())
        }
        Command::Occlusion {
            input,
            camera: cam_args,
            reference_azimuth,
            output,
        } => {
            let asset = Asset::load(input)?;
            let cam = camera(cfg, cam_args, cam_args.azimuth)?;
            let novel = asset.gbuffer(&cam);
            let opts = OcclusionOptions {
                tau: tau(cfg, &asset),
                ..OcclusionOptions::default()
            };
            let mut mask = None;
            for &a in reference_azimuth {
                let rc = camera(cfg, cam_args, a)?;
                let m = occlusion_mask(&rc, &asset.gbuffer(&rc), &cam, &novel.depth, &opts)?;
                mask = Some(match mask {
                    None => m,
                    Some(prev) => intersect(&prev, &m)?,
                });
            }
            let mask = mask.expect("clap requires a reference azimuth");
            println!(
                "occluded {} of {} foreground pixels",
                mask.mask.count(),
                novel.foreground().count()
            );
            png::save_mask(output, &mask.mask)?;
            Ok(())
        }
        Command::Visibility {
            input,
            camera: cam_args,
            neighbors,
            previous,
            output,
            map,
            latent_size,
        } => {
            let asset = Asset::load(input)?;
            let cam = camera(cfg, cam_args, cam_args.azimuth)?;
            let novel = asset.gbuffer(&cam);
            let t = tau(cfg, &asset);
            let occ_opts = OcclusionOptions {
                tau: t,
                ..OcclusionOptions::default()
            };
            let vis_opts = VisibilityOptions {
                tau: t,
                grazing_cos: cfg.grazing_cos,
                ..VisibilityOptions::default()
            };
            let mut occ = None;
            let mut prev = Vec::new();
            for (i, &a) in neighbors.iter().chain(previous).enumerate() {
                let rc = camera(cfg, cam_args, a)?;
                let gb = asset.gbuffer(&rc);
                if i < neighbors.len() {
                    let m = occlusion_mask(&rc, &gb, &cam, &novel.depth, &occ_opts)?;
                    occ = Some(match occ {
                        None => m,
                        Some(p) => intersect(&p, &m)?,
                    });
                }
                prev.push((rc, gb));
            }
            let occ = occ.expect("clap requires a neighbor");
            let full = visibility_full(&cam, &novel, &prev, &occ, &vis_opts)?;
            png::save_gray(output, &full)?;
            if let Some(path) = map {
                let pooled = downsample(&full, &occ, latent_size.unwrap_or(cfg.latent_size))?;
                pfm::save_frames(path, &[pfm::PfmFrame::from_gray(&pooled.values)])?;
            }
            Ok(())
        }
        Command::Invert {
            image,
            depth,
            steps,
            latent_size,
            output,
            reconstruction,
        } => {
            let img = png::load_rgb(image)?;
            let size = latent_size.unwrap_or(cfg.latent_size);
            let steps = steps.unwrap_or(cfg.inversion_steps);
            let (den, cond, sched, opts) = diffusion_setup(cfg, size, steps, depth.as_deref())?;
            let x0 = encode(&img, size)?;
            let traj = invert_trajectory(&x0, &den, &cond, &sched, sched.num_steps(), &opts)?;
            pfm::save_frames(output, &pfm::trajectory_frames(&traj))?;
            let back = sample(traj.last(), &den, &cond, &sched, &opts)?;
            println!(
                "inverted to t={}; round-trip max error {:e}",
                traj.last().t,
                back.data.max_abs_diff(&x0)
            );
            if let Some(path) = reconstruction {
                png::save_rgb(path, &decode_residual(&img, &back.data)?)?;
            }
            Ok(())
        }
        Command::Repaint {
            image,
            visibility,
            depth,
            steps,
            latent_size,
            output,
        } => {
            let img = png::load_rgb(image)?;
            let size = latent_size.unwrap_or(cfg.latent_size);
            let steps = steps.unwrap_or(cfg.inversion_steps);
            let vis = load_visibility(visibility, size)?;
            let (den, cond, sched, opts) = diffusion_setup(cfg, size, steps, depth.as_deref())?;
            let x0 = encode(&img, size)?;
            let traj = invert_trajectory(&x0, &den, &cond, &sched, sched.num_steps(), &opts)?;
            let out = repaint_denoise(traj.last(), &traj, &den, &cond, &vis, &sched, &opts)?;
            png::save_rgb(output, &decode_residual(&img, &out.data)?)?;
            Ok(())
        }
        Command::Refine {
            mesh,
            views,
            camera: cam_args,
            steps,
            lr,
            output,
        } => {
            let mesh = io::load_mesh(mesh)?;
            let views = views
                .iter()
                .map(|arg| parse_view(cfg, cam_args, &mesh, arg))
                .collect::<CliResult<Vec<_>>>()?;
            let opts = RefineOptions {
                steps: steps.unwrap_or(cfg.refine_steps),
                lr: lr.unwrap_or(cfg.refine_lr),
            };
            let out = refine_texture(&mesh, &views, &opts)?;
            println!(
                "loss {:e} -> {:e}",
                out.losses.first().copied().unwrap_or(0.0),
                out.losses.last().copied().unwrap_or(0.0)
            );
            let file = format!(
                "{}.png",
                output
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| usage("--output needs a file name"))?
            );
            io::save_mesh(output, &out.mesh, &file)?;
            Ok(())
        }
        Command::Pipeline { output } => {
            let run = s.run.as_ref().ok_or_else(|| usage("pipeline needs --config"))?;
            let mesh = io::load_mesh(&run.mesh)?;
            let asset = match &run.gaussians {
                Some(p) => CoarseAsset::Splat {
                    cloud: io::load_gaussians(p)?,
                    mesh,
                },
                None => CoarseAsset::Mesh(mesh),
            };
            let reference = png::load_rgb(&run.reference)?;
            let out_dir: PathBuf = output.clone().unwrap_or_else(|| run.output.clone());
            info!("writing run to {}", out_dir.display());
            let out = pipeline::run(cfg, &asset, &reference, Some(&out_dir))?;
            for v in &out.summary.views {
                println!(
                    "view {:>7}: occluded {:>6} px, repainted {:>5} texels, masked PSNR {}",
                    v.azimuth,
                    v.occluded_px,
                    v.repainted_texels,
                    v.masked_psnr_after.map_or("n/a".into(), |p| format!("{p:.2} dB"))
                );
            }
            Ok(())
        }
        Command::Metrics { a, b, mask } => {
            let (a, b) = (png::load_rgb(a)?, png::load_rgb(b)?);
            let m = match mask {
                Some(path) => {
                    let mask = png::load_mask(path)?;
                    masked_mse(&a, &b, &mask)?.ok_or_else(|| Error::InvalidInput("mask selects no pixels".into()))?
                }
                None => mse(&a, &b)?,
            };
            println!("psnr {}", psnr_from_mse(m));
            println!("mse {m}");
            Ok(())
        }
        Command::MakeFixture {
            shape,
            output,
            resolution,
            texture_size,
            gaussians,
        } => {
            let shape = match shape {
                ShapeArg::Sphere => Shape::Sphere,
                ShapeArg::Cube => Shape::Cube,
            };
            if gaussians.is_some() && shape != Shape::Sphere {
                return Err(usage("--gaussians is only available for the sphere"));
            }
            if *texture_size == 0 {
                return Err(usage("--texture-size must be positive"));
            }
            let res = resolution.unwrap_or(cfg.resolution);
            let sc = scene(shape, res, *texture_size)?;
            std::fs::create_dir_all(output).map_err(Error::from)?;
            io::save_mesh(&output.join("coarse.obj"), &sc.coarse, "coarse_texture.png")?;
            io::save_mesh(&output.join("truth.obj"), &sc.truth, "truth_texture.png")?;
            png::save_rgb(&output.join("reference.png"), &sc.reference)?;
            let ply = match gaussians {
                Some(n) => {
                    let cloud = sphere_gaussians(*n, 1.0, &sc.coarse.texture)?;
                    io::save_gaussians(&output.join("coarse.ply"), &cloud)?;
                    Some(PathBuf::from("coarse.ply"))
                }
                None => None,
            };
            let run = RunConfig {
                mesh: "coarse.obj".into(),
                gaussians: ply,
                reference: "reference.png".into(),
                output: "run".into(),
                pipeline: PipelineConfig {
                    resolution: res,
                    camera_distance: repaint_core::fixtures::SCENE_DISTANCE,
                    fov: repaint_core::fixtures::SCENE_FOV,
                    ..cfg.clone()
                },
            };
            run.pipeline.validate()?;
            std::fs::write(output.join("run.json"), run.to_json()? + "\n").map_err(Error::from)?;
            Ok(())
        }
    }
}

fn diffusion_setup(
    cfg: &PipelineConfig,
    size: usize,
    steps: usize,
    depth: Option<&Path>,
) -> CliResult<(ToyDenoiser, Conditioning, NoiseSchedule, DdimOptions)> {
    let toy = ToyConfig::default();
    let prompt = cfg.prompt.then(|| prompt_embedding(cfg.seed, toy.prompt_dim));
    let den = ToyDenoiser::new(cfg.seed, toy)?;
    let sched = NoiseSchedule::scaled_linear(cfg.total_timesteps, steps)?;
    let depth = match depth {
        Some(p) => {
            let d = pfm::load_depth(p)?;
            if d.width() % size != 0 || d.height() % size != 0 {
                return Err(CliError::Core(Error::InvalidInput(format!(
                    "depth map {}x{} does not pool to {size}x{size}",
                    d.width(),
                    d.height()
                ))));
            }
            Some(depth_condition(&d, size))
        }
        None => None,
    };
    let cond = Conditioning {
        depth,
        prompt,
        reference_features: None,
    };
    let opts = DdimOptions {
        guidance: cfg.guidance,
        ..DdimOptions::default()
    };
    Ok((den, cond, sched, opts))
}

/// Latent-resolution visibility from a PFM frame or a PNG, average pooled
/// if it is larger than the latent.
fn load_visibility(path: &Path, size: usize) -> CliResult<VisibilityMap> {
    let values = match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => pfm::load_depth(path)?,
        _ => png::load_gray(path)?,
    };
    let (w, h) = values.dims();
    if w != h || w % size != 0 {
        return Err(CliError::Core(Error::InvalidInput(format!(
            "visibility {w}x{h} does not pool to {size}x{size}"
        ))));
    }
    let f = w / size;
    let pooled = Grid::from_fn(size, size, |tx, ty| {
        let mut sum = 0.0;
        for y in ty * f..(ty + 1) * f {
            for x in tx * f..(tx + 1) * f {
                sum += values[(x, y)];
            }
        }
        (sum / (f * f) as f64).clamp(0.0, 1.0)
    });
    Ok(VisibilityMap { values: pooled })
}

fn parse_view(cfg: &PipelineConfig, args: &CameraArgs, mesh: &TexturedMesh, arg: &str) -> CliResult<RefineView> {
    let (az, files) = arg
        .split_once('=')
        .ok_or_else(|| usage(format!("view '{arg}' is not azimuth=target.png[,mask.png]")))?;
    let azimuth: f64 = az.parse().map_err(|_| usage(format!("bad azimuth '{az}'")))?;
    let mut parts = files.split(',');
    let target = png::load_rgb(Path::new(parts.next().unwrap_or_default()))?;
    let res = target.width();
    if target.height() != res {
        return Err(CliError::Core(Error::InvalidInput(
            "target images must be square".into(),
        )));
    }
    let cam = camera(
        cfg,
        &CameraArgs {
            resolution: Some(res),
            ..args.clone()
        },
        azimuth,
    )?;
    let mask = match parts.next() {
        Some(p) => png::load_mask(Path::new(p))?,
        None => rasterize(mesh, &cam).foreground(),
    };
    Ok(RefineView { cam, target, mask })
}
