//! `repaint`: command-line front end for rendering, mask analysis,
//! inversion/repainting, texture refinement and full pipeline runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "repaint",
    version,
    about = "Progressive texture repainting for coarse 3D assets"
)]
pub struct Cli {
    /// Seed for every stochastic choice (denoiser weights, prompt embedding).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel work. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run configuration (JSON). Its pipeline section also supplies camera
    /// and resolution defaults for the other subcommands.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CameraArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub azimuth: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub elevation: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub distance: Option<f64>,
    #[arg(long)]
    pub fov: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Sphere,
    Cube,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a Gaussian cloud (.ply) or textured mesh (.obj).
    Render {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        /// Colour output (PNG).
        #[arg(long)]
        output: PathBuf,
        /// Depth output (PFM).
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Occlusion mask of the view at --azimuth relative to --reference-azimuth.
    Occlusion {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long = "reference-azimuth", required = true, num_args = 1..=2, allow_negative_numbers = true)]
        reference_azimuth: Vec<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Visibility map of the view at --azimuth given earlier views.
    Visibility {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        /// Neighbouring refined views, used for the occlusion test.
        #[arg(long, required = true, num_args = 1..=2, allow_negative_numbers = true)]
        neighbors: Vec<f64>,
        /// Further refined views that only contribute viewing angles.
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        previous: Vec<f64>,
        /// Full-resolution visibility (PNG).
        #[arg(long)]
        output: PathBuf,
        /// Pooled latent-resolution map (PFM).
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        latent_size: Option<usize>,
    },
    /// DDIM-invert an image and dump the latent trajectory.
    Invert {
        #[arg(long)]
        image: PathBuf,
        /// Depth map (PFM) for conditioning.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        latent_size: Option<usize>,
        /// Trajectory output (multi-frame PFM, one frame per latent channel).
        #[arg(long)]
        output: PathBuf,
        /// Decode of sampling back from the inverted latent (PNG).
        #[arg(long)]
        reconstruction: Option<PathBuf>,
    },
    /// Invert an image and repaint it under a visibility map.
    Repaint {
        #[arg(long)]
        image: PathBuf,
        /// Visibility at latent resolution (PFM) or any resolution
        /// divisible into it (PNG, grey levels in [0, 1]).
        #[arg(long)]
        visibility: PathBuf,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        latent_size: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit a mesh texture to target images at given azimuths.
    Refine {
        #[arg(long)]
        mesh: PathBuf,
        /// `azimuth=target.png` or `azimuth=target.png,mask.png`.
        #[arg(long = "view", required = true, allow_hyphen_values = true)]
        views: Vec<String>,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Output OBJ; MTL and texture PNG are written next to it.
        #[arg(long)]
        output: PathBuf,
    },
    /// Full progressive run from --config.
    Pipeline {
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// PSNR and MSE between two images, optionally under a mask.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Write a procedural scene and a run config pointing at it.
    MakeFixture {
        #[arg(long, value_enum, default_value_t = ShapeArg::Sphere)]
        shape: ShapeArg,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        /// Texture height in texels.
        #[arg(long, default_value_t = 64)]
        texture_size: usize,
        /// Also write a Gaussian cloud of this many splats.
        #[arg(long)]
        gaussians: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
