//! Deterministic DDIM: schedule, single-step updates, trajectory inversion
//! and sampling, masked repainting, and attention with key/value injection.
//! A small seeded [`ToyDenoiser`] stands in for a pretrained noise predictor.

mod attention;
mod ddim;
mod latent;
mod schedule;
mod toy;

pub use attention::{attention, AttentionFeatures};
pub use ddim::{
    ddim_invert_step, ddim_step, invert_trajectory, repaint_denoise, repaint_denoise_per_step, sample,
    sample_trajectory, DdimOptions, Trajectory,
};
pub use latent::{decode, decode_residual, encode, Latent, Tensor};
pub use schedule::NoiseSchedule;
pub use toy::{ToyConfig, ToyDenoiser};

use crate::error::Result;
use crate::grid::Grid;

/// Side inputs to the noise predictor. Every slot is optional.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    /// Depth at latent resolution, normalised by the caller.
    pub depth: Option<Grid<f64>>,
    pub prompt: Option<Vec<f64>>,
    /// Replaces the denoiser's own attention keys and values.
    pub reference_features: Option<AttentionFeatures>,
}

impl Conditioning {
    pub fn without_prompt(&self) -> Self {
        Self {
            prompt: None,
            ..self.clone()
        }
    }

    pub fn without_reference(&self) -> Self {
        Self {
            reference_features: None,
            ..self.clone()
        }
    }
}

/// A noise predictor. Implementations must be deterministic.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, x: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor>;

    /// Keys and values this denoiser's attention would compute for the
    /// input, or `None` if it has no attention layer.
    fn capture_features(&self, x: &Tensor, t: usize, cond: &Conditioning) -> Result<Option<AttentionFeatures>>;
}

/// Classifier-free guidance: `eps_u + g (eps_c - eps_u)`, where `eps_u`
/// drops the prompt. Without a prompt, or with `g = 1`, this is one call.
pub fn guided_noise(den: &dyn Denoiser, x: &Tensor, t: usize, cond: &Conditioning, guidance: f64) -> Result<Tensor> {
    let conditional = den.predict_noise(x, t, cond)?;
    if cond.prompt.is_none() || guidance == 1.0 {
        return Ok(conditional);
    }
    let unconditional = den.predict_noise(x, t, &cond.without_prompt())?;
    Ok(unconditional.axpby(1.0 - guidance, &conditional, guidance))
}
