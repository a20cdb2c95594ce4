use std::borrow::Cow;

use log::warn;

use super::{guided_noise, Conditioning, Denoiser, Latent, NoiseSchedule, Tensor};
use crate::error::{Error, Result};
use crate::visibility::{binarize, VisibilityMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimOptions {
    /// Classifier-free guidance scale; only used when a prompt is present.
    pub guidance: f64,
    /// Inversion solves `x_t = invert(x_s, eps(x_t, t))` by fixed-point
    /// iteration until successive iterates differ by at most this much.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DdimOptions {
    fn default() -> Self {
        Self {
            guidance: 5.0,
            tolerance: 1e-12,
            max_iterations: 100,
        }
    }
}

/// One deterministic sampling step from `x.t` to the previous visited
/// timestep: `(a_prev / a_t)(x - s_t eps) + s_prev eps`.
pub fn ddim_step(x: &Latent, eps: &Tensor, sched: &NoiseSchedule) -> Result<Latent> {
    if x.t == 0 {
        return Err(Error::invalid("cannot step below t = 0"));
    }
    x.data.check_shape(eps, "ddim_step")?;
    let t = x.t;
    let prev = sched.prev(t)?;
    let (a_t, s_t, a_p, s_p) = (sched.alpha(t), sched.sigma(t), sched.alpha(prev), sched.sigma(prev));
    let ratio = a_p / a_t;
    let data = x.data.axpby(ratio, eps, s_p - ratio * s_t);
    Ok(Latent::new(data, prev))
}

/// Exact inverse of [`ddim_step`] for the same `eps`: from `x.t` to the next
/// visited timestep, `(a_next / a_t)(x - s_t eps) + s_next eps`.
pub fn ddim_invert_step(x: &Latent, eps: &Tensor, sched: &NoiseSchedule) -> Result<Latent> {
    x.data.check_shape(eps, "ddim_invert_step")?;
    let s = x.t;
    let next = sched.next(s)?;
    let (a_s, s_s, a_n, s_n) = (sched.alpha(s), sched.sigma(s), sched.alpha(next), sched.sigma(next));
    let ratio = a_n / a_s;
    let data = x.data.axpby(ratio, eps, s_n - ratio * s_s);
    Ok(Latent::new(data, next))
}

/// Latents of an inversion, ascending in `t`, starting at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Latent>,
}

impl Trajectory {
    pub fn get(&self, t: usize) -> Result<&Latent> {
        self.latents
            .binary_search_by_key(&t, |l| l.t)
            .map(|i| &self.latents[i])
            .map_err(|_| Error::MissingTimestep(t))
    }

    pub fn last(&self) -> &Latent {
        self.latents.last().expect("a trajectory holds at least x_0")
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

fn finite(x: Tensor, context: &'static str, t: usize) -> Result<Tensor> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { context, timestep: t })
    }
}

/// DDIM inversion over the first `steps` visited timesteps.
///
/// Each step is solved implicitly, `x_t = invert(x_s, eps(x_t, t))`, so that
/// sampling from `x_t` queries the denoiser at exactly the point that
/// produced it and walks back to `x_s`.
pub fn invert_trajectory(
    x0: &Tensor,
    den: &dyn Denoiser,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    steps: usize,
    opts: &DdimOptions,
) -> Result<Trajectory> {
    if steps > sched.num_steps() {
        return Err(Error::invalid(format!(
            "{steps} inversion steps requested, schedule visits {}",
            sched.num_steps()
        )));
    }
    let mut latents = vec![Latent::new(finite(x0.clone(), "ddim inversion input", 0)?, 0)];
    if steps == 0 {
        return Ok(Trajectory { latents });
    }
    // noise at the current end of the trajectory, seeding the next solve
    let mut eps = finite(guided_noise(den, x0, 0, cond, opts.guidance)?, "ddim inversion", 0)?;
    for _ in 0..steps {
        let xs = latents.last().expect("non-empty");
        let next = sched.next(xs.t)?;
        let mut xt = ddim_invert_step(xs, &eps, sched)?;
        let mut converged = false;
        for _ in 0..opts.max_iterations {
            eps = finite(
                guided_noise(den, &xt.data, next, cond, opts.guidance)?,
                "ddim inversion",
                next,
            )?;
            let refined = ddim_invert_step(xs, &eps, sched)?;
            let change = refined.data.max_abs_diff(&xt.data);
            xt = refined;
            if !change.is_finite() {
                return Err(Error::NonFinite {
                    context: "ddim inversion",
                    timestep: next,
                });
            }
            if change <= opts.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            warn!("inversion at t={next} did not reach tolerance {:e}", opts.tolerance);
        }
        latents.push(xt);
    }
    Ok(Trajectory { latents })
}

/// Deterministic sampling from `x.t` down to 0; returns every latent,
/// descending in `t`.
pub fn sample_trajectory(
    x: &Latent,
    den: &dyn Denoiser,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    opts: &DdimOptions,
) -> Result<Vec<Latent>> {
    let mut out = vec![x.clone()];
    while out.last().expect("non-empty").t > 0 {
        let cur = out.last().expect("non-empty");
        let eps = finite(
            guided_noise(den, &cur.data, cur.t, cond, opts.guidance)?,
            "ddim sampling",
            cur.t,
        )?;
        let next = ddim_step(cur, &eps, sched)?;
        let data = finite(next.data, "ddim sampling", next.t)?;
        out.push(Latent::new(data, next.t));
    }
    Ok(out)
}

/// Final latent of [`sample_trajectory`].
pub fn sample(
    x: &Latent,
    den: &dyn Denoiser,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    opts: &DdimOptions,
) -> Result<Latent> {
    Ok(sample_trajectory(x, den, cond, sched, opts)?.pop().expect("non-empty"))
}

/// Sample from `x_init` while re-imposing the inverted latents wherever the
/// visibility map says to preserve.
///
/// At each step from `t` the denoised latent is blended with the inverted
/// latent at the previous timestep through `binarize(vis, t, T)`: preserved
/// texels come from the inversion, the rest from the sampler.
pub fn repaint_denoise(
    x_init: &Latent,
    inverted: &Trajectory,
    den: &dyn Denoiser,
    cond: &Conditioning,
    vis: &VisibilityMap,
    sched: &NoiseSchedule,
    opts: &DdimOptions,
) -> Result<Latent> {
    repaint_loop(x_init, inverted, den, |_| Ok(Cow::Borrowed(cond)), vis, sched, opts)
}

/// [`repaint_denoise`] with the reference keys and values recaptured at
/// every step from the reference trajectory's latent at that timestep.
#[allow(clippy::too_many_arguments)]
pub fn repaint_denoise_per_step(
    x_init: &Latent,
    inverted: &Trajectory,
    den: &dyn Denoiser,
    cond: &Conditioning,
    reference: &Trajectory,
    vis: &VisibilityMap,
    sched: &NoiseSchedule,
    opts: &DdimOptions,
) -> Result<Latent> {
    let base = cond.without_reference();
    repaint_loop(
        x_init,
        inverted,
        den,
        |t| {
            let features = den.capture_features(&reference.get(t)?.data, t, &base)?;
            Ok(Cow::Owned(Conditioning {
                reference_features: features,
                ..base.clone()
            }))
        },
        vis,
        sched,
        opts,
    )
}

fn repaint_loop<'c>(
    x_init: &Latent,
    inverted: &Trajectory,
    den: &dyn Denoiser,
    cond_at: impl Fn(usize) -> Result<Cow<'c, Conditioning>>,
    vis: &VisibilityMap,
    sched: &NoiseSchedule,
    opts: &DdimOptions,
) -> Result<Latent> {
    let dims = (x_init.data.width(), x_init.data.height());
    if vis.values.dims() != dims {
        return Err(Error::shape("visibility vs latent", dims, vis.values.dims()));
    }
    let mut x = x_init.clone();
    while x.t > 0 {
        let t = x.t;
        let cond = cond_at(t)?;
        let eps = finite(guided_noise(den, &x.data, t, &cond, opts.guidance)?, "repaint", t)?;
        let denoised = ddim_step(&x, &eps, sched)?;
        let keep = binarize(vis, t, sched.total())?;
        let preserved = inverted.get(denoised.t)?;
        let data = preserved.data.select(&keep.mask, &denoised.data)?;
        x = Latent::new(finite(data, "repaint", denoised.t)?, denoised.t);
    }
    Ok(x)
}
