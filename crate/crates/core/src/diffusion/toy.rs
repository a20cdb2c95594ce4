use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{attention, AttentionFeatures, Conditioning, Denoiser, Tensor};
use crate::error::{Error, Result};

const TIME_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    /// Latent channels in and out.
    pub channels: usize,
    /// Hidden width, also the attention width.
    pub hidden: usize,
    /// Side of the square convolution kernel (odd).
    pub kernel: usize,
    /// Attention tokens are means over `patch x patch` blocks.
    pub patch: usize,
    pub attention: bool,
    pub prompt_dim: usize,
    /// Weights are drawn with standard deviation `weight_scale / sqrt(fan_in)`.
    pub weight_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            hidden: 16,
            kernel: 3,
            patch: 8,
            attention: true,
            prompt_dim: 16,
            weight_scale: 0.5,
        }
    }
}

impl ToyConfig {
    /// Each output texel depends only on the same input texel.
    pub fn pointwise() -> Self {
        Self {
            kernel: 1,
            attention: false,
            ..Self::default()
        }
    }
}

/// Seeded convolution, patch attention and linear head.
///
/// `h = squash(conv([x; depth]) + b + W_t time(t))`, tokens are patch means of
/// `h`, attention output `o = attn(T W_q, T W_k, T W_v)` (or injected keys
/// and values), and `eps = H h + O o[patch] + P prompt`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    cfg: ToyConfig,
    /// `[hidden][in_channel][ky][kx]`
    conv: Vec<f64>,
    bias: Vec<f64>,
    time: DMatrix<f64>,
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    head_hidden: DMatrix<f64>,
    head_attention: DMatrix<f64>,
    head_prompt: DMatrix<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn time_features(t: usize) -> [f64; TIME_FEATURES] {
    std::array::from_fn(|i| {
        let freq = 10000f64.powf(-((i / 2) as f64) / (TIME_FEATURES / 2) as f64);
        let phase = t as f64 * freq;
        if i % 2 == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    })
}

/// Smooth odd saturating nonlinearity with slope at most 1; cheaper than tanh.
#[inline]
fn squash(v: f64) -> f64 {
    v / (1.0 + v * v).sqrt()
}

impl ToyDenoiser {
    pub fn new(seed: u64, cfg: ToyConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.hidden == 0 || cfg.patch == 0 || cfg.prompt_dim == 0 {
            return Err(Error::invalid("toy denoiser dimensions must be positive"));
        }
        if cfg.kernel.is_multiple_of(2) {
            return Err(Error::invalid("toy denoiser kernel must be odd"));
        }
        if !(cfg.weight_scale > 0.0 && cfg.weight_scale.is_finite()) {
            return Err(Error::invalid("weight scale must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_ch = cfg.channels + 1;
        let k2 = cfg.kernel * cfg.kernel;
        let s = cfg.weight_scale;
        let conv_std = s / ((in_ch * k2) as f64).sqrt();
        let normal = Normal::new(0.0, conv_std).expect("positive std");
        let conv = (0..cfg.hidden * in_ch * k2).map(|_| normal.sample(&mut rng)).collect();
        let bias = gaussian_matrix(&mut rng, cfg.hidden, 1, 0.1).as_slice().to_vec();
        let time = gaussian_matrix(&mut rng, cfg.hidden, TIME_FEATURES, s / (TIME_FEATURES as f64).sqrt());
        let d = cfg.hidden;
        let attn_std = 1.0 / (d as f64).sqrt();
        let wq = gaussian_matrix(&mut rng, d, d, attn_std);
        let wk = gaussian_matrix(&mut rng, d, d, attn_std);
        let wv = gaussian_matrix(&mut rng, d, d, attn_std);
        let head_std = s / (d as f64).sqrt();
        let head_hidden = gaussian_matrix(&mut rng, cfg.channels, d, head_std);
        let head_attention = gaussian_matrix(&mut rng, cfg.channels, d, head_std);
        let head_prompt = gaussian_matrix(
            &mut rng,
            cfg.channels,
            cfg.prompt_dim,
            1.0 / (cfg.prompt_dim as f64).sqrt(),
        );
        Ok(Self {
            cfg,
            conv,
            bias,
            time,
            wq,
            wk,
            wv,
            head_hidden,
            head_attention,
            head_prompt,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn check(&self, x: &Tensor, cond: &Conditioning) -> Result<()> {
        if x.channels() != self.cfg.channels {
            return Err(Error::invalid(format!(
                "denoiser expects {} channels, got {}",
                self.cfg.channels,
                x.channels()
            )));
        }
        if self.cfg.attention
            && (!x.width().is_multiple_of(self.cfg.patch) || !x.height().is_multiple_of(self.cfg.patch))
        {
            return Err(Error::invalid(format!(
                "latent {}x{} is not a multiple of the {} patch",
                x.width(),
                x.height(),
                self.cfg.patch
            )));
        }
        if let Some(depth) = &cond.depth {
            if depth.dims() != (x.width(), x.height()) {
                return Err(Error::shape(
                    "depth conditioning",
                    (x.width(), x.height()),
                    depth.dims(),
                ));
            }
        }
        if let Some(p) = &cond.prompt {
            if p.len() != self.cfg.prompt_dim {
                return Err(Error::invalid(format!(
                    "prompt embedding has {} entries, expected {}",
                    p.len(),
                    self.cfg.prompt_dim
                )));
            }
        }
        Ok(())
    }

    /// Hidden activations, `[hidden][y][x]`.
    fn trunk(&self, x: &Tensor, t: usize, cond: &Conditioning) -> Tensor {
        let (c_in, h, w) = x.shape();
        let k = self.cfg.kernel;
        let r = k / 2;
        let in_ch = c_in + 1;
        let (pw, ph) = (w + 2 * r, h + 2 * r);
        // zero-padded input planes, depth last
        let mut padded = vec![0.0; in_ch * ph * pw];
        for c in 0..in_ch {
            for y in 0..h {
                let row = &mut padded[(c * ph + y + r) * pw + r..][..w];
                if c < c_in {
                    row.copy_from_slice(&x.plane(c)[y * w..(y + 1) * w]);
                } else if let Some(d) = &cond.depth {
                    row.copy_from_slice(&d.as_slice()[y * w..(y + 1) * w]);
                }
            }
        }
        let tf = time_features(t);
        let planes: Vec<Vec<f64>> = (0..self.cfg.hidden)
            .into_par_iter()
            .map(|o| {
                let offset = self.bias[o] + (0..TIME_FEATURES).map(|j| self.time[(o, j)] * tf[j]).sum::<f64>();
                let weights = &self.conv[o * in_ch * k * k..(o + 1) * in_ch * k * k];
                let mut plane = vec![offset; h * w];
                for c in 0..in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = weights[(c * k + ky) * k + kx];
                            for y in 0..h {
                                let src = &padded[(c * ph + y + ky) * pw + kx..][..w];
                                let dst = &mut plane[y * w..(y + 1) * w];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                }
                plane.iter_mut().for_each(|v| *v = squash(*v));
                plane
            })
            .collect();
        Tensor::from_vec(self.cfg.hidden, h, w, planes.concat()).expect("hidden shape")
    }

    /// Patch-mean tokens, `n x hidden` with patches in row-major order.
    fn tokens(&self, hidden: &Tensor) -> DMatrix<f64> {
        let p = self.cfg.patch;
        let (d, h, w) = hidden.shape();
        let (pw, ph) = (w / p, h / p);
        let norm = (p * p) as f64;
        DMatrix::from_fn(pw * ph, d, |n, c| {
            let (px, py) = (n % pw, n / pw);
            let mut sum = 0.0;
            for y in py * p..(py + 1) * p {
                for x in px * p..(px + 1) * p {
                    sum += hidden.get(c, y, x);
                }
            }
            sum / norm
        })
    }

    fn own_features(&self, tokens: &DMatrix<f64>) -> AttentionFeatures {
        AttentionFeatures {
            keys: tokens * &self.wk,
            values: tokens * &self.wv,
        }
    }
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&self, x: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        self.check(x, cond)?;
        let hidden = self.trunk(x, t, cond);
        let (_, h, w) = x.shape();
        let attended = if self.cfg.attention {
            let tokens = self.tokens(&hidden);
            let queries = &tokens * &self.wq;
            let out = match &cond.reference_features {
                Some(feats) => attention(&queries, feats)?,
                None => attention(&queries, &self.own_features(&tokens))?,
            };
            // project once per token rather than per pixel
            Some(out * self.head_attention.transpose())
        } else {
            None
        };
        let prompt_bias: Vec<f64> = match &cond.prompt {
            Some(p) => (0..self.cfg.channels)
                .map(|c| (0..p.len()).map(|j| self.head_prompt[(c, j)] * p[j]).sum())
                .collect(),
            None => vec![0.0; self.cfg.channels],
        };
        let pw = w / self.cfg.patch;
        let d = self.cfg.hidden;
        let n = h * w;
        let mut out = vec![0.0; self.cfg.channels * n];
        for (c, plane) in out.chunks_mut(n).enumerate() {
            plane.fill(prompt_bias[c]);
            for k in 0..d {
                let wgt = self.head_hidden[(c, k)];
                for (o, v) in plane.iter_mut().zip(hidden.plane(k)) {
                    *o += wgt * v;
                }
            }
            if let Some(a) = &attended {
                for (i, o) in plane.iter_mut().enumerate() {
                    let (y, xx) = (i / w, i % w);
                    *o += a[((y / self.cfg.patch) * pw + xx / self.cfg.patch, c)];
                }
            }
        }
        Tensor::from_vec(self.cfg.channels, h, w, out)
    }

    fn capture_features(&self, x: &Tensor, t: usize, cond: &Conditioning) -> Result<Option<AttentionFeatures>> {
        if !self.cfg.attention {
            return Ok(None);
        }
        self.check(x, cond)?;
        let hidden = self.trunk(x, t, cond);
        Ok(Some(self.own_features(&self.tokens(&hidden))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::Rng;

    fn random_latent(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(3, 16, 16, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = ToyDenoiser::new(9, ToyConfig::default()).unwrap();
        let b = ToyDenoiser::new(9, ToyConfig::default()).unwrap();
        let x = random_latent(1);
        let cond = Conditioning {
            prompt: Some(vec![0.1; 16]),
            ..Default::default()
        };
        assert_eq!(
            a.predict_noise(&x, 500, &cond).unwrap(),
            b.predict_noise(&x, 500, &cond).unwrap()
        );
    }

    #[test]
    fn self_injection_is_identity() {
        let den = ToyDenoiser::new(3, ToyConfig::default()).unwrap();
        let x = random_latent(2);
        let cond = Conditioning::default();
        let own = den.capture_features(&x, 300, &cond).unwrap().unwrap();
        let injected = Conditioning {
            reference_features: Some(own),
            ..Default::default()
        };
        assert_eq!(
            den.predict_noise(&x, 300, &cond).unwrap(),
            den.predict_noise(&x, 300, &injected).unwrap()
        );
    }

    #[test]
    fn cross_injection_changes_output() {
        let den = ToyDenoiser::new(3, ToyConfig::default()).unwrap();
        let x = random_latent(2);
        let other = den
            .capture_features(&random_latent(5), 300, &Conditioning::default())
            .unwrap();
        let cond = Conditioning {
            reference_features: other,
            ..Default::default()
        };
        let plain = den.predict_noise(&x, 300, &Conditioning::default()).unwrap();
        assert!(den.predict_noise(&x, 300, &cond).unwrap().max_abs_diff(&plain) > 1e-6);
    }

    #[test]
    fn pointwise_variant_is_local() {
        let den = ToyDenoiser::new(4, ToyConfig::pointwise()).unwrap();
        let x = random_latent(6);
        let mut y = x.clone();
        y.set(1, 3, 3, 0.9);
        let (a, b) = (
            den.predict_noise(&x, 100, &Default::default()).unwrap(),
            den.predict_noise(&y, 100, &Default::default()).unwrap(),
        );
        for c in 0..3 {
            for yy in 0..16 {
                for xx in 0..16 {
                    if (yy, xx) != (3, 3) {
                        assert_eq!(a.get(c, yy, xx), b.get(c, yy, xx));
                    }
                }
            }
        }
        assert!(den.capture_features(&x, 100, &Default::default()).unwrap().is_none());
    }

    #[test]
    fn conditioning_shapes_checked() {
        let den = ToyDenoiser::new(1, ToyConfig::default()).unwrap();
        let x = random_latent(1);
        let bad_depth = Conditioning {
            depth: Some(Grid::new(8, 8, 0.0)),
            ..Default::default()
        };
        assert!(den.predict_noise(&x, 1, &bad_depth).is_err());
        let bad_prompt = Conditioning {
            prompt: Some(vec![0.0; 3]),
            ..Default::default()
        };
        assert!(den.predict_noise(&x, 1, &bad_prompt).is_err());
        assert!(den
            .predict_noise(&Tensor::zeros(2, 16, 16), 1, &Default::default())
            .is_err());
        assert!(den
            .predict_noise(&Tensor::zeros(3, 12, 12), 1, &Default::default())
            .is_err());
    }

    #[test]
    fn depth_and_prompt_change_prediction() {
        let den = ToyDenoiser::new(1, ToyConfig::default()).unwrap();
        let x = random_latent(1);
        let base = den.predict_noise(&x, 10, &Default::default()).unwrap();
        let depth = Conditioning {
            depth: Some(Grid::from_fn(16, 16, |x, _| x as f64 / 16.0)),
            ..Default::default()
        };
        assert!(den.predict_noise(&x, 10, &depth).unwrap().max_abs_diff(&base) > 1e-6);
        let prompt = Conditioning {
            prompt: Some(vec![0.5; 16]),
            ..Default::default()
        };
        assert!(den.predict_noise(&x, 10, &prompt).unwrap().max_abs_diff(&base) > 1e-6);
    }
}
