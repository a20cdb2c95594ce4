use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};

/// Channel-major `channels x height x width` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "tensor data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("{:?}", self.shape()),
                actual: format!("{:?}", other.shape()),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Tensor {
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        self.with_data(data)
    }

    fn with_data(&self, data: Vec<f64>) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Per texel: `self` where `keep` is set, `other` elsewhere.
    pub fn select(&self, keep: &Mask, other: &Tensor) -> Result<Tensor> {
        self.check_shape(other, "latent blend")?;
        if keep.dims() != (self.width, self.height) {
            return Err(Error::shape(
                "latent blend mask",
                (self.width, self.height),
                keep.dims(),
            ));
        }
        let n = self.width * self.height;
        let data = (0..self.data.len())
            .map(|i| {
                if keep.as_slice()[i % n] {
                    self.data[i]
                } else {
                    other.data[i]
                }
            })
            .collect();
        Ok(self.with_data(data))
    }
}

/// A latent at a given diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub data: Tensor,
    pub t: usize,
}

impl Latent {
    pub fn new(data: Tensor, t: usize) -> Self {
        Self { data, t }
    }
}

/// Image to latent: average-pool to `size x size` and map `[0, 1]` to
/// `[-1, 1]`. One latent channel per colour channel.
pub fn encode(image: &Image, size: usize) -> Result<Tensor> {
    let (w, h) = image.dims();
    if size == 0 || w % size != 0 || h % size != 0 || w / size != h / size {
        return Err(Error::invalid(format!(
            "cannot encode {w}x{h} to a {size}x{size} latent"
        )));
    }
    let f = w / size;
    let norm = (f * f) as f64;
    Ok(Tensor::from_fn(3, size, size, |c, ty, tx| {
        let mut sum = 0.0;
        for y in ty * f..(ty + 1) * f {
            for x in tx * f..(tx + 1) * f {
                sum += image[(x, y)][c];
            }
        }
        2.0 * sum / norm - 1.0
    }))
}

/// Latent to image by nearest upsampling, clamped to `[0, 1]`.
pub fn decode(latent: &Tensor, width: usize, height: usize) -> Result<Image> {
    check_decode(latent, width, height)?;
    let f = width / latent.width();
    Ok(Grid::from_fn(width, height, |x, y| {
        std::array::from_fn(|c| ((latent.get(c, y / f, x / f) + 1.0) / 2.0).clamp(0.0, 1.0))
    }))
}

/// Decode `latent` as a correction to `base`: each texel's change relative
/// to `encode(base)` is added to the pixels it covers. Texels that match
/// the encoding of `base` reproduce `base` exactly.
pub fn decode_residual(base: &Image, latent: &Tensor) -> Result<Image> {
    let (w, h) = base.dims();
    check_decode(latent, w, h)?;
    let reference = encode(base, latent.width())?;
    let f = w / latent.width();
    Ok(Grid::from_fn(w, h, |x, y| {
        std::array::from_fn(|c| {
            let delta = latent.get(c, y / f, x / f) - reference.get(c, y / f, x / f);
            if delta == 0.0 {
                base[(x, y)][c]
            } else {
                (base[(x, y)][c] + delta / 2.0).clamp(0.0, 1.0)
            }
        })
    }))
}

fn check_decode(latent: &Tensor, width: usize, height: usize) -> Result<()> {
    if latent.channels() != 3 {
        return Err(Error::invalid(format!(
            "decoding needs 3 latent channels, got {}",
            latent.channels()
        )));
    }
    let (lw, lh) = (latent.width(), latent.height());
    if lw == 0 || !width.is_multiple_of(lw) || !height.is_multiple_of(lh) || width / lw != height / lh {
        return Err(Error::invalid(format!(
            "cannot decode a {lw}x{lh} latent to {width}x{height}"
        )));
    }
    Ok(())
}
