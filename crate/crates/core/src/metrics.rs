//! Image comparison metrics.

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};

fn check(a: &Image, b: &Image) -> Result<()> {
    a.check_shape(b, "image metric")?;
    if a.iter().chain(b.iter()).any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("image metric inputs must be finite"));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    if a.is_empty() {
        return Err(Error::invalid("image metric on an empty image"));
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// Mean squared error over masked pixels; `None` for an empty mask.
pub fn masked_mse(a: &Image, b: &Image, mask: &Mask) -> Result<Option<f64>> {
    check(a, b)?;
    a.check_shape(mask, "masked metric")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, q), &m) in a.iter().zip(b.iter()).zip(mask.iter()) {
        if m {
            sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / (3 * n) as f64))
}

/// `10 log10(1 / mse)` for a peak of 1; `+inf` for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn masked_psnr(a: &Image, b: &Image, mask: &Mask) -> Result<Option<f64>> {
    Ok(masked_mse(a, b, mask)?.map(psnr_from_mse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_is_infinite() {
        let a = Grid::new(4, 4, [0.3, 0.2, 0.9]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let a = Grid::new(5, 3, [0.2; 3]);
        let b = Grid::new(5, 3, [0.3; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = || Grid::from_fn(7, 9, |_, _| [rng.random(), rng.random(), rng.random()]);
        let (a, b) = (img(), img());
        let mut sum = 0.0f64;
        for y in 0..9 {
            for x in 0..7 {
                for c in 0..3 {
                    sum += (a[(x, y)][c] - b[(x, y)][c]) * (a[(x, y)][c] - b[(x, y)][c]);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (sum / (7.0 * 9.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(psnr(&Grid::new(2, 2, [0.0; 3]), &Grid::new(2, 3, [0.0; 3])).is_err());
    }

    #[test]
    fn masked_ignores_unmasked_pixels() {
        let a = Grid::from_vec(2, 1, vec![[0.0; 3], [1.0; 3]]).unwrap();
        let b = Grid::new(2, 1, [0.0; 3]);
        let mask = Grid::from_vec(2, 1, vec![true, false]).unwrap();
        assert_eq!(masked_mse(&a, &b, &mask).unwrap(), Some(0.0));
        assert_eq!(masked_mse(&a, &b, &Grid::new(2, 1, false)).unwrap(), None);
    }
}
