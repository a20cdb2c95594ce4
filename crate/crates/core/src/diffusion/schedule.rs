use crate::error::{Error, Result};

/// Variance-preserving DDIM schedule with signal rate `alpha[t]` and noise
/// rate `sigma[t]`, `alpha^2 + sigma^2 = 1`, and the subset of timesteps a
/// sampler visits.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    total: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    /// Visited timesteps in ascending order, always starting at 0.
    steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Scaled-linear betas from 0.00085 to 0.012 over `total` timesteps,
    /// visited at `steps` uniformly strided timesteps offset by one.
    pub fn scaled_linear(total: usize, steps: usize) -> Result<Self> {
        Self::with_betas(total, steps, 0.00085, 0.012)
    }

    pub fn with_betas(total: usize, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total < 2 {
            return Err(Error::invalid("schedule needs at least 2 timesteps"));
        }
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!("step count {steps} outside [1, {total}]")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("betas must satisfy 0 < start <= end < 1"));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alphas = Vec::with_capacity(total + 1);
        let mut sigmas = Vec::with_capacity(total + 1);
        alphas.push(1.0);
        sigmas.push(0.0);
        let mut cumulative = 1.0;
        for i in 0..total {
            let beta = (s0 + (s1 - s0) * i as f64 / (total - 1) as f64).powi(2);
            cumulative *= 1.0 - beta;
            alphas.push(cumulative.sqrt());
            sigmas.push((1.0 - cumulative).sqrt());
        }
        let stride = total / steps;
        let mut visited = vec![0];
        visited.extend((0..steps).map(|k| 1 + k * stride));
        Ok(Self {
            total,
            alphas,
            sigmas,
            steps: visited,
        })
    }

    /// Total number of diffusion timesteps `T`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    /// Visited timesteps, ascending, starting at 0.
    pub fn timesteps(&self) -> &[usize] {
        &self.steps
    }

    /// Number of sampling steps (visited timesteps excluding 0).
    pub fn num_steps(&self) -> usize {
        self.steps.len() - 1
    }

    /// Largest visited timestep.
    pub fn t_max(&self) -> usize {
        *self.steps.last().expect("never empty")
    }

    fn position(&self, t: usize) -> Result<usize> {
        self.steps
            .binary_search(&t)
            .map_err(|_| Error::invalid(format!("timestep {t} is not visited by the schedule")))
    }

    /// Visited timestep before `t`.
    pub fn prev(&self, t: usize) -> Result<usize> {
        match self.position(t)? {
            0 => Err(Error::invalid("no timestep before t = 0")),
            i => Ok(self.steps[i - 1]),
        }
    }

    /// Visited timestep after `t`.
    pub fn next(&self, t: usize) -> Result<usize> {
        let i = self.position(t)?;
        self.steps
            .get(i + 1)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no timestep after t = {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_preserving_and_monotone() {
        let s = NoiseSchedule::scaled_linear(1000, 30).unwrap();
        assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
        for t in 0..=1000 {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-9);
            if t > 0 {
                assert!(s.alpha(t) <= s.alpha(t - 1));
            }
        }
    }

    #[test]
    fn thirty_strided_steps() {
        let s = NoiseSchedule::scaled_linear(1000, 30).unwrap();
        assert_eq!(s.timesteps().len(), 31);
        assert_eq!(&s.timesteps()[..4], &[0, 1, 34, 67]);
        assert_eq!(s.t_max(), 958);
        assert_eq!(s.prev(34).unwrap(), 1);
        assert_eq!(s.next(0).unwrap(), 1);
        assert!(s.prev(0).is_err());
        assert!(s.next(958).is_err());
        assert!(s.prev(35).is_err());
    }

    #[test]
    fn cumulative_product_matches_direct_evaluation() {
        let s = NoiseSchedule::scaled_linear(1000, 10).unwrap();
        let mut prod = 1.0;
        for i in 0..500 {
            let b = (0.00085f64.sqrt() + (0.012f64.sqrt() - 0.00085f64.sqrt()) * i as f64 / 999.0).powi(2);
            prod *= 1.0 - b;
        }
        assert!((s.alpha(500) - prod.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(NoiseSchedule::scaled_linear(1000, 0).is_err());
        assert!(NoiseSchedule::scaled_linear(10, 11).is_err());
        assert!(NoiseSchedule::with_betas(1000, 10, 0.1, 0.01).is_err());
    }
}
