use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of a pipeline run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Degrees between consecutive views on each side of the orbit.
    pub interval: f64,
    pub elevation: f64,
    pub camera_distance: f64,
    pub fov: f64,
    /// Square render resolution in pixels.
    pub resolution: usize,
    /// Square latent resolution; must divide `resolution`.
    pub latent_size: usize,
    /// Resample the working texture to `[width, height]` before the run.
    pub texture_size: Option<[usize; 2]>,
    pub total_timesteps: usize,
    pub inversion_steps: usize,
    pub guidance: f64,
    /// Depth agreement tolerance in world units; defaults to 1% of the
    /// asset's bounding radius.
    pub tau: Option<f64>,
    pub grazing_cos: f64,
    /// Steps of the final fit over all views.
    pub refine_steps: usize,
    pub refine_lr: f64,
    /// Steps used to bake each refined view into the working texture.
    pub bake_steps: usize,
    /// Skip the final fit and bake every view with `refine_steps` instead.
    pub incremental: bool,
    /// Recapture reference attention at every denoising step instead of once.
    pub per_step_reference: bool,
    /// Stop after the first `n` scheduled views.
    pub max_views: Option<usize>,
    /// Condition on a seeded prompt embedding (enables guidance).
    pub prompt: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            interval: 40.0,
            elevation: 0.0,
            camera_distance: 2.8,
            fov: 45.0,
            resolution: 256,
            latent_size: 64,
            texture_size: None,
            total_timesteps: 1000,
            inversion_steps: 30,
            guidance: 5.0,
            tau: None,
            grazing_cos: 0.05,
            refine_steps: 200,
            refine_lr: 0.5,
            bake_steps: 40,
            incremental: false,
            per_step_reference: false,
            max_views: None,
            prompt: true,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0 && self.interval <= 180.0) {
            return Err(Error::invalid(format!(
                "interval must be in (0, 180], got {}",
                self.interval
            )));
        }
        if !(self.elevation.abs() < 90.0) {
            return Err(Error::invalid(format!(
                "elevation must be in (-90, 90), got {}",
                self.elevation
            )));
        }
        positive("camera_distance", self.camera_distance)?;
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::invalid(format!("fov must be in (0, 180), got {}", self.fov)));
        }
        positive("guidance", self.guidance)?;
        positive("refine_lr", self.refine_lr)?;
        if let Some(tau) = self.tau {
            positive("tau", tau)?;
        }
        if !(0.0..1.0).contains(&self.grazing_cos) {
            return Err(Error::invalid(format!(
                "grazing_cos must be in [0, 1), got {}",
                self.grazing_cos
            )));
        }
        if self.resolution == 0 || self.latent_size == 0 || !self.resolution.is_multiple_of(self.latent_size) {
            return Err(Error::invalid(format!(
                "latent_size {} must be positive and divide resolution {}",
                self.latent_size, self.resolution
            )));
        }
        if matches!(self.texture_size, Some([w, h]) if w == 0 || h == 0) {
            return Err(Error::invalid("texture_size must be positive"));
        }
        if self.total_timesteps == 0 || self.inversion_steps == 0 || self.inversion_steps > self.total_timesteps {
            return Err(Error::invalid(format!(
                "need 0 < inversion_steps ({}) <= total_timesteps ({})",
                self.inversion_steps, self.total_timesteps
            )));
        }
        if self.max_views == Some(0) {
            return Err(Error::invalid("max_views must be at least 1"));
        }
        if self.refine_steps == 0 || self.bake_steps == 0 {
            return Err(Error::invalid("refine_steps and bake_steps must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json_str(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_json_str("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_fields_are_rejected() {
        assert!(matches!(
            PipelineConfig::from_json_str(r#"{"intervall": 40}"#),
            Err(Error::Json(_))
        ));
        assert!(PipelineConfig::from_json_str(r#"{"interval": 0}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"latent_size": 60}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"inversion_steps": 0}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"tau": -1}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"seed": -1}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"texture_size": [0, 4]}"#).is_err());
        let cfg = PipelineConfig::from_json_str(r#"{"interval": 60, "seed": 7}"#).unwrap();
        assert_eq!((cfg.interval, cfg.seed), (60.0, 7));
    }
}
