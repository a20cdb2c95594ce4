//! File form of a pipeline run: the pipeline settings plus asset paths.
//! Relative paths resolve against the directory holding the config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Coarse mesh (OBJ). Its texture is what gets refined.
    pub mesh: PathBuf,
    /// Optional Gaussian cloud (PLY) used for the coarse renders.
    #[serde(default)]
    pub gaussians: Option<PathBuf>,
    /// Reference image (PNG) seen from azimuth 0.
    pub reference: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg.relative_to(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn relative_to(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.mesh);
        fix(&mut self.reference);
        fix(&mut self.output);
        if let Some(g) = &mut self.gaussians {
            fix(g);
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Error::from)
    }
}
