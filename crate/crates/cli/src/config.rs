use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nas_core::latency::SynthDevice;
use nas_core::oracle::GradCheckSettings;
use nas_core::search::DEFAULT_SWEEP;
use nas_core::SearchConfig;
use serde::{Deserialize, Serialize};

/// Everything a command may need, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub search: SearchConfig,
    #[serde(default)]
    pub device: SynthDevice,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub gradcheck: GradCheckConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub samples: usize,
    pub noise_sigma_ms: f64,
    /// Fails the command when the measured RMSE is larger.
    #[serde(default)]
    pub max_rmse_ms: Option<f64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { samples: 100, noise_sigma_ms: 0.5, max_rmse_ms: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Training images used for the loss.
    pub batch_size: usize,
    /// Defaults to the search λ.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub settings: GradCheckSettings,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lambda: None,
            settings: GradCheckSettings { max_coords_per_param: Some(32), ..GradCheckSettings::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lambdas: DEFAULT_SWEEP.to_vec(), seeds: vec![0, 1, 2] }
    }
}

impl RunConfig {
    pub fn from_search(search: SearchConfig) -> Self {
        Self {
            search,
            device: SynthDevice::default(),
            validation: ValidationConfig::default(),
            gradcheck: GradCheckConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Reads the file, applies the seed override and makes `lut_path`
    /// relative to the config file's directory.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = seed {
            config.search.seed = seed;
        }
        config.search.arch = config.search.resolved_arch();
        if let Some(lut) = &config.search.lut_path {
            let base = path.parent().unwrap_or(Path::new(""));
            let resolved = std::path::absolute(base.join(lut))?;
            config.search.lut_path = Some(resolved.to_string_lossy().into_owned());
        }
        config.search.validate()?;
        Ok(config)
    }

    pub fn lut_path(&self) -> Result<PathBuf> {
        match &self.search.lut_path {
            Some(p) => Ok(PathBuf::from(p)),
            None => Err(crate::Usage(
                "search.lut_path is not set in the config; create a table with `nas lut-synth`".into(),
            )
            .into()),
        }
    }
}
