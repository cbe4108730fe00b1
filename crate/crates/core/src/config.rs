//! Run configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::features::{FbankConfig, SAMPLE_RATE};
use crate::kws_train::KwsTrainConfig;
use crate::mdtc::MdtcConfig;
use crate::sv::SvConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Weight of false rejections relative to false acceptances.
    pub alpha: f64,
    /// Triggered segments shorter than this are extended backwards.
    pub min_segment_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: crate::eval::ALPHA,
            min_segment_s: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha={} must be positive", self.alpha)));
        }
        if !(self.min_segment_s >= 0.0 && self.min_segment_s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "min_segment_s={} must be non-negative",
                self.min_segment_s
            )));
        }
        Ok(())
    }

    pub fn min_segment_samples(&self) -> usize {
        (self.min_segment_s * SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FbankConfig,
    pub mdtc: MdtcConfig,
    pub kws_train: KwsTrainConfig,
    pub detector: DetectorConfig,
    pub sv: SvConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Checks every section and the agreement between them.
    pub fn validate(&self) -> Result<()> {
        self.features.validate(SAMPLE_RATE)?;
        self.mdtc.validate()?;
        self.kws_train.validate()?;
        self.kws_train.augment.validate(self.features.n_mels)?;
        self.detector.validate()?;
        self.sv.validate()?;
        self.eval.validate()?;
        for (name, dim) in [("mdtc", self.mdtc.input_dim), ("sv", self.sv.input_dim)] {
            if dim != self.features.n_mels {
                return Err(Error::InvalidConfig(format!(
                    "{name}.input_dim={dim} but features.n_mels={}",
                    self.features.n_mels
                )));
            }
        }
        Ok(())
    }

    /// Sets every seed in the file to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.kws_train.seed = seed;
        self.sv.train.seed = seed;
        self
    }
}
