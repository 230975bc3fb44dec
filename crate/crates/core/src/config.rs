//! Run configuration shared by every subcommand, read from and echoed to TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::SynthConfig;
use crate::error::{GlnError, Result};
use crate::evalmetrics::REPORT_CUTOFFS;
use crate::floorplan::{AlternationRule, DistanceMetric};
use crate::gln::{GlnConfig, TrainConfig};
use crate::map2vec::Map2VecConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of each location's samples used for training in the standard setting.
    pub train_ratio: f64,
    /// Fraction of the training part held out for early stopping; `None` keeps all.
    pub val_ratio: Option<f64>,
    /// Fraction of seen-location samples used for training in the zero-shot setting;
    /// the rest validates.
    pub zero_shot_train_ratio: f64,
    pub alternation: AlternationRule,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_ratio: 0.75,
            val_ratio: None,
            zero_shot_train_ratio: 0.75,
            alternation: AlternationRule::BfsDepth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metric: DistanceMetric,
    /// Largest distance on the emitted CDF curve, in meters.
    pub cdf_max: f64,
    pub cdf_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric: DistanceMetric::Euclidean,
            cdf_max: REPORT_CUTOFFS[REPORT_CUTOFFS.len() - 1] as f64 * 2.0,
            cdf_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub gln: GlnConfig,
    pub train: TrainConfig,
    pub map2vec: Map2VecConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GlnError::Config(format!("{source}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GlnError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| GlnError::io(path, e))
    }
}
