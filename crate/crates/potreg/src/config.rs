//! Run configuration: one TOML file drives every pipeline command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureSpec, Pollutant};
use crate::inference::{EvidenceEstimator, ScenarioConfig};
use crate::sampler::ChainConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReturnLevelConfig {
    /// Year horizons; each T becomes p = 1 / (35 136 · T).
    pub horizon_years: Vec<f64>,
    /// Extra explicit per-observation exceedance probabilities.
    pub p: Vec<f64>,
    pub n_replicates: usize,
}

impl Default for ReturnLevelConfig {
    fn default() -> Self {
        Self {
            horizon_years: vec![5.0, 10.0],
            p: vec![],
            n_replicates: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    /// Directory with the Model I fit's `posterior.csv` + `posterior_meta.json`.
    pub model1_dir: PathBuf,
    /// Directory with the Model II fit's artifacts.
    pub model2_dir: PathBuf,
    pub estimator: EvidenceEstimator,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            model1_dir: PathBuf::from("model1"),
            model2_dir: PathBuf::from("model2"),
            estimator: EvidenceEstimator::HarmonicMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossValidateConfig {
    pub min_exceedances: usize,
}

impl Default for CrossValidateConfig {
    fn default() -> Self {
        Self { min_exceedances: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub target_pollutant: Pollutant,
    pub output_dir: PathBuf,
    /// Threshold as an empirical quantile of the target. Exactly one of
    /// this and `threshold_value` must be set.
    pub threshold_quantile: Option<f64>,
    /// Threshold as an explicit concentration value.
    pub threshold_value: Option<f64>,
    pub features: FeatureSpec,
    pub chain: ChainConfig,
    pub return_levels: ReturnLevelConfig,
    pub scenario: ScenarioConfig,
    pub compare: CompareConfig,
    pub cross_validate: CrossValidateConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: PathBuf::from("data.csv"),
            target_pollutant: Pollutant::No,
            output_dir: PathBuf::from("out"),
            threshold_quantile: Some(0.90),
            threshold_value: None,
            features: FeatureSpec::default(),
            chain: ChainConfig::default(),
            return_levels: ReturnLevelConfig::default(),
            scenario: ScenarioConfig::default(),
            compare: CompareConfig::default(),
            cross_validate: CrossValidateConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.threshold_quantile, self.threshold_value) {
            (Some(q), None) => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(ConfigError::Invalid(format!(
                        "threshold_quantile = {q} must lie strictly inside (0, 1)"
                    )));
                }
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "set exactly one of threshold_quantile and threshold_value, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "set exactly one of threshold_quantile and threshold_value".into(),
                ))
            }
        }
        self.features
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.chain
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for &t in &self.return_levels.horizon_years {
            if !(t > 0.0) {
                return Err(ConfigError::Invalid(format!("horizon {t} must be positive")));
            }
        }
        for &p in &self.return_levels.p {
            if !(p > 0.0 && p < 1.0) {
                return Err(ConfigError::Invalid(format!(
                    "return-level probability {p} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
