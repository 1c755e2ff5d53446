use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfac::{DampingMode, UpdateConfig};
use crate::metrics::{BregmanGenerator, OutputMetric, OutputModel};
use crate::nets::{LayerSpec, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricChoice {
    #[default]
    Fisher,
    GaussNewton,
    /// Bregman generator matched to the output model: log-sum-exp for
    /// categorical logits, `½‖y‖²` for gaussian means.
    Ggn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Kfac,
    Ngd,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    #[default]
    StandardNormal,
    /// Uniform on `[-1, 1]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    #[serde(default)]
    pub distribution: InputDistribution,
}

fn default_cap() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReparamSource {
    #[default]
    Identity,
    Random {
        seed: u64,
        #[serde(default = "default_cap")]
        cap: f64,
    },
    File {
        path: PathBuf,
    },
    Preset {
        name: String,
    },
}

/// Overrides for the pass/fail thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ToleranceOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<f64>,
}

fn default_probes() -> usize {
    32
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub output_model: OutputModel,
    #[serde(default)]
    pub metric: MetricChoice,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub damping_mode: DampingMode,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier on the `1/√fan_in` scale of the initial weights (biases
    /// excluded). Logistic layers need a gain near 3 to 4 to match the
    /// signal propagation of tanh layers at gain 1.
    #[serde(default = "default_gain")]
    pub init_gain: f64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub reparam: ReparamSource,
    #[serde(default)]
    pub tolerances: ToleranceOverrides,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.num_samples == 0 {
            return Err(Error::InvalidConfig("dataset.num_samples must be at least 1".into()));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::InvalidConfig(format!("init_gain {} must be positive", self.init_gain)));
        }
        if self.probes == 0 {
            return Err(Error::InvalidConfig("probes must be at least 1".into()));
        }
        if let ReparamSource::Random { cap, .. } = self.reparam {
            if !(cap >= 1.0) {
                return Err(Error::InvalidConfig(format!("reparam cap {cap} must be at least 1")));
            }
        }
        self.update_config().validate()?;
        self.output_model.validate()?;
        self.network()?;
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.architecture.layers.clone(), self.output_model.clone())
    }

    pub fn output_metric(&self) -> OutputMetric {
        match self.metric {
            MetricChoice::Fisher => OutputMetric::Fisher,
            MetricChoice::GaussNewton => OutputMetric::Euclidean,
            MetricChoice::Ggn => OutputMetric::Bregman(match self.output_model {
                OutputModel::Categorical { .. } => BregmanGenerator::LogSumExp,
                OutputModel::Gaussian { .. } => BregmanGenerator::HalfSquaredNorm,
            }),
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            learning_rate: self.learning_rate,
            damping: self.damping,
            damping_mode: self.damping_mode,
        }
    }
}
