//! JSON configuration documents for each subcommand.

use std::path::PathBuf;

use infominima::bound::BoundInputs;
use infominima::experiments::{load_idx, ScenarioConfig, SyntheticSpec, SyntheticTask};
use infominima::fisher::MetricOptions;
use infominima::net::{Activation, Dataset, NetworkSpec};
use infominima::regularizer::{RegConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

/// Where training and evaluation samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Samples drawn with the run seed from the task fixed by `spec.seed`.
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        limit: usize,
        #[serde(default)]
        test_limit: Option<usize>,
        /// Defaults to one more than the largest label present.
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self, seed: u64) -> infominima::Result<(Dataset, Option<Dataset>)> {
        match self {
            DataSource::Synthetic(spec) => {
                let (train, test) = SyntheticTask::new(spec)?.datasets(seed)?;
                Ok((train, Some(test)))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
                test_limit,
                num_classes,
            } => {
                let train = load_idx(train_images, train_labels, *limit, *num_classes)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        Some(load_idx(i, l, test_limit.unwrap_or(*limit), Some(train.num_classes()))?)
                    }
                    _ => None,
                };
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![64],
            activation: Activation::Tanh,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, train: &Dataset) -> infominima::Result<NetworkSpec> {
        let mut sizes = vec![train.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(train.num_classes());
        NetworkSpec::new(sizes, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataSource,
    pub net: NetConfig,
    pub schedule: TrainSchedule,
    pub reg: RegConfig,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Measure the trained model as well.
    pub metrics: Option<MetricOptions>,
}

/// Trained network as written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// `model.json` written by `train`.
    pub model: PathBuf,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub options: MetricOptions,
    /// Seed of the synthetic sample draw; use the training seed to measure on the training sample.
    #[serde(default)]
    pub seed: u64,
}

/// Evenly spaced points from `from` to `to` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

impl Sweep {
    pub fn linear(&self) -> Result<Vec<f64>, String> {
        self.check()?;
        let step = (self.to - self.from) / (self.points - 1) as f64;
        Ok((0..self.points).map(|i| self.from + step * i as f64).collect())
    }

    /// Points evenly spaced in `ln`; both ends must be positive.
    pub fn geometric(&self) -> Result<Vec<f64>, String> {
        if self.from <= 0.0 || self.to <= 0.0 {
            return Err("a geometric sweep needs positive endpoints".into());
        }
        let ln = Sweep { from: self.from.ln(), to: self.to.ln(), points: self.points };
        Ok(ln.linear()?.into_iter().map(f64::exp).collect())
    }

    fn check(&self) -> Result<(), String> {
        if self.points < 2 || !self.from.is_finite() || !self.to.is_finite() {
            return Err("a sweep needs finite endpoints and at least 2 points".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub inputs: BoundInputs,
    /// Range of `γ` for `sweep.csv`; defaults to `γ ± W/2` in 21 points.
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Geometric range of `V` for `v_sweep.csv`.
    #[serde(default)]
    pub v_sweep: Option<Sweep>,
}

impl BoundConfig {
    /// Accepts either this document or bare `BoundInputs`.
    pub fn from_value(value: serde_json::Value) -> serde_json::Result<Self> {
        if value.get("inputs").is_some() {
            serde_json::from_value(value)
        } else {
            Ok(BoundConfig { inputs: serde_json::from_value(value)?, sweep: None, v_sweep: None })
        }
    }

    pub fn gamma_sweep(&self) -> Sweep {
        self.sweep.unwrap_or_else(|| {
            let half = self.inputs.w as f64 / 2.0;
            Sweep { from: self.inputs.gamma - half, to: self.inputs.gamma + half, points: 21 }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
}

pub type ScenarioFile = ScenarioConfig;
