//! Experiment specification: one human-editable TOML file drives scenario
//! generation, vocabulary construction, training stages, and evaluation.

use catk_core::rollout::SamplerConfig;
use catk_core::training::{Strategy, TrainConfig};
use catk_core::world::DEFAULT_W_YAW;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub scenario: ScenarioSpec,
    pub vocab: VocabSpec,
    pub model: ModelSpec,
    pub pretrain: StageSpec,
    #[serde(default)]
    pub finetune: Vec<FinetuneSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Load scenarios from an existing file instead of generating.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "default_n_scenarios")]
    pub n_scenarios: usize,
    #[serde(default = "default_n_agents")]
    pub n_agents: usize,
    #[serde(default = "default_branch_probs")]
    pub branch_probs: [f64; 3],
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Exact held-out count; takes precedence over `holdout_frac`.
    #[serde(default)]
    pub holdout_count: Option<usize>,
    #[serde(default = "default_holdout_frac")]
    pub holdout_frac: f64,
}

fn default_n_scenarios() -> usize {
    300
}
fn default_n_agents() -> usize {
    2
}
fn default_branch_probs() -> [f64; 3] {
    [1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0]
}
fn default_noise_std() -> f64 {
    0.15
}
fn default_holdout_frac() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabSpec {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub size: usize,
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_vocab_size() -> usize {
    64
}
fn default_period() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_kind() -> String {
    "categorical".into()
}
fn default_hidden() -> usize {
    64
}
fn default_modes() -> usize {
    16
}
fn default_sigma() -> f64 {
    0.2
}

/// Training-stage knobs shared by pre-training and fine-tuning variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_scenarios: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_floor")]
    pub lr_floor_frac: f64,
    #[serde(default = "default_w_yaw")]
    pub w_yaw: f64,
    #[serde(default)]
    pub min_speed_filter: Option<f64>,
}

fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    3e-3
}
fn default_floor() -> f64 {
    0.01
}
fn default_w_yaw() -> f64 {
    DEFAULT_W_YAW
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub strategy: Strategy,
    #[serde(flatten)]
    pub stage: StageSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_threshold")]
    pub distance_threshold: f64,
}

fn default_k() -> usize {
    16
}
fn default_tau() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    #[serde(default = "default_k_infer")]
    pub k_infer: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_w_yaw")]
    pub w_yaw: f64,
}

fn default_rollouts() -> usize {
    16
}
fn default_k_infer() -> usize {
    16
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            rollouts: default_rollouts(),
            k_infer: default_k_infer(),
            tau: default_tau(),
            seed: 0,
            w_yaw: DEFAULT_W_YAW,
        }
    }
}

impl StageSpec {
    pub fn to_train_config(&self, strategy: Strategy, sampler: SamplerConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_scenarios: self.batch_scenarios,
            learning_rate: self.learning_rate,
            lr_floor_frac: self.lr_floor_frac,
            strategy,
            sampler,
            seed,
            w_yaw: self.w_yaw,
            min_speed_filter: self.min_speed_filter,
        }
    }
}

impl FinetuneSpec {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            k: self.k,
            k_infer: self.k,
            tau: self.tau,
            distance_threshold: self.distance_threshold,
        }
    }

    /// Row label for tables: strategy plus the K it ran with, when relevant.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Bc | Strategy::Deterministic => self.strategy.as_str().to_string(),
            _ => format!("{}_k{}", self.strategy.as_str(), self.k),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read spec {}: {e}", path.display())))?;
        let spec: ExperimentSpec = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() {
            return Err(CliError::Config("experiment name is empty".into()));
        }
        if let Some(f) = &self.scenario.file {
            if !f.exists() {
                return Err(CliError::Config(format!(
                    "scenario file {} does not exist",
                    f.display()
                )));
            }
        }
        if let Some(f) = &self.vocab.file {
            if !f.exists() {
                return Err(CliError::Config(format!(
                    "vocabulary file {} does not exist",
                    f.display()
                )));
            }
        }
        if self.model.kind != "categorical" && self.model.kind != "gmm" {
            return Err(CliError::Config(format!(
                "model.kind must be categorical or gmm, got {}",
                self.model.kind
            )));
        }
        if self.pretrain.epochs == 0 && self.finetune.is_empty() {
            return Err(CliError::Config("nothing to train".into()));
        }
        Ok(())
    }
}
