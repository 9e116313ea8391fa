//! Experiment configuration: a strict TOML document.
//!
//! Unknown keys are rejected so a config file always means what it says, and
//! `parse(render(c)) == c` round-trips exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{GradEstimator, PolicyNetConfig, TrainConfig, TrainMode};
use crate::nn::{Activation, MlpSpec, OutputKind};
use crate::optim::{OptimizerConfig, PolicyKind};
use crate::tasks::BlobConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSuite {
    Blobs,
    Quadratic,
    Landscape2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub suite: TaskSuite,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_dim_x")]
    pub dim_x: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_conditioning_samples")]
    pub conditioning_samples: usize,
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    /// Quadratic suite: weight dim and Hessian eigenvalue range.
    #[serde(default = "default_quad_dim")]
    pub quad_dim: usize,
    #[serde(default = "default_min_eig")]
    pub min_eig: f64,
    #[serde(default = "default_max_eig")]
    pub max_eig: f64,
}

fn default_n_tasks() -> usize {
    8
}
fn default_n_classes() -> usize {
    3
}
fn default_dim_x() -> usize {
    2
}
fn default_samples_per_class() -> usize {
    20
}
fn default_conditioning_samples() -> usize {
    16
}
fn default_mean_scale() -> f64 {
    4.0
}
fn default_quad_dim() -> usize {
    2
}
fn default_min_eig() -> f64 {
    0.5
}
fn default_max_eig() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareSection {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Fraction of trajectories prepared with Adam (the rest use SGD).
    #[serde(default = "default_adam_fraction")]
    pub adam_fraction: f64,
    #[serde(default = "default_sam")]
    pub sam: bool,
    #[serde(default = "default_sam_rho")]
    pub sam_rho: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Minibatch size for episode gradients; 0 = full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_samples_per_trajectory")]
    pub samples_per_trajectory: usize,
    #[serde(default = "default_full_span_prob")]
    pub full_span_prob: f64,
}

fn default_learning_rate() -> f64 {
    0.005
}
fn default_adam_fraction() -> f64 {
    0.5
}
fn default_sam() -> bool {
    true
}
fn default_sam_rho() -> f64 {
    0.05
}
fn default_max_epochs() -> usize {
    32
}
fn default_patience() -> usize {
    5
}
fn default_samples_per_trajectory() -> usize {
    32
}
fn default_full_span_prob() -> f64 {
    0.1
}

impl Default for PrepareSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyNetSection {
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_trunk_hidden")]
    pub trunk_hidden: Vec<usize>,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    #[serde(default = "default_init_weight_scale")]
    pub init_weight_scale: f64,
    #[serde(default = "default_init_sigma_bias")]
    pub init_sigma_bias: f64,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![16]
}
fn default_embed_dim() -> usize {
    8
}
fn default_trunk_hidden() -> Vec<usize> {
    vec![64]
}
fn default_sigma_floor() -> f64 {
    crate::policy::DEFAULT_SIGMA_FLOOR
}
fn default_init_weight_scale() -> f64 {
    0.3
}
fn default_init_sigma_bias() -> f64 {
    -1.0
}

impl Default for PolicyNetSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha_decay")]
    pub alpha_decay: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_train_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_optimizer")]
    pub optimizer: PolicyKind,
    /// 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
    #[serde(default = "default_estimator")]
    pub estimator: GradEstimator,
}

fn default_alpha() -> f64 {
    0.001
}
fn default_alpha_decay() -> f64 {
    1.0
}
fn default_steps() -> usize {
    6000
}
fn default_k() -> usize {
    2
}
fn default_train_batch() -> usize {
    8
}
fn default_mode() -> TrainMode {
    TrainMode::LoHp
}
fn default_optimizer() -> PolicyKind {
    PolicyKind::Adam
}
fn default_estimator() -> GradEstimator {
    GradEstimator::Detached
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_latency_reps")]
    pub latency_reps: usize,
    #[serde(default = "default_cos_sim_pairs")]
    pub cos_sim_pairs: usize,
    /// k values for the sweep export; empty skips it.
    #[serde(default)]
    pub ksweep: Vec<usize>,
    #[serde(default = "default_verify")]
    pub verify: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_out_dir() -> String {
    "out".to_string()
}
fn default_latency_reps() -> usize {
    50
}
fn default_cos_sim_pairs() -> usize {
    200
}
fn default_verify() -> bool {
    true
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub net: NetSection,
    #[serde(default)]
    pub prepare: PrepareSection,
    #[serde(default)]
    pub policy_net: PolicyNetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.n_tasks == 0 {
            return Err(Error::InvalidArgument("task.n_tasks must be >= 1".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidArgument("run.seeds must be non-empty".into()));
        }
        if self.net.widths.len() < 2 && self.task.suite == TaskSuite::Blobs {
            return Err(Error::InvalidArgument(
                "net.widths needs input and output".into(),
            ));
        }
        if self.train.k == 0 {
            return Err(Error::InvalidArgument("train.k must be >= 1".into()));
        }
        self.optimizer_config(PolicyKind::Sgd).validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn blob_config(&self) -> BlobConfig {
        BlobConfig {
            n_episodes: self.task.n_tasks,
            n_classes: self.task.n_classes,
            dim_x: self.task.dim_x,
            samples_per_class: self.task.samples_per_class,
            mean_scale: self.task.mean_scale,
            conditioning_samples: self.task.conditioning_samples,
        }
    }

    pub fn net_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            self.net.widths.clone(),
            self.net.activation,
            OutputKind::Logits,
        )
    }

    pub fn optimizer_config(&self, policy: PolicyKind) -> OptimizerConfig {
        OptimizerConfig {
            policy,
            learning_rate: self.prepare.learning_rate,
            sam_enabled: self.prepare.sam,
            sam_rho: self.prepare.sam_rho,
            max_epochs: self.prepare.max_epochs,
            early_stop_patience: self.prepare.patience,
            batch_size: if self.prepare.batch_size == 0 {
                None
            } else {
                Some(self.prepare.batch_size)
            },
            ..Default::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.train.alpha,
            alpha_decay: self.train.alpha_decay,
            steps: self.train.steps,
            k: self.train.k,
            batch_size: self.train.batch_size,
            mode: self.train.mode,
            optimizer: self.train.optimizer,
            grad_clip: if self.train.grad_clip > 0.0 {
                Some(self.train.grad_clip)
            } else {
                None
            },
            estimator: self.train.estimator,
        }
    }

    pub fn policy_net_config(&self) -> PolicyNetConfig {
        PolicyNetConfig {
            encoder_hidden: self.policy_net.encoder_hidden.clone(),
            embed_dim: self.policy_net.embed_dim,
            trunk_hidden: self.policy_net.trunk_hidden.clone(),
            sigma_floor: self.policy_net.sigma_floor,
            init_weight_scale: self.policy_net.init_weight_scale,
            init_sigma_bias: self.policy_net.init_sigma_bias,
        }
    }
}
