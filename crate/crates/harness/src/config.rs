//! TOML experiment configuration with every default materialised.

use std::path::{Path, PathBuf};

use iee_core::engine::{EngineConfig, GrowInit, GrowRule, OptimConfig, Strategy};
use iee_core::importance::Criterion;
use iee_core::nn::ModelSpec;
use iee_core::sparsity::{InitDistribution, Layout, PlanMode, Scope, SparsityPlan};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub log: LogConfig,
}

fn default_name() -> String {
    "run".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths of an MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Channels of the CNN's conv blocks.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "yes")]
    pub batchnorm: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![300, 100]
}

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Uniform,
    Erk,
    NonUniform,
    NOfM,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub mode: PlanKind,
    pub sparsity: f64,
    /// Initial distribution of a non-uniform plan.
    pub init: InitDistribution,
    pub n: usize,
    pub m: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            mode: PlanKind::Uniform,
            sparsity: 0.9,
            init: InitDistribution::Uniform,
            n: 2,
            m: 4,
        }
    }
}

impl PlanConfig {
    pub fn to_plan(&self) -> SparsityPlan {
        let mode = match self.mode {
            PlanKind::Uniform => PlanMode::Uniform,
            PlanKind::Erk => PlanMode::Erk,
            PlanKind::NonUniform => PlanMode::NonUniform { init: self.init },
            PlanKind::NOfM => PlanMode::NOfM { n: self.n, m: self.m },
        };
        SparsityPlan {
            mode,
            sparsity: self.sparsity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub strategy: Strategy,
    pub importance: Criterion,
    pub h: u64,
    pub j: u64,
    pub q: u64,
    /// Pinned number of update steps.
    pub t: Option<usize>,
    /// Fraction of training during which masks may change (weight scope).
    pub stop_fraction: f64,
    /// Last epoch with mask updates in channel scope; defaults to 4% of the
    /// epochs.
    pub structured_stop_epoch: Option<f64>,
    pub omega0_fraction: f64,
    pub freeze: bool,
    pub grow_init: GrowInit,
    pub grow_rule: GrowRule,
    /// Baseline update interval; defaults to H+J+Q.
    pub baseline_interval: Option<u64>,
    pub alpha0: f64,
    /// Latency table CSV for channel scope, or `synthetic` for a generated one.
    pub latency_table: Option<String>,
    pub quantum_ms: f64,
    pub nan_patience: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            strategy: e.strategy,
            importance: e.criterion,
            h: e.h,
            j: e.j,
            q: e.q,
            t: None,
            stop_fraction: e.stop_fraction,
            structured_stop_epoch: None,
            omega0_fraction: e.omega0_fraction,
            freeze: e.freeze,
            grow_init: e.grow_init,
            grow_rule: e.grow_rule,
            baseline_interval: None,
            alpha0: e.alpha0,
            latency_table: None,
            quantum_ms: e.quantum,
            nan_patience: e.nan_patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            warmup_fraction: o.warmup_fraction,
            batch_size: 32,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    IdxImages,
    CifarBinary,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    TwoMoons,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory with the dataset files; defaults to `$IEE_DATA_DIR/<kind>`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Pixel normalisation `(x / 255 - mean) / std`.
    #[serde(default = "default_mean")]
    pub mean: f32,
    #[serde(default = "default_std")]
    pub std: f32,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Input width of the regression generator.
    #[serde(default = "default_features")]
    pub features: usize,
}

fn default_mean() -> f32 {
    0.1307
}

fn default_std() -> f32 {
    0.3081
}

fn default_generator() -> Generator {
    Generator::TwoMoons
}

fn default_samples() -> usize {
    2000
}

fn default_noise() -> f32 {
    0.1
}

fn default_features() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// One event per training iteration, not only prune/grow events.
    pub iterations: bool,
    /// Save a checkpoint every this many iterations.
    pub checkpoint_every: Option<u64>,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            iterations: true,
            checkpoint_every: None,
        }
    }
}

impl ExperimentConfig {
    /// Model for inputs of per-sample shape `input` and `outputs` targets.
    pub fn model_spec(&self, input: &[usize], outputs: usize, regression: bool) -> Result<ModelSpec> {
        let mut spec = match self.model.kind {
            ModelKind::Mlp => {
                let width = input.iter().product();
                ModelSpec::mlp(width, &self.model.hidden, outputs, self.model.batchnorm)
            }
            ModelKind::Cnn => {
                let [c, h, w] = <[usize; 3]>::try_from(input).map_err(|_| {
                    HarnessError::Config(format!("model.kind = \"cnn\" needs image inputs, got shape {input:?}"))
                })?;
                ModelSpec::cnn([c, h, w], &self.model.channels, outputs, self.model.batchnorm)
            }
        };
        if regression {
            spec.loss = iee_core::nn::LossKind::Mse;
        }
        Ok(spec)
    }

    /// Channel scope when the importance criterion asks for it.
    pub fn scope(&self) -> Scope {
        self.schedule.importance.scope()
    }

    /// Engine settings for a run of `epochs` epochs.
    pub fn engine(&self) -> EngineConfig {
        let s = &self.schedule;
        let stop_fraction = match self.scope() {
            Scope::Weights => s.stop_fraction,
            Scope::Channels => {
                let epochs = self.optimizer.epochs.max(1) as f64;
                let stop = s.structured_stop_epoch.unwrap_or(0.04 * epochs);
                (stop / epochs).clamp(0.0, 1.0)
            }
        };
        EngineConfig {
            strategy: s.strategy,
            criterion: s.importance,
            plan: self.plan.to_plan(),
            h: s.h,
            j: s.j,
            q: s.q,
            t: s.t,
            stop_fraction,
            omega0_fraction: s.omega0_fraction,
            freeze: s.freeze,
            grow_init: s.grow_init,
            grow_rule: s.grow_rule,
            baseline_interval: s.baseline_interval,
            alpha0: s.alpha0,
            quantum: s.quantum_ms,
            nan_patience: s.nan_patience,
            log_iterations: self.log.iterations,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            warmup_fraction: self.optimizer.warmup_fraction,
        }
    }

    /// Field-level checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(HarnessError::Config(format!("{field}: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.optimizer.batch_size == 0 {
            return bad("optimizer.batch_size", "must be positive".into());
        }
        if self.optimizer.epochs == 0 {
            return bad("optimizer.epochs", "must be positive".into());
        }
        if !(self.optimizer.lr >= 0.0) {
            return bad("optimizer.lr", format!("{} must be non-negative", self.optimizer.lr));
        }
        if !(0.0..1.0).contains(&self.plan.sparsity) {
            return bad("plan.sparsity", format!("{} outside [0, 1)", self.plan.sparsity));
        }
        if self.plan.mode == PlanKind::NOfM && (self.plan.m == 0 || self.plan.n >= self.plan.m) {
            return bad("plan.n", format!("n_of_m needs n < m, got {}:{}", self.plan.n, self.plan.m));
        }
        let s = &self.schedule;
        if s.h == 0 {
            return bad("schedule.h", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&s.stop_fraction) {
            return bad("schedule.stop_fraction", format!("{} outside [0, 1]", s.stop_fraction));
        }
        if !(0.0..1.0).contains(&s.omega0_fraction) {
            return bad("schedule.omega0_fraction", format!("{} outside [0, 1)", s.omega0_fraction));
        }
        if !(s.quantum_ms > 0.0) {
            return bad("schedule.quantum_ms", "must be positive".into());
        }
        if s.nan_patience == 0 {
            return bad("schedule.nan_patience", "must be at least 1".into());
        }
        if s.strategy != Strategy::Iee && s.importance != Criterion::Magnitude {
            return bad("schedule.importance", "baselines use magnitude pruning".into());
        }
        if s.importance == Criterion::Taylor {
            if s.latency_table.is_none() {
                return bad(
                    "schedule.latency_table",
                    "taylor importance prunes channels against a latency table; give a CSV path or \"synthetic\"".into(),
                );
            }
            if !matches!(self.plan.mode, PlanKind::Uniform) {
                return bad("plan.mode", "channel pruning starts from a uniform channel plan".into());
            }
        }
        if self.data.kind == DataKind::Synthetic && self.data.samples < 2 {
            return bad("data.samples", "need at least two samples".into());
        }
        Ok(())
    }

    /// Check that the model suits the importance criterion, e.g. batch norm
    /// after every prunable layer for Taylor scores.
    pub fn validate_model(&self, spec: &ModelSpec) -> Result<()> {
        Layout::new(spec, self.scope())
            .map(|_| ())
            .map_err(|e| HarnessError::Config(format!("model: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Parse, materialise defaults and validate.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_config(&text)
}
