use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layout, Variant};
use crate::optim::OptimizerKind;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgdm,
    Adam,
}

impl OptimizerName {
    pub const BOTH: [OptimizerName; 2] = [OptimizerName::Sgdm, OptimizerName::Adam];

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerName::Sgdm => "sgdm",
            OptimizerName::Adam => "adam",
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerName,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta")]
    pub beta1: f64,
    #[serde(default = "default_beta")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Learning rates tried by `grid`; the default grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_grid: Option<Vec<f64>>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerName, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: default_momentum(),
            beta1: default_beta(),
            beta2: default_beta(),
            eps: default_eps(),
            lr_grid: None,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerName::Sgdm => OptimizerKind::Sgdm {
                momentum: self.momentum,
            },
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        }
    }
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Hidden width of the optional front MLP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub front_mlp: Option<usize>,
}

/// Probe cadences; a cadence of 0 switches the probe off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub eval_every: usize,
    pub eval_batch: usize,
    pub smoothness_every: usize,
    pub curvature_batch: usize,
    pub curvature_iters: Vec<usize>,
    /// Iterations (0 = initialization) at which gradient noise is sampled.
    pub noise_iters: Vec<usize>,
    pub noise_samples: usize,
    pub noise_batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            eval_every: 10,
            eval_batch: 1024,
            smoothness_every: 10,
            curvature_batch: 4096,
            curvature_iters: vec![750, 1250],
            noise_iters: Vec::new(),
            noise_samples: 1000,
            noise_batch: 64,
        }
    }
}

impl ProbeConfig {
    /// Evaluation loss only; no curvature or noise work.
    pub fn loss_only() -> Self {
        Self {
            smoothness_every: 0,
            curvature_iters: Vec::new(),
            ..Self::default()
        }
    }

    pub fn needs_curvature_batch(&self) -> bool {
        self.smoothness_every > 0 || !self.curvature_iters.is_empty()
    }
}

fn default_clip() -> f64 {
    1.0
}
fn default_eval_seed() -> u64 {
    1_000_003
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub iterations: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_clip")]
    pub clip_threshold: f64,
    /// Seeds the evaluation and curvature batches, shared by every run.
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    /// Relative to the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
}

impl ExperimentConfig {
    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.model.variant, self.model.layers, self.task.d, self.model.front_mlp)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(self.clip_threshold > 0.0) {
            return bad(format!("clip_threshold must be positive, got {}", self.clip_threshold));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.optimizer.lr));
        }
        if let Some(grid) = &self.optimizer.lr_grid {
            if grid.is_empty() || grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
                return bad("lr_grid must be nonempty with positive entries".into());
            }
        }
        if !(self.model.init_std >= 0.0 && self.model.init_std.is_finite()) {
            return bad("init_std must be finite and non-negative".into());
        }
        if self.model.variant == Variant::Softmax && self.model.front_mlp.is_some() {
            return bad("the front MLP is only supported with the linear variants".into());
        }
        let p = &self.probes;
        if p.eval_every > 0 && p.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        if p.needs_curvature_batch() && p.curvature_batch == 0 {
            return bad("curvature_batch must be positive".into());
        }
        if !p.noise_iters.is_empty() && (p.noise_samples < 2 || p.noise_batch == 0) {
            return bad("noise probes need noise_samples >= 2 and noise_batch >= 1".into());
        }
        self.optimizer.optimizer_kind().validate()?;
        self.task.validate()?;
        self.layout()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Same experiment with a different optimizer and learning rate.
    pub fn with_optimizer(&self, kind: OptimizerName, lr: f64) -> Self {
        let mut out = self.clone();
        out.optimizer = OptimizerConfig {
            kind,
            lr,
            ..self.optimizer.clone()
        };
        out
    }
}

/// Ten log-spaced learning rates from 1e-3 to 5.
pub fn default_lr_grid() -> Vec<f64> {
    let (lo, hi): (f64, f64) = (1e-3, 5.0);
    (0..10)
        .map(|i| if i == 9 { hi } else { lo * (hi / lo).powf(i as f64 / 9.0) })
        .collect()
}

pub(crate) fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")))
    }
}
