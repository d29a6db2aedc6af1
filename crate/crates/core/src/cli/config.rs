use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::mtl::{AdamConfig, TaskSpec, TrainConfig};
use crate::peft::TuningMode;

/// Environment variable capping the data-generation worker count.
pub const THREADS_ENV: &str = "TADFORMER_THREADS";

/// Everything a command needs, read from a JSON file. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TuningMode,
    pub backbone: BackboneConfig,
    pub rank: usize,
    pub kernel_size: usize,
    pub filter_norm_eps: f64,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            mode: TuningMode::Tadformer,
            backbone: BackboneConfig::default(),
            rank: 32,
            kernel_size: 3,
            filter_norm_eps: 1e-5,
            tasks: TaskSpec::default_set(),
            seed: train.seed,
            steps: train.steps,
            batch_size: train.batch_size,
            eval_samples: train.eval_samples,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::config(e.inner().to_string())
            } else {
                Error::config(format!("{path}: {}", e.inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every key present, in declaration order.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks: at least one task is required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate(i)?;
        }
        self.model_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples: must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr: must be finite and non-negative, got {}", self.lr)));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{key}: must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps: must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay: must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            rank: self.rank,
            kernel_size: self.kernel_size,
            filter_norm_eps: self.filter_norm_eps,
            head_outputs: self.tasks.iter().map(TaskSpec::outputs).collect(),
        }
    }

    pub fn train_config(&self, workers: usize) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            eval_samples: self.eval_samples,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            workers,
        }
    }
}

/// Available cores, capped by `TADFORMER_THREADS` when set.
pub fn worker_count() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(cores)),
            _ => Err(Error::config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(cores),
    }
}
