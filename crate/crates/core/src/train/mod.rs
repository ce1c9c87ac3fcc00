//! Adam training with per-epoch learning-rate decay, evaluation,
//! ensembles and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod eval;
pub mod fit;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use eval::{ensemble_predict, evaluate, is_correct, score, top_k, EnsembleReport, EvalReport, Scored};
pub use fit::{fit, EpochRecord, FitReport};

use crate::data::{AugmentConfig, StreamMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mnist,
    Multimnist,
}

impl Task {
    /// Classes present per sample, scored by top-k.
    pub fn k(self) -> usize {
        match self {
            Task::Mnist => 1,
            Task::Multimnist => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative decay per epoch.
    pub decay: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub checkpoint_dir: PathBuf,
    /// Use only the first `n` training digits.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test digits.
    pub test_limit: Option<usize>,
    pub augment: AugmentConfig,
    /// Overlays per base digit and epoch (MultiMNIST).
    pub train_per_digit: usize,
    /// Overlays per test digit (MultiMNIST).
    pub test_per_digit: usize,
    /// Seed of the fixed test overlays.
    pub test_seed: u64,
    /// Single-threaded evaluation.
    pub strict: bool,
    pub progress: bool,
}

impl TrainConfig {
    pub fn mnist() -> Self {
        Self {
            task: Task::Mnist,
            epochs: 100,
            batch_size: 16,
            lr0: 5e-4,
            decay: 0.98,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_limit: None,
            test_limit: None,
            augment: AugmentConfig::default(),
            train_per_digit: 10,
            test_per_digit: 1000,
            test_seed: 0,
            strict: false,
            progress: false,
        }
    }

    pub fn multimnist() -> Self {
        Self {
            task: Task::Multimnist,
            batch_size: 64,
            decay: 0.97,
            augment: AugmentConfig::identity(),
            ..Self::mnist()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist()),
            "multimnist" => Ok(Self::multimnist()),
            other => Err(Error::Config(format!("unknown training preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam constants {a:?}")));
        }
        if self.task == Task::Multimnist && (self.train_per_digit == 0 || self.test_per_digit == 0) {
            return Err(Error::Config("overlays per digit must be at least 1".into()));
        }
        Ok(())
    }

    pub fn train_mode(&self) -> StreamMode {
        match self.task {
            Task::Mnist => StreamMode::Mnist { augment: self.augment },
            Task::Multimnist => StreamMode::Multimnist {
                per_digit: self.train_per_digit,
            },
        }
    }

    /// Un-augmented evaluation stream.
    pub fn test_mode(&self) -> StreamMode {
        match self.task {
            Task::Mnist => StreamMode::Mnist {
                augment: AugmentConfig::identity(),
            },
            Task::Multimnist => StreamMode::Multimnist {
                per_digit: self.test_per_digit,
            },
        }
    }
}

/// `lr0 * decay^epoch`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}
