//! Distillation losses, training loops with early stopping, the staged
//! pipeline and learning-rate search.

mod loss;
mod pipeline;
mod search;
mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Algorithm;

pub use loss::{cross_entropy, distill_loss, distill_loss_on_tape, SoftTarget};
pub use pipeline::{run_pipeline, PipelineInputs, Stage, StageResult, RESULT_COLUMNS};
pub use search::{grid_search, lr_random_search, SearchResult, Trial, DEFAULT_LR_RANGE};
pub use train::{
    evaluate, fine_tune_teacher, model_logits, predict_labels, teacher_logits, train_student, train_vanilla, Encoded,
    EpochRecord, TaskData, TrainHistory,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Squared error between raw logits.
    #[default]
    Mse,
    /// KL divergence between temperature-softened distributions.
    Kld,
    /// Cross-entropy against the teacher's argmax.
    Hard,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::Kld => "kld",
            LossMode::Hard => "hard",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "kld" => Ok(LossMode::Kld),
            "hard" => Ok(LossMode::Hard),
            _ => Err(Error::Parameter(format!("unknown loss mode `{s}` (expected mse, kld or hard)"))),
        }
    }
}

pub const DEFAULT_LR_GRID: [f32; 6] = [5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub loss_mode: LossMode,
    pub temperature: f32,
    pub lr: f32,
    pub lr_grid: Vec<f32>,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Algorithm,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            loss_mode: LossMode::Mse,
            temperature: 1.0,
            lr: 1e-3,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            patience: 10,
            max_epochs: 200,
            batch_size: 32,
            seed: 0,
            optimizer: Algorithm::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.patience == 0 {
            return Err(Error::Parameter("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if let Some(bad) = std::iter::once(&self.lr)
            .chain(&self.lr_grid)
            .find(|&&lr| !(lr > 0.0 && lr.is_finite()))
        {
            return Err(Error::Parameter(format!("learning rate must be positive, got {bad}")));
        }
        Ok(())
    }

    pub fn with_lr(&self, lr: f32) -> Self {
        DistillConfig { lr, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DistillConfig { seed, ..self.clone() }
    }
}
