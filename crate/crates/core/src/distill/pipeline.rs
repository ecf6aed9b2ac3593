use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{evaluate, teacher_logits, train_student, train_vanilla, TaskData, TrainHistory};
use super::DistillConfig;
use crate::augment::PseudoLabeled;
use crate::embed::{initialize_student_embedding, EmbeddingTable};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

/// Columns of one result row.
pub const RESULT_COLUMNS: [&str; 9] = [
    "model",
    "stage",
    "loss_mode",
    "lr",
    "seed",
    "dev_f1",
    "test_f1",
    "best_epoch",
    "steps_to_best",
];

/// Rungs of the training ladder, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vanilla,
    Kd,
    KdUlb,
    KdUlbEmbed,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Vanilla, Stage::Kd, Stage::KdUlb, Stage::KdUlbEmbed];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Vanilla => "vanilla",
            Stage::Kd => "kd",
            Stage::KdUlb => "kd_ulb",
            Stage::KdUlbEmbed => "kd_ulb_embed",
        }
    }

    /// Row label for summary tables.
    pub fn title(self) -> &'static str {
        match self {
            Stage::Vanilla => "Vanilla",
            Stage::Kd => "KD",
            Stage::KdUlb => "KD Ulb",
            Stage::KdUlbEmbed => "KD Ulb + embeddings",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Stage::Vanilla
    }

    pub fn needs_pool(self) -> bool {
        matches!(self, Stage::KdUlb | Stage::KdUlbEmbed)
    }

    pub fn needs_embeddings(self) -> bool {
        self == Stage::KdUlbEmbed
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stage `{s}` (expected vanilla, kd, kd_ulb or kd_ulb_embed)")))
    }
}

pub struct PipelineInputs<'a> {
    pub data: &'a TaskData,
    pub teacher: Option<&'a Model>,
    pub student_name: &'a str,
    pub student_spec: &'a ModelSpec,
    /// Unlabeled texts with cached teacher targets.
    pub pool: Option<&'a PseudoLabeled>,
    pub embeddings: Option<&'a EmbeddingTable>,
    pub config: &'a DistillConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub model_name: String,
    pub stage: Stage,
    /// `ce` for gold-label training, otherwise the distillation loss.
    pub loss_mode: String,
    pub lr: f32,
    pub seed: u64,
    pub dev_f1: f32,
    pub test_f1: f32,
    pub best_epoch: usize,
    pub steps_to_best: u64,
    /// Examples the student was trained on.
    pub pool_size: usize,
    pub history: TrainHistory,
    pub model: Model,
}

fn check_prerequisites(stages: &[Stage], inputs: &PipelineInputs) -> Result<()> {
    for &s in stages {
        if s.needs_teacher() && inputs.teacher.is_none() {
            return Err(Error::config("teacher", format!("stage `{s}` needs a teacher model")));
        }
        if s.needs_pool() && inputs.pool.is_none_or(PseudoLabeled::is_empty) {
            return Err(Error::config("pool", format!("stage `{s}` needs an unlabeled pool")));
        }
        if s.needs_embeddings() && inputs.embeddings.is_none() {
            return Err(Error::config("embeddings", format!("stage `{s}` needs an embedding source")));
        }
    }
    Ok(())
}

/// Train one student per stage, in the order given. Teacher targets for
/// the labeled splits are computed once and shared by the KD stages.
pub fn run_pipeline(stages: &[Stage], inputs: &PipelineInputs) -> Result<Vec<StageResult>> {
    check_prerequisites(stages, inputs)?;
    inputs.config.validate()?;
    let data = inputs.data;
    let cfg = inputs.config.with_seed(inputs.seed);
    let spec = data.fit_spec(inputs.student_spec);

    let kd_targets = match inputs.teacher {
        Some(t) if stages.iter().any(|s| s.needs_teacher()) => {
            Some((teacher_logits(t, &data.train.inputs)?, teacher_logits(t, &data.dev.inputs)?))
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(stages.len());
    for &stage in stages {
        let run = || -> Result<StageResult> {
            let mut student = Model::build(&spec, inputs.seed)?;
            let (trained, history, pool_size, loss_mode) = if stage == Stage::Vanilla {
                let (m, h) = train_vanilla(student, data, &cfg)?;
                (m, h, data.train.len(), "ce".to_string())
            } else {
                let (train_t, dev_t) = kd_targets.as_ref().expect("prerequisites checked");
                let mut pool = data.train.inputs.clone();
                let mut targets = train_t.clone();
                if stage.needs_pool() {
                    let extra = inputs.pool.expect("prerequisites checked");
                    pool.extend(extra.inputs.iter().cloned());
                    targets.extend(extra.targets.iter().cloned());
                }
                if stage.needs_embeddings() {
                    let table = inputs.embeddings.expect("prerequisites checked");
                    initialize_student_embedding(&mut student, table, &data.vocab, inputs.seed)?;
                }
                let size = pool.len();
                let (m, h) = train_student(student, &pool, &targets, dev_t, data, &cfg)?;
                (m, h, size, cfg.loss_mode.as_str().to_string())
            };
            Ok(StageResult {
                model_name: inputs.student_name.to_string(),
                stage,
                loss_mode,
                lr: cfg.lr,
                seed: inputs.seed,
                dev_f1: evaluate(&trained, &data.dev, data)?,
                test_f1: evaluate(&trained, &data.test, data)?,
                best_epoch: history.best_epoch,
                steps_to_best: history.steps_to_best,
                pool_size,
                history,
                model: trained,
            })
        };
        out.push(run().map_err(|e| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        })?);
    }
    Ok(out)
}
