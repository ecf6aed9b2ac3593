use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{BalanceStrategy, LengthFilter};
use crate::bench::BenchOptions;
use crate::data::{SynthClassification, SynthLabeling};
use crate::distill::{DistillConfig, Stage};
use crate::error::{Error, Result};
use crate::export::Precision;
use crate::metrics::SeqMode;
use crate::model::{ModelSpec, Task};

fn default_name() -> String {
    "experiment".into()
}

fn default_max_len() -> usize {
    64
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/experiment")
}

/// One experiment. Model specs may leave `vocab_size`, `max_len`,
/// `num_classes` and `task` out; they are taken from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: Task,
    pub data: DataSource,
    /// Token budget per input, `[CLS]` included.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub metric: SeqMode,
    pub teacher: ModelSpec,
    /// Teacher fine-tuning settings; `distill` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_train: Option<DistillConfig>,
    pub students: Vec<StudentConfig>,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolConfig>,
    #[serde(default)]
    pub embeddings: EmbeddingSource,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub export: ExportConfig,
    /// Latency measurement after training; skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchOptions>,
}

/// Exactly one of the three sources must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// Directory with `train`, `dev` and `test` files (`.csv` or `.conll`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_classification: Option<SynthClassification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_labeling: Option<SynthLabeling>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub name: String,
    pub spec: ModelSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Plain-text files, one text per line.
    #[serde(default)]
    pub files: Vec<PathBuf>,
    /// Generated unlabeled texts (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthPool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_filter: Option<LengthFilter>,
    /// Classification only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceStrategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPool {
    pub n: usize,
    pub seed: u64,
    /// Token-count range of generated texts (fillers for labeling data).
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    #[default]
    None,
    VectorsFile {
        path: PathBuf,
    },
    /// The fine-tuned teacher's token embeddings.
    TeacherEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Precisions each trained model is written at.
    pub precisions: Vec<Precision>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            precisions: vec![Precision::F32],
        }
    }
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { "<root>".into() } else { key }, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn teacher_config(&self) -> &DistillConfig {
        self.teacher_train.as_ref().unwrap_or(&self.distill)
    }

    pub fn needs_pool(&self) -> bool {
        self.stages.iter().any(|s| s.needs_pool())
    }

    pub fn validate(&self) -> Result<()> {
        if !safe_name(&self.name) {
            return Err(Error::config("name", "use letters, digits, `_` or `-`"));
        }
        let sources = [
            self.data.dir.is_some(),
            self.data.synth_classification.is_some(),
            self.data.synth_labeling.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::config("data", "set exactly one of dir, synth_classification, synth_labeling"));
        }
        let synth_task = if self.data.synth_classification.is_some() {
            Some(Task::Classification)
        } else if self.data.synth_labeling.is_some() {
            Some(Task::SequenceLabeling)
        } else {
            None
        };
        if synth_task.is_some_and(|t| t != self.task) {
            return Err(Error::config("data", format!("synthetic data does not match task {:?}", self.task)));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("stages", "need at least one stage"));
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.stages.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config("stages", format!("`{s}` listed twice")));
        }
        if self.students.is_empty() {
            return Err(Error::config("students", "need at least one student"));
        }
        let mut names = HashSet::new();
        for (i, st) in self.students.iter().enumerate() {
            if !safe_name(&st.name) || st.name == "teacher" {
                return Err(Error::config(format!("students[{i}].name"), format!("`{}` is not a usable name", st.name)));
            }
            if !names.insert(&st.name) {
                return Err(Error::config(format!("students[{i}].name"), format!("duplicate student `{}`", st.name)));
            }
            self.check_spec(&st.spec, &format!("students[{i}].spec"))?;
        }
        self.check_spec(&self.teacher, "teacher")?;
        self.distill.validate().map_err(|e| Error::config("distill", e.to_string()))?;
        if let Some(t) = &self.teacher_train {
            t.validate().map_err(|e| Error::config("teacher_train", e.to_string()))?;
        }

        if self.needs_pool() {
            let Some(pool) = &self.pool else {
                return Err(Error::config("pool", "stages kd_ulb and kd_ulb_embed need an unlabeled pool"));
            };
            if pool.files.is_empty() && pool.synth.is_none() {
                return Err(Error::config("pool", "give pool files or a synth pool"));
            }
        }
        if let Some(pool) = &self.pool {
            if pool.synth.is_some() && synth_task.is_none() {
                return Err(Error::config("pool.synth", "generated pools need synthetic data"));
            }
            if pool.synth.as_ref().is_some_and(|s| s.n == 0 || s.min_len == 0 || s.min_len > s.max_len) {
                return Err(Error::config("pool.synth", "need n ≥ 1 and 1 ≤ min_len ≤ max_len"));
            }
            if pool.balance.is_some() && self.task != Task::Classification {
                return Err(Error::config("pool.balance", "balancing applies to classification only"));
            }
        }
        if self.stages.contains(&Stage::KdUlbEmbed) {
            match &self.embeddings {
                EmbeddingSource::None => {
                    return Err(Error::config("embeddings", "stage kd_ulb_embed needs an embedding source"));
                }
                EmbeddingSource::TeacherEmbed => {
                    let dim = self.teacher.embed_dim();
                    if let Some(st) = self.students.iter().find(|s| s.spec.embed_dim() != dim) {
                        return Err(Error::config(
                            "embeddings",
                            format!("teacher embed_dim {dim} differs from student `{}` ({})", st.name, st.spec.embed_dim()),
                        ));
                    }
                }
                EmbeddingSource::VectorsFile { .. } => {}
            }
        }
        if let Some(b) = &self.bench {
            if b.iterations == 0 || b.lengths.is_empty() || b.lengths.contains(&0) {
                return Err(Error::config("bench", "need iterations ≥ 1 and positive lengths"));
            }
        }
        Ok(())
    }

    fn check_spec(&self, spec: &ModelSpec, key: &str) -> Result<()> {
        spec.clone()
            .with_io(8, 2, self.task)
            .with_max_len(self.max_len)
            .validate()
            .map_err(|e| Error::config(key, e.to_string()))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}
