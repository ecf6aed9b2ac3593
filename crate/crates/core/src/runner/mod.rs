//! Experiment orchestration: config, the teacher → students ladder over
//! seeds, model export, latency tables and summaries.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.toml        normalized config
//! data/              the exact dataset files used (hashed for provenance)
//! results/*.csv      one row per (model, stage, seed)
//! summary.md         mean/std over seeds, teacher first, ladder order
//! models/*.kdfz      frozen models
//! cost/*.csv         size and latency tables
//! timing.csv         wall-clock seconds per trained model
//! ```

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    balance_pool, filter_by_length, pool_stats, pseudo_label, read_pool, reference_lengths, write_pool, write_pseudo_labels,
    LengthStats, PoolStats, PseudoLabeled, UnlabeledPool,
};
use crate::bench::{bench_latency, emit_cost_table, BenchOptions, CostReport};
use crate::data::{synth_classification, synth_sequence_labeling, synth_texts, Dataset, SynthLabeling};
use crate::distill::{
    fine_tune_teacher, lr_random_search, run_pipeline, PipelineInputs, SearchResult, Stage, StageResult, TaskData,
    TrainHistory,
};
use crate::embed::{extract_teacher_embeddings, load_word_vectors, EmbeddingTable};
use crate::error::{Error, Result};
use crate::export::{export_frozen, Precision};
use crate::model::{Model, ModelSpec};

pub use config::{
    parse_config, DataSource, EmbeddingSource, ExperimentConfig, ExportConfig, PoolConfig, StudentConfig, SynthPool,
};
pub use report::{read_results, summarize, write_summary, ResultRow};

pub const TEACHER_NAME: &str = "teacher";

/// Dataset loaded and tokenized, with a content hash of its files.
pub struct Prepared {
    pub dataset: Dataset,
    pub data: TaskData,
    pub dataset_hash: String,
}

fn hex16(bytes: &[u8]) -> String {
    hex::encode(&bytes[..8])
}

/// Content-addressed hash of a file set: each file is hashed as
/// `blob <len>\0<bytes>`, then the sorted `name hash` lines are hashed.
pub fn content_hash(files: &[PathBuf]) -> Result<String> {
    let mut lines = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        lines.push(format!("{name} {}", hex::encode(h.finalize())));
    }
    lines.sort();
    Ok(hex16(&Sha256::digest(lines.join("\n"))))
}

/// Hash of the normalized config with the output directory blanked, so
/// the same experiment written elsewhere keeps its identity.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    Ok(hex16(&Sha256::digest(c.to_toml()?)))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    if let Some(dir) = &d.dir {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
        Dataset::read_dir(&name, cfg.task, dir)
    } else if let Some(s) = &d.synth_classification {
        synth_classification(s)
    } else if let Some(s) = &d.synth_labeling {
        synth_sequence_labeling(s)
    } else {
        Err(Error::config("data", "no data source"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub collected: usize,
    pub after_length_filter: usize,
    pub labeled: usize,
    pub reference: LengthStats,
    pub label_stats: PoolStats,
}

pub struct Runner {
    pub cfg: ExperimentConfig,
    pub prepared: Prepared,
    config_hash: String,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Runner {
    /// Validate, create the output directory, write the normalized config
    /// and the dataset files.
    pub fn new(cfg: ExperimentConfig) -> Result<Runner> {
        cfg.validate()?;
        let out = &cfg.out_dir;
        create_dir(out)?;
        write_file(&out.join("config.toml"), cfg.to_toml()?)?;
        let dataset = load_dataset(&cfg)?;
        let data_dir = out.join("data");
        dataset.write_dir(&data_dir)?;
        let mut files: Vec<PathBuf> = fs::read_dir(&data_dir)
            .map_err(|e| Error::io(&data_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let data = TaskData::new(&dataset, cfg.max_len, cfg.metric)?;
        Ok(Runner {
            config_hash: config_hash(&cfg)?,
            prepared: Prepared {
                dataset_hash: content_hash(&files)?,
                dataset,
                data,
            },
            cfg,
            verbose: false,
        })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out(&self, sub: &str) -> Result<PathBuf> {
        let p = self.cfg.out_dir.join(sub);
        create_dir(&p)?;
        Ok(p)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn teacher_spec(&self) -> ModelSpec {
        self.prepared.data.fit_spec(&self.cfg.teacher)
    }

    pub fn train_teacher(&self, seed: u64) -> Result<(Model, TrainHistory)> {
        let cfg = self.cfg.teacher_config().with_seed(seed);
        fine_tune_teacher(&self.teacher_spec(), &self.prepared.data, &cfg).map_err(|e| Error::Stage {
            stage: TEACHER_NAME.into(),
            source: Box::new(e),
        })
    }

    fn teacher_row(&self, seed: u64, teacher: &Model, history: &TrainHistory) -> Result<ResultRow> {
        let data = &self.prepared.data;
        let cfg = self.cfg.teacher_config();
        Ok(ResultRow {
            model: TEACHER_NAME.into(),
            stage: TEACHER_NAME.into(),
            loss_mode: "ce".into(),
            lr: cfg.lr,
            seed,
            dev_f1: crate::distill::evaluate(teacher, &data.dev, data)?,
            test_f1: crate::distill::evaluate(teacher, &data.test, data)?,
            best_epoch: history.best_epoch,
            steps_to_best: history.steps_to_best,
            pool_size: data.train.len(),
            config_hash: self.config_hash.clone(),
            dataset_hash: self.prepared.dataset_hash.clone(),
        })
    }

    fn row(&self, r: &StageResult) -> ResultRow {
        ResultRow {
            model: r.model_name.clone(),
            stage: r.stage.to_string(),
            loss_mode: r.loss_mode.clone(),
            lr: r.lr,
            seed: r.seed,
            dev_f1: r.dev_f1,
            test_f1: r.test_f1,
            best_epoch: r.best_epoch,
            steps_to_best: r.steps_to_best,
            pool_size: r.pool_size,
            config_hash: self.config_hash.clone(),
            dataset_hash: self.prepared.dataset_hash.clone(),
        }
    }

    /// Raw unlabeled texts from the configured sources.
    pub fn collect_pool(&self) -> Result<UnlabeledPool> {
        let Some(pc) = &self.cfg.pool else {
            return Err(Error::config("pool", "no pool configured"));
        };
        let mut pool = UnlabeledPool::default();
        for f in &pc.files {
            let p = read_pool(f)?;
            let source = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            pool.extend(&source, p.texts);
        }
        if let Some(s) = &pc.synth {
            let texts = if let Some(c) = &self.cfg.data.synth_classification {
                synth_texts(c, s.seed, s.n, s.min_len, s.max_len)?
            } else if let Some(c) = &self.cfg.data.synth_labeling {
                let gen = SynthLabeling {
                    seed: s.seed,
                    n_train: s.n,
                    n_dev: 1,
                    n_test: 1,
                    min_len: s.min_len,
                    max_len: s.max_len,
                    ..c.clone()
                };
                synth_sequence_labeling(&gen)?.train.iter().map(|e| e.text()).collect()
            } else {
                return Err(Error::config("pool.synth", "generated pools need synthetic data"));
            };
            pool.extend("synth", texts);
        }
        Ok(pool)
    }

    /// Collect, length-filter, pseudo-label with `teacher`, then balance.
    pub fn build_pool(&self, teacher: &Model, seed: u64) -> Result<(PseudoLabeled, PoolReport)> {
        let pc = self.cfg.pool.clone().unwrap_or_default();
        let data = &self.prepared.data;
        let raw = self.collect_pool()?;
        let reference = reference_lengths(data)?;
        let filtered = match pc.length_filter {
            Some(mode) => filter_by_length(&raw, mode, &reference),
            None => raw.clone(),
        };
        let mut labeled = pseudo_label(teacher, data, &filtered)?;
        let n_labeled = labeled.len();
        if let Some(strategy) = pc.balance {
            if !labeled.is_empty() {
                labeled = balance_pool(&labeled, strategy, seed)?;
            }
        }
        if labeled.is_empty() {
            return Err(Error::config("pool", "no pool text survived filtering"));
        }
        let report = PoolReport {
            collected: raw.len(),
            after_length_filter: filtered.len(),
            labeled: n_labeled,
            reference,
            label_stats: pool_stats(&labeled)?,
        };
        Ok((labeled, report))
    }

    pub fn embedding_table(&self, teacher: &Model) -> Result<Option<EmbeddingTable>> {
        match &self.cfg.embeddings {
            EmbeddingSource::None => Ok(None),
            EmbeddingSource::VectorsFile { path } => load_word_vectors(path).map(Some),
            EmbeddingSource::TeacherEmbed => extract_teacher_embeddings(teacher, &self.prepared.data.vocab).map(Some),
        }
    }

    fn export(&self, model: &Model, stem: &str) -> Result<()> {
        let dir = self.out("models")?;
        for &p in &self.cfg.export.precisions {
            export_frozen(model, &dir.join(format!("{stem}.{p}.kdfz")), p)?;
        }
        Ok(())
    }

    fn write_rows(&self, file: &str, rows: &[ResultRow]) -> Result<()> {
        report::write_rows(&self.out("results")?.join(file), rows)
    }

    /// Train one teacher per seed; rows go to `results/teacher.csv`.
    pub fn train_teachers(&self) -> Result<Vec<(u64, Model)>> {
        let mut rows = Vec::new();
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            self.say(format!("seed {seed}: teacher"));
            let (teacher, history) = self.train_teacher(seed)?;
            rows.push(self.teacher_row(seed, &teacher, &history)?);
            self.write_rows("teacher.csv", &rows)?;
            self.export(&teacher, &format!("{TEACHER_NAME}_s{seed}"))?;
            out.push((seed, teacher));
        }
        Ok(out)
    }

    /// The full experiment. Rows are written as soon as they exist, so a
    /// failing stage leaves every completed row on disk.
    pub fn run(&self) -> Result<String> {
        let cfg = &self.cfg;
        let needs_teacher = cfg.stages.iter().any(|s| s.needs_teacher());
        let mut teacher_rows = Vec::new();
        let mut rows: Vec<Vec<ResultRow>> = vec![Vec::new(); cfg.students.len()];
        let mut timing = vec!["model,stage,seed,seconds".to_string()];
        for &seed in &cfg.seeds {
            let start = Instant::now();
            self.say(format!("seed {seed}: teacher"));
            let (teacher, history) = self.train_teacher(seed)?;
            timing.push(format!("{TEACHER_NAME},{TEACHER_NAME},{seed},{:.3}", start.elapsed().as_secs_f64()));
            teacher_rows.push(self.teacher_row(seed, &teacher, &history)?);
            self.write_rows("teacher.csv", &teacher_rows)?;
            self.export(&teacher, &format!("{TEACHER_NAME}_s{seed}"))?;

            let pool = if cfg.needs_pool() {
                let (p, report) = self.build_pool(&teacher, seed)?;
                self.say(format!("seed {seed}: pool of {} texts", p.len()));
                write_file(
                    &self.out("pools")?.join(format!("pool_s{seed}.json")),
                    serde_json::to_string_pretty(&report).expect("pool report serializes"),
                )?;
                Some(p)
            } else {
                None
            };
            let embeddings = if cfg.stages.contains(&Stage::KdUlbEmbed) {
                self.embedding_table(&teacher)?
            } else {
                None
            };

            for (i, st) in cfg.students.iter().enumerate() {
                for &stage in &cfg.stages {
                    self.say(format!("seed {seed}: {} {stage}", st.name));
                    let start = Instant::now();
                    let inputs = PipelineInputs {
                        data: &self.prepared.data,
                        teacher: needs_teacher.then_some(&teacher),
                        student_name: &st.name,
                        student_spec: &st.spec,
                        pool: pool.as_ref(),
                        embeddings: embeddings.as_ref(),
                        config: &cfg.distill,
                        seed,
                    };
                    let result = run_pipeline(&[stage], &inputs)?.remove(0);
                    timing.push(format!("{},{stage},{seed},{:.3}", st.name, start.elapsed().as_secs_f64()));
                    rows[i].push(self.row(&result));
                    self.write_rows(&format!("{}.csv", st.name), &rows[i])?;
                    self.export(&result.model, &format!("{}_{stage}_s{seed}", st.name))?;
                }
            }
            write_file(&cfg.out_dir.join("timing.csv"), timing.join("\n") + "\n")?;
        }
        if let Some(opts) = &cfg.bench {
            self.bench(opts, Precision::F32)?;
        }
        write_summary(&cfg.out_dir)
    }

    /// Bench lengths that fit the models' `max_len`.
    pub fn bench_options(&self, opts: &BenchOptions) -> Result<BenchOptions> {
        let lengths: Vec<usize> = opts.lengths.iter().copied().filter(|&l| l <= self.cfg.max_len).collect();
        if lengths.is_empty() {
            return Err(Error::config("bench.lengths", format!("no length fits max_len {}", self.cfg.max_len)));
        }
        Ok(BenchOptions { lengths, ..opts.clone() })
    }

    /// Latency and size of the teacher and every student architecture
    /// (weights do not affect cost, so fresh models are used).
    pub fn bench(&self, opts: &BenchOptions, precision: Precision) -> Result<Vec<CostReport>> {
        let opts = self.bench_options(opts)?;
        let data = &self.prepared.data;
        let mut models = vec![(TEACHER_NAME.to_string(), self.teacher_spec())];
        models.extend(self.cfg.students.iter().map(|s| (s.name.clone(), data.fit_spec(&s.spec))));
        let mut reports = Vec::new();
        for (name, spec) in models {
            self.say(format!("bench {name}"));
            reports.push(bench_latency(&name, &Model::build(&spec, 0)?, precision, &opts, true)?);
        }
        let (csv, md) = emit_cost_table(&reports)?;
        let dir = self.out("cost")?;
        write_file(&dir.join("cost.csv"), csv)?;
        write_file(&dir.join("cost.md"), md)?;
        write_file(
            &dir.join("latency.json"),
            serde_json::to_string_pretty(&reports).expect("reports serialize"),
        )?;
        Ok(reports)
    }

    /// Build and pseudo-label the pool with a seed's teacher; writes
    /// `augment/pool_s{seed}.txt`, pseudo labels and statistics.
    pub fn augment(&self, seed: u64) -> Result<PoolReport> {
        let (teacher, _) = self.train_teacher(seed)?;
        let (set, report) = self.build_pool(&teacher, seed)?;
        let dir = self.out("augment")?;
        let pool = UnlabeledPool {
            sources: vec!["pseudo".into(); set.len()],
            texts: set.texts.clone(),
        };
        write_pool(&dir.join(format!("pool_s{seed}.txt")), &pool)?;
        write_pseudo_labels(&dir.join(format!("pseudo_labels_s{seed}.csv")), &set)?;
        write_file(
            &dir.join(format!("stats_s{seed}.json")),
            serde_json::to_string_pretty(&report).expect("pool report serializes"),
        )?;
        Ok(report)
    }

    /// Random learning-rate search for every student at one stage; the
    /// trials land in `search/<student>_<stage>.csv`.
    pub fn search_lr(&self, stage: Stage, trials: usize, range: (f32, f32), seed: u64) -> Result<Vec<(String, SearchResult)>> {
        let teacher = if stage.needs_teacher() { Some(self.train_teacher(seed)?.0) } else { None };
        let pool = match (&teacher, stage.needs_pool()) {
            (Some(t), true) => Some(self.build_pool(t, seed)?.0),
            _ => None,
        };
        let embeddings = match (&teacher, stage.needs_embeddings()) {
            (Some(t), true) => self.embedding_table(t)?,
            _ => None,
        };
        let dir = self.out("search")?;
        let mut out = Vec::new();
        for st in &self.cfg.students {
            let result = lr_random_search(
                |lr| {
                    self.say(format!("{} {stage} lr {lr:.3e}", st.name));
                    let config = self.cfg.distill.with_lr(lr);
                    let inputs = PipelineInputs {
                        data: &self.prepared.data,
                        teacher: teacher.as_ref(),
                        student_name: &st.name,
                        student_spec: &st.spec,
                        pool: pool.as_ref(),
                        embeddings: embeddings.as_ref(),
                        config: &config,
                        seed,
                    };
                    Ok(run_pipeline(&[stage], &inputs)?[0].dev_f1)
                },
                range,
                trials,
                seed,
            )?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["lr", "dev_f1"])?;
            for t in &result.trials {
                w.write_record([t.lr.to_string(), t.dev_f1.to_string()])?;
            }
            let body = w.into_inner().map_err(|e| Error::Parameter(e.to_string()))?;
            write_file(&dir.join(format!("{}_{stage}.csv", st.name)), body)?;
            out.push((st.name.clone(), result));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
