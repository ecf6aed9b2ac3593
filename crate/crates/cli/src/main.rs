use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use distilbench::data::{synth_classification, synth_sequence_labeling, SynthClassification, SynthLabeling};
use distilbench::distill::{LossMode, Stage, DEFAULT_LR_RANGE};
use distilbench::export::{export_frozen, load_frozen, Precision};
use distilbench::runner::{parse_config, write_summary, ExperimentConfig, Runner};

#[derive(Parser)]
#[command(name = "distilbench", version, about = "Task-specific distillation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Teacher, every student and stage over all seeds, then the summary.
    Run(Common),
    /// Fine-tune the teacher for each seed.
    TrainTeacher(Common),
    /// Train students at the selected stages (bench skipped).
    Distill(Common),
    /// Build, pseudo-label and balance the unlabeled pool.
    Augment(Common),
    /// Size and single-sentence latency of the configured architectures.
    Bench(Common),
    /// Re-encode a frozen model at another precision.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_precision)]
        precision: Precision,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random learning-rate search per student.
    SearchLr {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_LR_RANGE.0)]
        min: f32,
        #[arg(long, default_value_t = DEFAULT_LR_RANGE.1)]
        max: f32,
    },
    /// Write a synthetic dataset (train/dev/test files).
    Synth {
        #[arg(long, value_enum)]
        task: SynthTask,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild summary.md from an output directory's result CSVs.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossMode>,
    /// Run this stage only.
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthTask {
    #[value(alias = "classification")]
    Cls,
    #[value(alias = "sequence_labeling")]
    Seqlab,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: distilbench::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: distilbench::Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: distilbench::Error| e.to_string())
}

impl Common {
    /// The config file with command-line overrides applied.
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = parse_config(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(p) = self.precision {
            cfg.export.precisions = vec![p];
        }
        if let Some(l) = self.loss {
            cfg.distill.loss_mode = l;
        }
        if let Some(s) = self.stage {
            cfg.stages = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn runner(&self) -> Result<Runner> {
        let mut r = Runner::new(self.config()?)?;
        r.verbose = true;
        Ok(r)
    }
}

fn synth(task: SynthTask, seed: u64, out: &Path) -> Result<()> {
    let ds = match task {
        SynthTask::Cls => synth_classification(&SynthClassification {
            seed,
            ..Default::default()
        })?,
        SynthTask::Seqlab => synth_sequence_labeling(&SynthLabeling {
            seed,
            ..Default::default()
        })?,
    };
    ds.write_dir(out)?;
    println!(
        "wrote {} train / {} dev / {} test examples to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => print!("{}", c.runner()?.run()?),
        Command::Distill(c) => {
            let mut runner = c.runner()?;
            runner.cfg.bench = None;
            print!("{}", runner.run()?);
        }
        Command::TrainTeacher(c) => {
            let runner = c.runner()?;
            runner.train_teachers()?;
            print!("{}", write_summary(&runner.cfg.out_dir)?);
        }
        Command::Augment(c) => {
            let runner = c.runner()?;
            if runner.cfg.pool.is_none() {
                bail!("config has no [pool] section");
            }
            for &seed in &runner.cfg.seeds {
                let report = runner.augment(seed)?;
                println!("seed {seed}: {}", serde_json::to_string(&report)?);
            }
        }
        Command::Bench(c) => {
            let runner = c.runner()?;
            let opts = runner.cfg.bench.clone().unwrap_or_default();
            let precision = c.precision.unwrap_or_default();
            let reports = runner.bench(&opts, precision)?;
            print!("{}", distilbench::bench::emit_cost_table(&reports)?.1);
        }
        Command::Export { model, precision, out } => {
            let frozen = load_frozen(&model)?;
            let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let stem = stem.rsplit_once('.').map_or(stem, |(a, _)| a);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(format!("{stem}.{precision}.kdfz"));
            export_frozen(&frozen.to_model()?, &path, precision)?;
            println!("wrote {}", path.display());
        }
        Command::SearchLr { common, trials, min, max } => {
            let runner = common.runner()?;
            let stage = common.stage.unwrap_or(Stage::Vanilla);
            let seed = runner.cfg.seeds[0];
            for (name, r) in runner.search_lr(stage, trials, (min, max), seed)? {
                println!("{name} {stage}: best lr {:.3e} (dev F1 {:.4})", r.best.lr, r.best.dev_f1);
            }
        }
        Command::Synth { task, seed, out } => synth(task, seed, &out)?,
        Command::Report { out } => print!("{}", write_summary(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
