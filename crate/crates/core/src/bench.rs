//! Single-sentence CPU latency measurement and cost tables.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{encoded_len, FrozenNet, Precision};
use crate::model::{Batch, Model, ModelSpec, Task, CLS_ID};

pub const DEFAULT_LENGTHS: [usize; 6] = [4, 8, 16, 32, 64, 128];
pub const THREAD_NOTE: &str = "single thread";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub iterations: usize,
    pub warmup: usize,
    /// Seed for the random token ids fed to the model.
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            lengths: DEFAULT_LENGTHS.to_vec(),
            iterations: 100,
            warmup: 10,
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Parameter("bench needs at least one iteration".into()));
        }
        if self.lengths.is_empty() {
            return Err(Error::Parameter("bench needs at least one length".into()));
        }
        if let Some(&l) = self.lengths.iter().find(|&&l| l == 0 || l > spec.max_len()) {
            return Err(Error::Parameter(format!(
                "bench length {l} outside 1..={} for this model",
                spec.max_len()
            )));
        }
        Ok(())
    }
}

/// Milliseconds per single-sentence forward at one input length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub length: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(length: usize, samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        LatencyStats {
            length,
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            samples_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub parameters: usize,
    /// Frozen file sizes in bytes.
    pub file_bytes_f32: usize,
    pub file_bytes_int8: usize,
    /// Tape-free frozen path.
    pub frozen: Vec<LatencyStats>,
    /// Tape-based live path, when measured.
    pub live: Option<Vec<LatencyStats>>,
    pub iterations: usize,
    pub warmup: usize,
    pub threads: String,
}

impl CostReport {
    pub fn mean_frozen_ms(&self) -> f64 {
        mean_of(&self.frozen)
    }

    pub fn mean_live_ms(&self) -> Option<f64> {
        self.live.as_deref().map(mean_of)
    }
}

fn mean_of(stats: &[LatencyStats]) -> f64 {
    stats.iter().map(|s| s.mean_ms).sum::<f64>() / stats.len() as f64
}

/// One random input per length; classification inputs start with `[CLS]`.
fn bench_inputs(spec: &ModelSpec, opts: &BenchOptions) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let low = (CLS_ID + 2).min(spec.vocab_size() - 1);
    opts.lengths
        .iter()
        .map(|&l| {
            let mut ids: Vec<usize> = (0..l).map(|_| rng.random_range(low..spec.vocab_size())).collect();
            if spec.task() == Task::Classification {
                ids[0] = CLS_ID;
            }
            ids
        })
        .collect()
}

/// Time `run` on each input: `warmup` discarded calls, then `iterations`
/// individually timed calls on the monotonic clock.
fn time_each<Run>(inputs: &[Vec<usize>], opts: &BenchOptions, mut run: Run) -> Result<Vec<LatencyStats>>
where
    Run: FnMut(&[usize]) -> Result<()>,
{
    inputs
        .iter()
        .map(|ids| {
            for _ in 0..opts.warmup {
                run(ids)?;
            }
            let mut samples = Vec::with_capacity(opts.iterations);
            for _ in 0..opts.iterations {
                let start = Instant::now();
                run(ids)?;
                samples.push(start.elapsed().as_secs_f64() * 1e3);
            }
            Ok(LatencyStats::from_samples(ids.len(), samples))
        })
        .collect()
}

pub fn bench_frozen(net: &FrozenNet, opts: &BenchOptions) -> Result<Vec<LatencyStats>> {
    opts.validate(net.spec())?;
    let inputs = bench_inputs(net.spec(), opts);
    let mut scratch = net.scratch();
    time_each(&inputs, opts, |ids| net.infer(ids, &mut scratch).map(|_| ()))
}

pub fn bench_live(model: &Model, opts: &BenchOptions) -> Result<Vec<LatencyStats>> {
    opts.validate(model.spec())?;
    let inputs = bench_inputs(model.spec(), opts);
    time_each(&inputs, opts, |ids| model.predict(&Batch::single(ids)?).map(|_| ()))
}

/// Cost report for `model` at `precision`: sizes of both file variants and
/// frozen latency, plus live latency when `with_live`.
pub fn bench_latency(name: &str, model: &Model, precision: Precision, opts: &BenchOptions, with_live: bool) -> Result<CostReport> {
    let net = crate::export::FrozenModel::from_model(model, precision)?.net()?;
    let frozen = bench_frozen(&net, opts)?;
    let live = if with_live { Some(bench_live(model, opts)?) } else { None };
    Ok(CostReport {
        model: name.to_string(),
        parameters: model.count_parameters(),
        file_bytes_f32: encoded_len(model.spec(), Precision::F32),
        file_bytes_int8: encoded_len(model.spec(), Precision::Int8),
        frozen,
        live,
        iterations: opts.iterations,
        warmup: opts.warmup,
        threads: THREAD_NOTE.to_string(),
    })
}

fn millions(n: usize) -> String {
    format!("{:.2}", n as f64 / 1e6)
}

fn megabytes(bytes: usize) -> String {
    format!("{:.3}", bytes as f64 / 1e6)
}

fn all_lengths(reports: &[CostReport]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for r in reports {
        for s in &r.frozen {
            if !out.contains(&s.length) {
                out.push(s.length);
            }
        }
    }
    out
}

fn ms_at(stats: &[LatencyStats], length: usize) -> String {
    stats
        .iter()
        .find(|s| s.length == length)
        .map(|s| format!("{:.4}", s.mean_ms))
        .unwrap_or_default()
}

/// CSV and markdown cost tables, one row per report. CSV latency columns
/// are frozen means; markdown pairs live and frozen per length.
pub fn emit_cost_table(reports: &[CostReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::Parameter("no cost reports to tabulate".into()));
    }
    let lengths = all_lengths(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["model", "params_m", "file_mb_f32", "file_mb_int8"].map(String::from).to_vec();
    header.extend(lengths.iter().map(|l| format!("ms_len_{l}")));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.model.clone(),
            millions(r.parameters),
            megabytes(r.file_bytes_f32),
            megabytes(r.file_bytes_int8),
        ];
        row.extend(lengths.iter().map(|&l| ms_at(&r.frozen, l)));
        w.write_record(&row)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Parameter(e.to_string()))?).expect("csv is UTF-8");

    let mut md = String::from("| Model | Params (M) | File MB (f32) | File MB (int8) |");
    for l in &lengths {
        write!(md, " CPU ms L={l} (live / frozen) |").expect("string write");
    }
    md.push_str("\n|---|---:|---:|---:|");
    md.push_str(&"---:|".repeat(lengths.len()));
    md.push('\n');
    for r in reports {
        write!(
            md,
            "| {} | {} | {} | {} |",
            r.model,
            millions(r.parameters),
            megabytes(r.file_bytes_f32),
            megabytes(r.file_bytes_int8)
        )
        .expect("string write");
        for &l in &lengths {
            let live = r.live.as_deref().map(|s| ms_at(s, l)).filter(|s| !s.is_empty());
            write!(md, " {} / {} |", live.as_deref().unwrap_or("-"), ms_at(&r.frozen, l)).expect("string write");
        }
        md.push('\n');
    }
    Ok((csv, md))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CnnSpec, ModelSpec};

    fn cnn() -> Model {
        Model::build(
            &ModelSpec::Cnn(CnnSpec {
                embed_dim: 8,
                n_blocks: 1,
                kernel_size: 3,
                vocab_size: 30,
                max_len: 16,
                num_classes: 2,
                task: Task::Classification,
                dropout: 0.1,
            }),
            0,
        )
        .unwrap()
    }

    fn opts() -> BenchOptions {
        BenchOptions {
            lengths: vec![4, 16],
            iterations: 7,
            warmup: 2,
            seed: 1,
        }
    }

    #[test]
    fn report_structure() {
        let r = bench_latency("cnn", &cnn(), Precision::F32, &opts(), true).unwrap();
        assert_eq!(r.frozen.len(), 2);
        assert_eq!(r.live.as_ref().unwrap().len(), 2);
        for s in r.frozen.iter().chain(r.live.as_ref().unwrap()) {
            assert_eq!(s.samples_ms.len(), 7);
            assert!(s.mean_ms >= s.min_ms && s.max_ms >= s.mean_ms && s.std_ms >= 0.0);
        }
        assert_eq!((r.iterations, r.warmup), (7, 2));
        assert_eq!(r.frozen.iter().map(|s| s.length).collect::<Vec<_>>(), vec![4, 16]);
    }

    #[test]
    fn stats_from_known_samples() {
        let s = LatencyStats::from_samples(4, vec![1.0, 3.0]);
        assert_eq!((s.mean_ms, s.std_ms, s.min_ms, s.max_ms), (2.0, 1.0, 1.0, 3.0));
    }

    #[test]
    fn bad_options_rejected() {
        let m = cnn();
        for o in [
            BenchOptions { iterations: 0, ..opts() },
            BenchOptions { lengths: vec![], ..opts() },
            BenchOptions { lengths: vec![17], ..opts() },
        ] {
            assert!(bench_live(&m, &o).is_err());
        }
    }

    #[test]
    fn cost_table_rows_and_round_trip() {
        let mut r = bench_latency("cnn", &cnn(), Precision::F32, &opts(), false).unwrap();
        r.parameters = 124_510_000;
        let (csv_text, md) = emit_cost_table(std::slice::from_ref(&r)).unwrap();
        let mut rd = csv::Reader::from_reader(csv_text.as_bytes());
        let headers = rd.headers().unwrap().clone();
        assert_eq!(headers.iter().collect::<Vec<_>>(), vec!["model", "params_m", "file_mb_f32", "file_mb_int8", "ms_len_4", "ms_len_16"]);
        let rows: Vec<csv::StringRecord> = rd.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(&rows[0][1], "124.51");
        let f32_mb: f64 = rows[0][2].parse().unwrap();
        assert!((f32_mb - r.file_bytes_f32 as f64 / 1e6).abs() < 1e-3);
        let ms: f64 = rows[0][4].parse().unwrap();
        assert!((ms - r.frozen[0].mean_ms).abs() < 1e-4);
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| cnn | 124.51 |"));
        assert!(emit_cost_table(&[]).is_err());
    }
}
