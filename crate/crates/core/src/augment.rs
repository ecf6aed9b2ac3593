//! Unlabeled pools: merging, teacher pseudo-labels, label balancing and
//! token-length filtering.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{teacher_logits, SoftTarget, TaskData};
use crate::error::{Error, Result};
use crate::model::{Model, Task};

/// Collapse runs of whitespace to single spaces and trim.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledPool {
    pub texts: Vec<String>,
    /// Where each text came from.
    pub sources: Vec<String>,
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Add texts from `source`, skipping blanks and texts already present.
    pub fn extend<I, S>(&mut self, source: &str, texts: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen: HashSet<String> = self.texts.iter().cloned().collect();
        for t in texts {
            let t = normalize_text(t.as_ref());
            if !t.is_empty() && seen.insert(t.clone()) {
                self.texts.push(t);
                self.sources.push(source.to_string());
            }
        }
    }

    fn select(&self, keep: impl Fn(&str) -> bool) -> UnlabeledPool {
        let mut out = UnlabeledPool::default();
        for (t, s) in self.texts.iter().zip(&self.sources) {
            if keep(t) {
                out.texts.push(t.clone());
                out.sources.push(s.clone());
            }
        }
        out
    }
}

/// Train-split texts of every dataset, labels dropped, exact duplicates
/// (after whitespace normalization) removed. First occurrence wins.
pub fn merge_pools(datasets: &[&Dataset]) -> Result<UnlabeledPool> {
    if datasets.is_empty() {
        return Err(Error::Contract("merge_pools needs at least one dataset".into()));
    }
    let mut pool = UnlabeledPool::default();
    for ds in datasets {
        pool.extend(&ds.name, ds.train.iter().map(|e| e.text()));
    }
    Ok(pool)
}

/// One text per line; blank lines skipped. The source tag is the file stem.
pub fn read_pool(path: &Path) -> Result<UnlabeledPool> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut pool = UnlabeledPool::default();
    pool.extend(&source, body.lines());
    Ok(pool)
}

pub fn write_pool(path: &Path, pool: &UnlabeledPool) -> Result<()> {
    let mut body = pool.texts.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Pool texts with cached teacher targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabeled {
    pub texts: Vec<String>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<SoftTarget>,
}

impl PseudoLabeled {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> PseudoLabeled {
        PseudoLabeled {
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

/// Teacher targets for every pool text that tokenizes to something.
pub fn pseudo_label(teacher: &Model, data: &TaskData, pool: &UnlabeledPool) -> Result<PseudoLabeled> {
    let mut texts = Vec::with_capacity(pool.len());
    let mut inputs = Vec::with_capacity(pool.len());
    for t in &pool.texts {
        let ids = data.encode_tokens(&t.split_whitespace().collect::<Vec<_>>());
        if !ids.is_empty() {
            texts.push(t.clone());
            inputs.push(ids);
        }
    }
    let targets = teacher_logits(teacher, &inputs)?;
    Ok(PseudoLabeled { texts, inputs, targets })
}

/// `text_id,position,hard_label,logit_0,..` with one row per target row.
pub fn write_pseudo_labels(path: &Path, set: &PseudoLabeled) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, None, e.to_string()))?;
    let c = set.targets.first().map(|t| t.num_classes).unwrap_or(0);
    let mut header = vec!["text_id".to_string(), "position".into(), "hard_label".into()];
    header.extend((0..c).map(|j| format!("logit_{j}")));
    w.write_record(&header)?;
    for (id, t) in set.targets.iter().enumerate() {
        for (pos, row) in t.logits.chunks(t.num_classes).enumerate() {
            let mut rec = vec![id.to_string(), pos.to_string(), t.hard_labels[pos].to_string()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    /// Count per hard label, for labels that occur.
    pub counts: BTreeMap<usize, usize>,
    /// Population standard deviation of the counts.
    pub std: f64,
    pub total: usize,
}

impl PoolStats {
    pub fn from_labels(labels: &[usize]) -> Result<PoolStats> {
        if labels.is_empty() {
            return Err(Error::Contract("statistics of an empty pool".into()));
        }
        let mut counts = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        Ok(PoolStats::from_counts(counts))
    }

    pub fn from_counts(counts: BTreeMap<usize, usize>) -> PoolStats {
        let total: usize = counts.values().sum();
        let k = counts.len().max(1) as f64;
        let mean = total as f64 / k;
        let var = counts.values().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / k;
        PoolStats {
            counts,
            std: var.sqrt(),
            total,
        }
    }

    /// Nearest-rank median of the per-label counts.
    pub fn median(&self) -> usize {
        let mut v: Vec<usize> = self.counts.values().copied().collect();
        v.sort_unstable();
        nearest_rank(&v, 0.5)
    }
}

/// Per-label statistics of a classification pool's hard labels, or of
/// every token's hard label for sequence labeling.
pub fn pool_stats(set: &PseudoLabeled) -> Result<PoolStats> {
    let labels: Vec<usize> = set.targets.iter().flat_map(|t| t.hard_labels.iter().copied()).collect();
    PoolStats::from_labels(&labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum BalanceStrategy {
    /// Subsample every label down to the median label count.
    MedianCap,
    /// Exactly `n` items per label, duplicating when a label is short.
    TargetOversample { n: usize },
}

/// Indices (ascending, duplicates allowed) selected from items carrying
/// `labels` under `strategy`.
pub fn balance_indices(labels: &[usize], strategy: BalanceStrategy, seed: u64) -> Result<Vec<usize>> {
    let stats = PoolStats::from_labels(labels)?;
    let cap = match strategy {
        BalanceStrategy::MedianCap => stats.median(),
        BalanceStrategy::TargetOversample { n: 0 } => {
            return Err(Error::Parameter("target_oversample needs n ≥ 1".into()));
        }
        BalanceStrategy::TargetOversample { n } => n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for &label in stats.counts.keys() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if members.len() >= cap {
            let mut chosen: Vec<usize> = sample(&mut rng, members.len(), cap).into_iter().map(|j| members[j]).collect();
            chosen.sort_unstable();
            picked.extend(chosen);
        } else {
            picked.extend(&members);
            if let BalanceStrategy::TargetOversample { .. } = strategy {
                for _ in members.len()..cap {
                    picked.push(members[rng.random_range(0..members.len())]);
                }
            }
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Resample a classification pool by its hard labels.
pub fn balance_pool(set: &PseudoLabeled, strategy: BalanceStrategy, seed: u64) -> Result<PseudoLabeled> {
    if set.targets.iter().any(|t| t.rows() != 1) {
        return Err(Error::Parameter("balancing applies to classification pools only".into()));
    }
    let labels: Vec<usize> = set.targets.iter().map(SoftTarget::hard_label).collect();
    Ok(set.subset(&balance_indices(&labels, strategy, seed)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub q1: usize,
    pub q3: usize,
    pub max: usize,
}

/// The `ceil(q·n)`-th smallest value of sorted `v`.
fn nearest_rank(v: &[usize], q: f64) -> usize {
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Statistics of token counts.
pub fn length_stats_of(lengths: &[usize]) -> Result<LengthStats> {
    if lengths.is_empty() {
        return Err(Error::Contract("length statistics of an empty pool".into()));
    }
    let mut v = lengths.to_vec();
    v.sort_unstable();
    let n = v.len() as f64;
    let mean = v.iter().sum::<usize>() as f64 / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(LengthStats {
        mean,
        std: var.sqrt(),
        min: v[0],
        q1: nearest_rank(&v, 0.25),
        q3: nearest_rank(&v, 0.75),
        max: v[v.len() - 1],
    })
}

pub fn length_stats<S: AsRef<str>>(texts: &[S]) -> Result<LengthStats> {
    let lengths: Vec<usize> = texts.iter().map(|t| t.as_ref().split_whitespace().count()).collect();
    length_stats_of(&lengths)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthFilter {
    MinMax,
    Q1Q3,
}

impl LengthFilter {
    pub fn bounds(self, r: &LengthStats) -> (usize, usize) {
        match self {
            LengthFilter::MinMax => (r.min, r.max),
            LengthFilter::Q1Q3 => (r.q1, r.q3),
        }
    }
}

/// Keep texts whose token count lies inside the chosen bounds of `reference`.
pub fn filter_by_length(pool: &UnlabeledPool, mode: LengthFilter, reference: &LengthStats) -> UnlabeledPool {
    let (lo, hi) = mode.bounds(reference);
    pool.select(|t| (lo..=hi).contains(&t.split_whitespace().count()))
}

/// Lengths of a task's labeled training texts, as the filter reference.
pub fn reference_lengths(data: &TaskData) -> Result<LengthStats> {
    let offset = usize::from(data.task == Task::Classification);
    let lengths: Vec<usize> = data.train.inputs.iter().map(|ids| ids.len() - offset).collect();
    length_stats_of(&lengths)
}
