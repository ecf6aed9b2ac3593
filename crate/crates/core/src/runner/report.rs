use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TEACHER_NAME;
use crate::distill::Stage;
use crate::error::{Error, Result};

/// One trained model. Columns after `steps_to_best` carry provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub stage: String,
    pub loss_mode: String,
    pub lr: f32,
    pub seed: u64,
    pub dev_f1: f32,
    pub test_f1: f32,
    pub best_epoch: usize,
    pub steps_to_best: u64,
    pub pool_size: usize,
    pub config_hash: String,
    pub dataset_hash: String,
}

pub(crate) fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, None, e.to_string()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every row of every `results/*.csv` under `out_dir`, files in name order.
pub fn read_results(out_dir: &Path) -> Result<Vec<ResultRow>> {
    let dir = out_dir.join("results");
    let mut files: Vec<_> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&dir, e)),
    };
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        let mut rd = csv::Reader::from_path(&f).map_err(|e| Error::format(&f, None, e.to_string()))?;
        for (i, r) in rd.deserialize().enumerate() {
            rows.push(r.map_err(|e| Error::format(&f, Some(i + 2), e.to_string()))?);
        }
    }
    Ok(rows)
}

fn stage_rank(stage: &str) -> (usize, String) {
    match stage.parse::<Stage>() {
        Ok(s) => (Stage::ALL.iter().position(|&x| x == s).expect("listed") + 1, String::new()),
        Err(_) if stage == TEACHER_NAME => (0, String::new()),
        Err(_) => (Stage::ALL.len() + 1, stage.to_string()),
    }
}

fn stage_title(stage: &str) -> String {
    match stage.parse::<Stage>() {
        Ok(s) => s.title().to_string(),
        Err(_) if stage == TEACHER_NAME => "Teacher".to_string(),
        Err(_) => stage.to_string(),
    }
}

fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Markdown table of mean (and population std) F1 over seeds: the
/// teacher first, then each model in order of appearance with its stages
/// in ladder order.
pub fn summarize(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Contract("no result rows to summarize".into()));
    }
    let mut models: Vec<&str> = Vec::new();
    if rows.iter().any(|r| r.model == TEACHER_NAME) {
        models.push(TEACHER_NAME);
    }
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut out = String::from(
        "| Model | Stage | Test F1 (mean) | Test F1 (std) | Dev F1 (mean) | Seeds |\n|---|---|---:|---:|---:|---:|\n",
    );
    for m in models {
        let mut stages: Vec<&str> = Vec::new();
        for r in rows.iter().filter(|r| r.model == m) {
            if !stages.contains(&r.stage.as_str()) {
                stages.push(&r.stage);
            }
        }
        stages.sort_by_key(|s| stage_rank(s));
        for s in stages {
            let cell: Vec<&ResultRow> = rows.iter().filter(|r| r.model == m && r.stage == s).collect();
            let test: Vec<f32> = cell.iter().map(|r| r.test_f1).collect();
            let dev: Vec<f32> = cell.iter().map(|r| r.dev_f1).collect();
            let (tm, ts) = mean_std(&test);
            let (dm, _) = mean_std(&dev);
            out.push_str(&format!(
                "| {m} | {} | {tm:.4} | {ts:.4} | {dm:.4} | {} |\n",
                stage_title(s),
                cell.len()
            ));
        }
    }
    Ok(out)
}

/// Rebuild `summary.md` from the result CSVs and return its text.
pub fn write_summary(out_dir: &Path) -> Result<String> {
    let rows = read_results(out_dir)?;
    if rows.is_empty() {
        return Err(Error::Contract(format!(
            "no result rows under {}",
            out_dir.join("results").display()
        )));
    }
    let mut text = format!("# Results\n\n{}", summarize(&rows)?);
    if out_dir.join("cost/cost.md").is_file() {
        text.push_str("\nSize and latency: `cost/cost.md`.\n");
    }
    let path = out_dir.join("summary.md");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(text)
}
