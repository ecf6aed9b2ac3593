//! Labeled datasets: CSV and CoNLL loaders and writers, plus synthetic
//! desk-scale generators.

mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

pub use synth::{
    lexicon_oracle_tagger, marker_oracle_classifier, synth_classification, synth_documents, synth_sequence_labeling, synth_texts,
    SynthClassification, SynthLabeling,
};

/// One labeled example. Classification examples carry exactly one label;
/// sequence-labeling examples carry one tag per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub labels: Vec<usize>,
}

impl Example {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Class id of a classification example.
    pub fn label(&self) -> usize {
        self.labels[0]
    }
}

/// One file's worth of examples with the label names found in it.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub task: Task,
    pub labels: Vec<String>,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Join three splits under one sorted label vocabulary.
    pub fn from_splits(name: &str, train: Split, dev: Split, test: Split) -> Result<Dataset> {
        let task = train.task;
        if dev.task != task || test.task != task {
            return Err(Error::Contract("splits disagree on the task".into()));
        }
        let labels: Vec<String> = [&train, &dev, &test]
            .iter()
            .flat_map(|s| s.labels.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let remap = |s: Split| -> Vec<Example> {
            let map: Vec<usize> = s
                .labels
                .iter()
                .map(|l| labels.binary_search(l).expect("label in union"))
                .collect();
            s.examples
                .into_iter()
                .map(|mut e| {
                    e.labels.iter_mut().for_each(|l| *l = map[*l]);
                    e
                })
                .collect()
        };
        Ok(Dataset {
            name: name.to_string(),
            task,
            train: remap(train),
            dev: remap(dev),
            test: remap(test),
            labels,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Label names of an example's tags.
    pub fn tag_names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.labels[i].clone()).collect()
    }

    fn split(&self, examples: &[Example]) -> Split {
        Split {
            task: self.task,
            labels: self.labels.clone(),
            examples: examples.to_vec(),
        }
    }

    /// Write `train`, `dev` and `test` files into `dir` in the task's format.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ex) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            let split = self.split(ex);
            match self.task {
                Task::Classification => write_classification_csv(&dir.join(format!("{name}.csv")), &split)?,
                Task::SequenceLabeling => write_conll(&dir.join(format!("{name}.conll")), &split)?,
            }
        }
        Ok(())
    }

    /// Load a directory written by [`Dataset::write_dir`].
    pub fn read_dir(name: &str, task: Task, dir: &Path) -> Result<Dataset> {
        let load = |split: &str| match task {
            Task::Classification => load_classification_csv(&dir.join(format!("{split}.csv"))),
            Task::SequenceLabeling => load_conll(&dir.join(format!("{split}.conll"))),
        };
        Dataset::from_splits(name, load("train")?, load("dev")?, load("test")?)
    }
}

/// CSV with header `text,label`. Labels are numbered in sorted order.
pub fn load_classification_csv(path: &Path) -> Result<Split> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, None, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(path, Some(1), e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "text" || &headers[1] != "label" {
        return Err(Error::format(path, Some(1), "header must be `text,label`"));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = rec.as_ref().ok().and_then(|r| r.position()).map(|p| p.line() as usize).unwrap_or(i + 2);
        let rec = rec.map_err(|e| Error::format(path, Some(line), e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::format(path, Some(line), format!("expected 2 fields, got {}", rec.len())));
        }
        let label = rec[1].trim();
        if label.is_empty() {
            return Err(Error::format(path, Some(line), "empty label"));
        }
        let tokens: Vec<String> = rec[0].split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::format(path, Some(line), "empty text"));
        }
        rows.push((tokens, label.to_string()));
    }
    let labels: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let examples = rows
        .into_iter()
        .map(|(tokens, l)| Example {
            tokens,
            labels: vec![labels.binary_search(&l).expect("label collected")],
        })
        .collect();
    Ok(Split {
        task: Task::Classification,
        labels,
        examples,
    })
}

pub fn write_classification_csv(path: &Path, split: &Split) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, None, e.to_string()))?;
    w.write_record(["text", "label"])?;
    for e in &split.examples {
        w.write_record([e.text().as_str(), split.labels[e.label()].as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Whether `tag` is `O`, `B-X` or `I-X` with a non-empty `X`.
pub fn is_bio_tag(tag: &str) -> bool {
    tag == "O"
        || tag
            .strip_prefix("B-")
            .or_else(|| tag.strip_prefix("I-"))
            .is_some_and(|t| !t.is_empty())
}

/// `token<TAB>tag` lines, sentences separated by blank lines.
pub fn load_conll(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sentences: Vec<Vec<(String, String)>> = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, Some(i + 1), "expected `token<TAB>tag`"))?;
        let tag = tag.trim();
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::format(path, Some(i + 1), format!("bad token {token:?}")));
        }
        if !is_bio_tag(tag) {
            return Err(Error::format(path, Some(i + 1), format!("tag `{tag}` is not O, B-X or I-X")));
        }
        current.push((token.to_string(), tag.to_string()));
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    let labels: Vec<String> = sentences
        .iter()
        .flatten()
        .map(|(_, t)| t.clone())
        .chain(std::iter::once("O".to_string()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let examples = sentences
        .into_iter()
        .map(|s| {
            let (tokens, tags): (Vec<String>, Vec<String>) = s.into_iter().unzip();
            Example {
                tokens,
                labels: tags.iter().map(|t| labels.binary_search(t).expect("tag collected")).collect(),
            }
        })
        .collect();
    Ok(Split {
        task: Task::SequenceLabeling,
        labels,
        examples,
    })
}

pub fn write_conll(path: &Path, split: &Split) -> Result<()> {
    let mut out = String::new();
    for (i, e) in split.examples.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, &tag) in e.tokens.iter().zip(&e.labels) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&split.labels[tag]);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
