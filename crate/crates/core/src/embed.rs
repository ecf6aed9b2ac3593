//! Word-vector tables and student embedding initialization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distill::TrainHistory;
use crate::error::{Error, Result};
use crate::model::{Model, PAD_ID};
use crate::tokenizer::Vocab;

pub const OOV_STD: f32 = 0.02;
const TOKEN_TABLE: &str = "embeddings.token";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("embedding dim must be positive".into()));
        }
        Ok(EmbeddingTable {
            dim,
            words: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Add a vector; a repeated word or wrong length is a contract error.
    pub fn insert(&mut self, word: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Contract(format!("vector of {} for dim {}", vector.len(), self.dim)));
        }
        if self.index.contains_key(word) {
            return Err(Error::Contract(format!("duplicate word `{word}`")));
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }
}

/// Text vectors: optional `count dim` header, then `word v1 .. vd` lines.
pub fn load_word_vectors(path: &Path) -> Result<EmbeddingTable> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in body.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let lineno = i + 1;
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            let dim: usize = fields[1].parse().expect("checked");
            table = Some(EmbeddingTable::new(dim).map_err(|e| Error::format(path, Some(1), e.to_string()))?);
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::format(path, Some(lineno), format!("bad number: {e}")))?;
        let t = match &mut table {
            Some(t) => t,
            None => table.insert(EmbeddingTable::new(values.len()).map_err(|_| Error::format(path, Some(lineno), "no vector values"))?),
        };
        if values.len() != t.dim {
            return Err(Error::format(
                path,
                Some(lineno),
                format!("expected {} values, got {}", t.dim, values.len()),
            ));
        }
        t.insert(fields[0], &values)
            .map_err(|e| Error::format(path, Some(lineno), e.to_string()))?;
    }
    table.ok_or_else(|| Error::format(path, None, "no vectors"))
}

/// Write with a `count dim` header; values use shortest round-trip form.
pub fn save_word_vectors(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut out = format!("{} {}\n", table.len(), table.dim);
    for (i, w) in table.words.iter().enumerate() {
        out.push_str(w);
        for v in &table.vectors[i * table.dim..(i + 1) * table.dim] {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The teacher's token-embedding rows, one per vocabulary word.
pub fn extract_teacher_embeddings(teacher: &Model, vocab: &Vocab) -> Result<EmbeddingTable> {
    let table = teacher
        .params()
        .get(TOKEN_TABLE)
        .ok_or_else(|| Error::Contract("teacher has no token embedding".into()))?;
    let (rows, dim) = (table.shape()[0], table.shape()[1]);
    if rows != vocab.len() {
        return Err(Error::Contract(format!("teacher has {rows} embedding rows for {} words", vocab.len())));
    }
    let mut out = EmbeddingTable::new(dim)?;
    for (id, w) in vocab.words().iter().enumerate() {
        out.insert(w, &table.data()[id * dim..(id + 1) * dim])?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub copied: usize,
    pub oov: usize,
    /// `|vocab \ table| / |vocab|`
    pub oov_fraction: f64,
}

/// Overwrite the student's token embedding: table rows are copied, other
/// rows drawn from N(0, 0.02) with `seed`, the PAD row zeroed.
pub fn initialize_student_embedding(student: &mut Model, table: &EmbeddingTable, vocab: &Vocab, seed: u64) -> Result<InitReport> {
    let dim = student.spec().embed_dim();
    if table.dim != dim {
        return Err(Error::config(
            "embeddings",
            format!("table dim {} does not match student embed_dim {dim}", table.dim),
        ));
    }
    let emb = student
        .params_mut()
        .get_mut(TOKEN_TABLE)
        .ok_or_else(|| Error::Contract("student has no token embedding".into()))?;
    if emb.shape()[0] != vocab.len() {
        return Err(Error::Contract(format!("student has {} rows for {} words", emb.shape()[0], vocab.len())));
    }
    let normal = Normal::new(0.0f32, OOV_STD).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut copied = 0;
    let data = emb.data_mut();
    for (id, w) in vocab.words().iter().enumerate() {
        let row = &mut data[id * dim..(id + 1) * dim];
        match table.get(w) {
            Some(v) => {
                row.copy_from_slice(v);
                copied += 1;
            }
            None => row.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
        }
    }
    data[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
    let oov = vocab.len() - copied;
    Ok(InitReport {
        copied,
        oov,
        oov_fraction: oov as f64 / vocab.len() as f64,
    })
}

/// Optimizer steps taken when the best validation loss was reached.
pub fn convergence_steps(history: &TrainHistory) -> u64 {
    history.steps_to_best
}
