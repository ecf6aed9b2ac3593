//! Whitespace word-level vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CLS_ID, UNK_ID};

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Split on any whitespace.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every word with at least `min_count`
    /// occurrences, most frequent first, ties broken lexicographically.
    pub fn build<I, S>(texts: I, min_count: usize) -> Vocab
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in tokenize(t.as_ref()) {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    /// Specials followed by `words` in order; duplicates and specials skipped.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
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

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Ids for already-split tokens, unknowns mapped to [UNK].
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// `[CLS] w1 .. wn`, cut to `max_len` ids in total.
    pub fn encode_classification<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CLS_ID);
        ids.extend(tokens.iter().take(max_len.saturating_sub(1)).map(|t| self.id(t.as_ref())));
        ids
    }

    /// One id per token, cut to `max_len`.
    pub fn encode_labeling<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        tokens.iter().take(max_len).map(|t| self.id(t.as_ref())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.words.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// One word per line; the first four lines must be the special tokens.
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::format(path, Some(i + 1), format!("expected special token {special}")));
            }
        }
        let v = Vocab::from_words(words.into_iter().skip(SPECIAL_TOKENS.len()));
        Ok(v)
    }
}
