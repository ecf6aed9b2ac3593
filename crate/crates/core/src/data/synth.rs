//! Synthetic tasks whose ground truth is recoverable by a simple oracle.
//!
//! Classification: every class owns a few marker words; a text contains
//! more markers of its own class than of any other, padded with filler.
//! Sequence labeling: entity phrases drawn from per-type lexicons are
//! planted inside filler text and tagged B-/I-.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Task;

const ENTITY_NAMES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthClassification {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub markers_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an example's label is replaced by another class.
    pub noise: f64,
}

impl Default for SynthClassification {
    fn default() -> Self {
        SynthClassification {
            seed: 0,
            n_train: 600,
            n_dev: 200,
            n_test: 200,
            n_classes: 2,
            vocab_size: 200,
            markers_per_class: 6,
            min_len: 4,
            max_len: 12,
            noise: 0.0,
        }
    }
}

fn class_name(c: usize) -> String {
    format!("c{c:02}")
}

fn marker(class: usize, j: usize) -> String {
    format!("m{class}_{j}")
}

/// Class owning a marker word.
fn marker_class(word: &str) -> Option<usize> {
    word.strip_prefix('m')?.split_once('_')?.0.parse().ok()
}

impl SynthClassification {
    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Parameter("split sizes must be positive".into()));
        }
        if self.n_classes < 2 || self.vocab_size == 0 || self.markers_per_class == 0 {
            return Err(Error::Parameter("need ≥ 2 classes, filler words and markers".into()));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Parameter(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Parameter(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, label: usize, min_len: usize, max_len: usize) -> Vec<String> {
        let len = rng.random_range(min_len..=max_len);
        let own = if len >= 3 { rng.random_range(1..=2) } else { 1 };
        let distractors = rng.random_range(0..own);
        let mut words = Vec::with_capacity(len);
        for _ in 0..own {
            words.push(marker(label, rng.random_range(0..self.markers_per_class)));
        }
        for _ in 0..distractors {
            let mut other = rng.random_range(0..self.n_classes - 1);
            if other >= label {
                other += 1;
            }
            words.push(marker(other, rng.random_range(0..self.markers_per_class)));
        }
        while words.len() < len {
            words.push(format!("w{}", rng.random_range(0..self.vocab_size)));
        }
        words.shuffle(rng);
        words
    }

    fn examples(&self, rng: &mut ChaCha8Rng, n: usize, seen: &mut HashSet<Vec<String>>) -> Vec<Example> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.n_classes).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .map(|label| {
                let mut tokens = self.sentence(rng, label, self.min_len, self.max_len);
                for _ in 0..100 {
                    if seen.insert(tokens.clone()) {
                        break;
                    }
                    tokens = self.sentence(rng, label, self.min_len, self.max_len);
                }
                let mut shown = label;
                if self.noise > 0.0 && rng.random_bool(self.noise) {
                    shown = (label + rng.random_range(1..self.n_classes)) % self.n_classes;
                }
                Example {
                    tokens,
                    labels: vec![shown],
                }
            })
            .collect()
    }
}

pub fn synth_classification(cfg: &SynthClassification) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let train = cfg.examples(&mut rng, cfg.n_train, &mut seen);
    let dev = cfg.examples(&mut rng, cfg.n_dev, &mut seen);
    let test = cfg.examples(&mut rng, cfg.n_test, &mut seen);
    Ok(Dataset {
        name: format!("synth-cls-{}", cfg.seed),
        task: Task::Classification,
        labels: (0..cfg.n_classes).map(class_name).collect(),
        train,
        dev,
        test,
    })
}

/// Unlabeled texts from the classification generator with their own
/// length range, e.g. for building an augmentation pool.
pub fn synth_texts(cfg: &SynthClassification, seed: u64, n: usize, min_len: usize, max_len: usize) -> Result<Vec<String>> {
    let c = SynthClassification {
        min_len,
        max_len,
        ..cfg.clone()
    };
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let label = rng.random_range(0..c.n_classes);
            c.sentence(&mut rng, label, min_len, max_len).join(" ")
        })
        .collect())
}

/// Long unlabeled documents: each joins `sentences` generator sentences of
/// the configured length, every sentence with its own class.
pub fn synth_documents(cfg: &SynthClassification, seed: u64, n: usize, sentences: usize) -> Result<Vec<String>> {
    cfg.validate()?;
    if sentences == 0 {
        return Err(Error::Parameter("documents need at least one sentence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            (0..sentences)
                .map(|_| {
                    let label = rng.random_range(0..cfg.n_classes);
                    cfg.sentence(&mut rng, label, cfg.min_len, cfg.max_len).join(" ")
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}

/// Majority vote over marker words; ties go to the lowest class.
pub fn marker_oracle_classifier(tokens: &[String], n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    for t in tokens {
        if let Some(c) = marker_class(t).filter(|&c| c < n_classes) {
            counts[c] += 1;
        }
    }
    crate::tensor::argmax(&counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthLabeling {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_entity_types: usize,
    pub vocab_size: usize,
    pub phrases_per_type: usize,
    /// Filler tokens per sentence.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a planted entity is tagged `O`.
    pub noise: f64,
}

impl Default for SynthLabeling {
    fn default() -> Self {
        SynthLabeling {
            seed: 0,
            n_train: 400,
            n_dev: 150,
            n_test: 150,
            n_entity_types: 3,
            vocab_size: 200,
            phrases_per_type: 8,
            min_len: 3,
            max_len: 10,
            noise: 0.0,
        }
    }
}

fn entity_name(t: usize) -> String {
    ENTITY_NAMES.get(t).map(|s| s.to_string()).unwrap_or_else(|| format!("T{t}"))
}

impl SynthLabeling {
    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Parameter("split sizes must be positive".into()));
        }
        if self.n_entity_types == 0 || self.vocab_size == 0 || self.phrases_per_type == 0 {
            return Err(Error::Parameter("need entity types, filler words and phrases".into()));
        }
        if self.min_len > self.max_len {
            return Err(Error::Parameter(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Parameter(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }

    /// Phrase `j` of type `t`; lengths cycle through 1, 2, 3 tokens and
    /// every word belongs to exactly one phrase.
    pub fn phrase(&self, t: usize, j: usize) -> Vec<String> {
        (0..1 + j % 3).map(|k| format!("e{t}_{j}_{k}")).collect()
    }

    /// Every (type, phrase) in the lexicons.
    pub fn lexicon(&self) -> Vec<(usize, Vec<String>)> {
        (0..self.n_entity_types)
            .flat_map(|t| (0..self.phrases_per_type).map(move |j| (t, j)))
            .map(|(t, j)| (t, self.phrase(t, j)))
            .collect()
    }

    /// Tag names in sorted order, matching the dataset's label ids.
    pub fn tag_names(&self) -> Vec<String> {
        let mut tags = vec!["O".to_string()];
        for t in 0..self.n_entity_types {
            tags.push(format!("B-{}", entity_name(t)));
            tags.push(format!("I-{}", entity_name(t)));
        }
        tags.sort();
        tags
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, tags: &[String]) -> (Vec<String>, Vec<usize>) {
        let tag_id = |s: &str| tags.iter().position(|t| t == s).expect("known tag");
        let o = tag_id("O");
        let fillers = rng.random_range(self.min_len..=self.max_len);
        let n_entities = rng.random_range(1..=3);
        // slot i holds either a filler word or an entity phrase
        let mut units: Vec<Option<(usize, usize)>> = vec![None; fillers];
        for _ in 0..n_entities {
            let at = rng.random_range(0..=units.len());
            units.insert(at, Some((rng.random_range(0..self.n_entity_types), rng.random_range(0..self.phrases_per_type))));
        }
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        for u in units {
            match u {
                None => {
                    tokens.push(format!("w{}", rng.random_range(0..self.vocab_size)));
                    labels.push(o);
                }
                Some((t, j)) => {
                    let hidden = self.noise > 0.0 && rng.random_bool(self.noise);
                    for (k, w) in self.phrase(t, j).into_iter().enumerate() {
                        tokens.push(w);
                        labels.push(if hidden {
                            o
                        } else if k == 0 {
                            tag_id(&format!("B-{}", entity_name(t)))
                        } else {
                            tag_id(&format!("I-{}", entity_name(t)))
                        });
                    }
                }
            }
        }
        (tokens, labels)
    }
}

pub fn synth_sequence_labeling(cfg: &SynthLabeling) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tags = cfg.tag_names();
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let mut s = cfg.sentence(rng, &tags);
                for _ in 0..100 {
                    if seen.insert(s.0.clone()) {
                        break;
                    }
                    s = cfg.sentence(rng, &tags);
                }
                Example {
                    tokens: s.0,
                    labels: s.1,
                }
            })
            .collect()
    };
    let train = split(cfg.n_train, &mut rng);
    let dev = split(cfg.n_dev, &mut rng);
    let test = split(cfg.n_test, &mut rng);
    Ok(Dataset {
        name: format!("synth-seq-{}", cfg.seed),
        task: Task::SequenceLabeling,
        labels: tags,
        train,
        dev,
        test,
    })
}

/// Tag by exact lexicon lookup: a phrase's first word followed by the
/// rest of that phrase opens an entity.
pub fn lexicon_oracle_tagger(cfg: &SynthLabeling, tokens: &[String]) -> Vec<String> {
    let mut first: HashMap<&str, (usize, Vec<String>)> = HashMap::new();
    let lexicon = cfg.lexicon();
    for (t, words) in &lexicon {
        first.insert(words[0].as_str(), (*t, words.clone()));
    }
    let mut out = vec!["O".to_string(); tokens.len()];
    let mut i = 0;
    while i < tokens.len() {
        if let Some((t, words)) = first.get(tokens[i].as_str()) {
            if tokens.len() >= i + words.len() && tokens[i..i + words.len()] == words[..] {
                out[i] = format!("B-{}", entity_name(*t));
                for slot in out.iter_mut().skip(i + 1).take(words.len() - 1) {
                    *slot = format!("I-{}", entity_name(*t));
                }
                i += words.len();
                continue;
            }
        }
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{macro_f1_classification, seqlab_f1, SeqMode};

    #[test]
    fn classification_is_deterministic() {
        let cfg = SynthClassification::default();
        assert_eq!(synth_classification(&cfg).unwrap(), synth_classification(&cfg).unwrap());
        let other = SynthClassification { seed: 1, ..cfg.clone() };
        assert_ne!(synth_classification(&cfg).unwrap(), synth_classification(&other).unwrap());
    }

    #[test]
    fn marker_oracle_is_perfect_without_noise() {
        for n_classes in [2, 3, 5] {
            let cfg = SynthClassification {
                n_classes,
                seed: n_classes as u64,
                ..Default::default()
            };
            let ds = synth_classification(&cfg).unwrap();
            for split in [&ds.train, &ds.dev, &ds.test] {
                let golds: Vec<usize> = split.iter().map(|e| e.label()).collect();
                let preds: Vec<usize> = split.iter().map(|e| marker_oracle_classifier(&e.tokens, n_classes)).collect();
                assert_eq!(macro_f1_classification(&preds, &golds, n_classes).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn noise_lowers_oracle_accuracy() {
        let cfg = SynthClassification {
            noise: 0.2,
            n_train: 2000,
            ..Default::default()
        };
        let ds = synth_classification(&cfg).unwrap();
        let wrong = ds.train.iter().filter(|e| marker_oracle_classifier(&e.tokens, 2) != e.label()).count();
        let rate = wrong as f64 / ds.train.len() as f64;
        assert!((rate - 0.2).abs() < 0.04, "{rate}");
    }

    #[test]
    fn labels_near_uniform() {
        let cfg = SynthClassification {
            n_train: 1000,
            n_classes: 3,
            ..Default::default()
        };
        let ds = synth_classification(&cfg).unwrap();
        for c in 0..3 {
            let n = ds.train.iter().filter(|e| e.label() == c).count() as f64;
            assert!((n / 1000.0 - 1.0 / 3.0).abs() < 0.05);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = synth_classification(&SynthClassification::default()).unwrap();
        let train: HashSet<_> = ds.train.iter().map(|e| e.tokens.clone()).collect();
        assert!(ds.test.iter().all(|e| !train.contains(&e.tokens)));
    }

    #[test]
    fn labeling_invariants() {
        let cfg = SynthLabeling::default();
        let ds = synth_sequence_labeling(&cfg).unwrap();
        assert_eq!(ds, synth_sequence_labeling(&cfg).unwrap());
        for e in ds.train.iter().chain(&ds.test) {
            assert_eq!(e.tokens.len(), e.labels.len());
            let tags = ds.tag_names(&e.labels);
            for i in 0..tags.len() {
                if let Some(t) = tags[i].strip_prefix("I-") {
                    assert!(i > 0);
                    assert!(tags[i - 1] == format!("B-{t}") || tags[i - 1] == format!("I-{t}"));
                }
            }
        }
    }

    #[test]
    fn lexicon_oracle_is_perfect_without_noise() {
        let cfg = SynthLabeling::default();
        let ds = synth_sequence_labeling(&cfg).unwrap();
        let golds: Vec<Vec<String>> = ds.test.iter().map(|e| ds.tag_names(&e.labels)).collect();
        let preds: Vec<Vec<String>> = ds.test.iter().map(|e| lexicon_oracle_tagger(&cfg, &e.tokens)).collect();
        assert_eq!(seqlab_f1(&preds, &golds, SeqMode::Entity).unwrap(), 1.0);
        assert_eq!(seqlab_f1(&preds, &golds, SeqMode::TokenMacro).unwrap(), 1.0);
    }

    #[test]
    fn pool_texts_respect_length() {
        let texts = synth_texts(&SynthClassification::default(), 3, 50, 20, 30).unwrap();
        assert_eq!(texts.len(), 50);
        assert!(texts.iter().all(|t| (20..=30).contains(&t.split_whitespace().count())));
    }

    #[test]
    fn documents_join_whole_sentences() {
        let cfg = SynthClassification { min_len: 3, max_len: 8, ..Default::default() };
        let docs = synth_documents(&cfg, 5, 40, 4).unwrap();
        assert_eq!(docs.len(), 40);
        assert!(docs.iter().all(|d| (12..=32).contains(&d.split_whitespace().count())));
        assert_eq!(docs, synth_documents(&cfg, 5, 40, 4).unwrap());
        assert!(synth_documents(&cfg, 5, 40, 0).is_err());
    }
}
