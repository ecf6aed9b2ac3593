//! Macro F1 for classification and F1 for BIO sequence labeling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Unweighted mean of per-class F1 over all `n_classes` declared classes.
/// A class that appears in neither `preds` nor `golds` counts as 0.
pub fn macro_f1_classification(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f32> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!("{} predictions for {} golds", preds.len(), golds.len())));
    }
    if n_classes == 0 {
        return Err(Error::Contract("no classes declared".into()));
    }
    if let Some(&bad) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::Contract(format!("class id {bad} ≥ {n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let total: f64 = (0..n_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum();
    Ok((total / n_classes as f64) as f32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqMode {
    /// Token-level macro F1 with B-X and I-X merged into X; O is a class.
    #[default]
    TokenMacro,
    /// Micro F1 over exactly matching (start, end, type) spans.
    Entity,
}

fn collapse(tag: &str) -> &str {
    tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")).unwrap_or(tag)
}

/// Spans `(start, end_inclusive, type)`. An `I-X` that does not continue
/// an open `X` span opens a new one, as if it were `B-X`.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (begin, kind) = if let Some(k) = tag.strip_prefix("B-") {
            (true, Some(k))
        } else if let Some(k) = tag.strip_prefix("I-") {
            (open.as_ref().is_none_or(|(_, o)| o != k), Some(k))
        } else {
            (false, None)
        };
        if kind.is_none() || begin {
            if let Some((s, k)) = open.take() {
                spans.push((s, i - 1, k));
            }
        }
        if let (true, Some(k)) = (begin, kind) {
            open = Some((i, k.to_string()));
        }
    }
    if let Some((s, k)) = open {
        spans.push((s, tags.len() - 1, k));
    }
    spans
}

pub fn seqlab_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>], mode: SeqMode) -> Result<f32> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!("{} predicted sentences for {} gold", preds.len(), golds.len())));
    }
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!("sentence {i}: {} predicted tags for {} tokens", p.len(), g.len())));
        }
    }
    match mode {
        SeqMode::TokenMacro => {
            let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
            for (p, g) in preds.iter().flatten().zip(golds.iter().flatten()) {
                let (p, g) = (collapse(p.as_ref()), collapse(g.as_ref()));
                if p == g {
                    counts.entry(p).or_default()[0] += 1;
                } else {
                    counts.entry(p).or_default()[1] += 1;
                    counts.entry(g).or_default()[2] += 1;
                }
            }
            if counts.is_empty() {
                return Ok(1.0);
            }
            let total: f64 = counts.values().map(|c| f1(c[0], c[1], c[2])).sum();
            Ok((total / counts.len() as f64) as f32)
        }
        SeqMode::Entity => {
            let mut tp = 0;
            let mut n_pred = 0;
            let mut n_gold = 0;
            for (p, g) in preds.iter().zip(golds) {
                let ps: BTreeSet<_> = extract_spans(p).into_iter().collect();
                let gs: BTreeSet<_> = extract_spans(g).into_iter().collect();
                tp += ps.intersection(&gs).count();
                n_pred += ps.len();
                n_gold += gs.len();
            }
            if n_pred == 0 && n_gold == 0 {
                return Ok(1.0);
            }
            Ok(f1(tp, n_pred - tp, n_gold - tp) as f32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn macro_f1_hand_cases() {
        assert_eq!(macro_f1_classification(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let v = macro_f1_classification(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((v - 0.733_333_3).abs() < 1e-6);
        assert!(macro_f1_classification(&[0, 0, 0, 0], &[1, 1, 0, 1], 2).unwrap() < 0.5);
        assert!(macro_f1_classification(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn absent_class_counts_zero() {
        assert_eq!(macro_f1_classification(&[0, 1], &[0, 1], 3).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn entity_and_token_hand_cases() {
        let gold = vec![tags("B-PER I-PER O")];
        let pred = vec![tags("B-PER O O")];
        assert_eq!(seqlab_f1(&pred, &gold, SeqMode::Entity).unwrap(), 0.0);
        let v = seqlab_f1(&pred, &gold, SeqMode::TokenMacro).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-6);
        for mode in [SeqMode::Entity, SeqMode::TokenMacro] {
            assert_eq!(seqlab_f1(&gold, &gold, mode).unwrap(), 1.0);
        }
    }

    #[test]
    fn stray_inside_tag_opens_span() {
        assert_eq!(extract_spans(&tags("O I-LOC I-LOC O")), vec![(1, 2, "LOC".to_string())]);
        assert_eq!(
            extract_spans(&tags("B-PER I-LOC")),
            vec![(0, 0, "PER".to_string()), (1, 1, "LOC".to_string())]
        );
        assert_eq!(
            extract_spans(&tags("B-PER B-PER I-PER")),
            vec![(0, 0, "PER".to_string()), (1, 2, "PER".to_string())]
        );
        let repaired = vec![tags("O B-LOC I-LOC")];
        let raw = vec![tags("O I-LOC I-LOC")];
        assert_eq!(seqlab_f1(&raw, &repaired, SeqMode::Entity).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        assert!(seqlab_f1(&[tags("O")], &[tags("O O")], SeqMode::Entity).is_err());
    }

    fn tag_strategy() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["O", "B-A", "I-A", "B-B", "I-B"]).prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn macro_f1_bounded_and_relabel_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let v = macro_f1_classification(&p, &g, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let gg: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
            prop_assert!((macro_f1_classification(&pp, &gg, 4).unwrap() - v).abs() < 1e-6);
            let mut rev_p = p.clone();
            let mut rev_g = g.clone();
            rev_p.reverse();
            rev_g.reverse();
            prop_assert_eq!(macro_f1_classification(&rev_p, &rev_g, 4).unwrap(), v);
        }

        #[test]
        fn entity_f1_is_one_iff_spans_equal(
            sents in prop::collection::vec(
                (1usize..8).prop_flat_map(|n| (
                    prop::collection::vec(tag_strategy(), n),
                    prop::collection::vec(tag_strategy(), n),
                )),
                1..6,
            ),
        ) {
            let (p, g): (Vec<Vec<String>>, Vec<Vec<String>>) = sents.into_iter().unzip();
            let v = seqlab_f1(&p, &g, SeqMode::Entity).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let same = p.iter().zip(&g).all(|(a, b)| extract_spans(a) == extract_spans(b));
            prop_assert_eq!(v == 1.0, same);
            let t = seqlab_f1(&p, &g, SeqMode::TokenMacro).unwrap();
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert_eq!(seqlab_f1(&g, &g, SeqMode::TokenMacro).unwrap(), 1.0);
        }
    }
}
