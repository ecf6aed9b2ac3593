use serde::{Deserialize, Serialize};

use super::LossMode;
use crate::autodiff::{check_temperature, log_softmax_in_place, softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Float, Tensor};

/// Teacher output for one input: logits `[C]` (classification) or
/// `[L, C]` (one row per token).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub hard_labels: Vec<usize>,
    pub num_classes: usize,
}

impl SoftTarget {
    pub fn from_logits(logits: Vec<f32>, num_classes: usize) -> Result<SoftTarget> {
        if num_classes == 0 || logits.is_empty() || !logits.len().is_multiple_of(num_classes) {
            return Err(Error::dim(
                "soft_target",
                format!("{} logits for {num_classes} classes", logits.len()),
            ));
        }
        let mut probs = logits.clone();
        probs.chunks_mut(num_classes).for_each(softmax_in_place);
        let hard_labels = logits.chunks(num_classes).map(argmax).collect();
        Ok(SoftTarget {
            logits,
            probs,
            hard_labels,
            num_classes,
        })
    }

    /// Number of rows (1 for classification, tokens for labeling).
    pub fn rows(&self) -> usize {
        self.logits.len() / self.num_classes
    }

    pub fn hard_label(&self) -> usize {
        self.hard_labels[0]
    }
}

/// Row mask for logits shaped `[.., C]`: `None` means every row counts.
fn row_mask(rows: usize, mask: Option<&[bool]>) -> Result<Vec<bool>> {
    match mask {
        None => Ok(vec![true; rows]),
        Some(m) if m.len() == rows => Ok(m.to_vec()),
        Some(m) => Err(Error::dim("distill_loss", format!("mask of {} for {rows} rows", m.len()))),
    }
}

fn counted(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Contract("loss over zero non-pad positions".into()));
    }
    Ok(n)
}

fn mask_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-empty shape") = 1;
    s
}

/// Mean negative log-likelihood of `labels` (one per row) over unmasked rows.
pub fn cross_entropy<F: Float>(tape: &mut Tape<F>, logits: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let c = *shape.last().expect("non-empty shape");
    let rows = tape.value(logits).numel() / c;
    if labels.len() != rows {
        return Err(Error::dim("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
    }
    let mask = row_mask(rows, mask)?;
    let n = counted(&mask)?;
    let mut onehot = vec![F::zero(); rows * c];
    for (r, (&l, &m)) in labels.iter().zip(&mask).enumerate() {
        if m {
            if l >= c {
                return Err(Error::Contract(format!("label {l} ≥ {c} classes")));
            }
            onehot[r * c + l] = F::one();
        }
    }
    let lq = tape.log_softmax(logits)?;
    let target = tape.constant(Tensor::from_parts(shape, onehot));
    let picked = tape.mul(lq, target)?;
    let total = tape.sum(picked)?;
    tape.scalar_mul(total, -F::one() / F::from_usize(n).unwrap())
}

/// Distillation loss of `student` logits against `teacher` logits of the
/// same shape `[.., C]`. `mask` (one flag per row) drops padded rows.
///
/// * `mse`: mean squared logit difference over unmasked elements; `T` is unused.
/// * `kld`: mean over rows of `KL(softmax(t/T) ‖ softmax(s/T))`.
/// * `hard`: cross-entropy against the teacher's argmax.
pub fn distill_loss_on_tape<F: Float>(
    tape: &mut Tape<F>,
    student: Var,
    teacher: &Tensor<F>,
    mode: LossMode,
    temperature: f32,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    if shape != teacher.shape() {
        return Err(Error::dim(
            "distill_loss",
            format!("student {shape:?} vs teacher {:?}", teacher.shape()),
        ));
    }
    check_temperature(temperature)?;
    let c = *shape.last().expect("non-empty shape");
    let rows = teacher.numel() / c;
    let mask = row_mask(rows, mask)?;
    let n = counted(&mask)?;
    match mode {
        LossMode::Mse => {
            let t = tape.constant(teacher.clone());
            let diff = tape.sub(student, t)?;
            let mut sq = tape.mul(diff, diff)?;
            if mask.iter().any(|m| !m) {
                let m = tape.constant(Tensor::from_parts(
                    mask_shape(&shape),
                    mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect(),
                ));
                sq = tape.mul(sq, m)?;
            }
            let total = tape.sum(sq)?;
            tape.scalar_mul(total, F::one() / F::from_usize(n * c).unwrap())
        }
        LossMode::Kld => {
            let t_inv = F::one() / F::of_f32(temperature);
            let mut p = teacher.data().iter().map(|&x| x * t_inv).collect::<Vec<F>>();
            let mut log_p = p.clone();
            p.chunks_mut(c).for_each(softmax_in_place);
            log_p.chunks_mut(c).for_each(log_softmax_in_place);
            let mut entropy_term = F::zero();
            for (r, &m) in mask.iter().enumerate() {
                for j in r * c..(r + 1) * c {
                    if !m {
                        p[j] = F::zero();
                    } else if p[j] > F::zero() {
                        entropy_term += p[j] * log_p[j];
                    }
                }
            }
            let lq = tape.log_softmax_with_temperature(student, temperature)?;
            let w = tape.constant(Tensor::from_parts(shape, p));
            let cross = tape.mul(lq, w)?;
            let cross = tape.sum(cross)?;
            let inv_n = F::one() / F::from_usize(n).unwrap();
            let neg = tape.scalar_mul(cross, -inv_n)?;
            let ent = tape.constant(Tensor::scalar(entropy_term * inv_n));
            tape.add(neg, ent)
        }
        LossMode::Hard => {
            let labels: Vec<usize> = teacher.data().chunks(c).map(argmax).collect();
            cross_entropy(tape, student, &labels, Some(&mask))
        }
    }
}

/// Value of [`distill_loss_on_tape`] for plain tensors.
pub fn distill_loss(
    student: &Tensor,
    teacher: &Tensor,
    mode: LossMode,
    temperature: f32,
    mask: Option<&[bool]>,
) -> Result<f32> {
    let mut tape = Tape::<f32>::new(0);
    let s = tape.constant(student.clone());
    let loss = distill_loss_on_tape(&mut tape, s, teacher, mode, temperature, mask)?;
    tape.value(loss).item()
}
