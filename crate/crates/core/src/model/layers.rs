use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{Batch, Bound, Init};
use crate::tensor::{Float, Tensor};

/// `x W + b` over the last axis.
pub(crate) fn linear<F: Float>(tape: &mut Tape<F>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub(crate) fn linear_params(init: &mut Init, prefix: &str, fan_in: usize, fan_out: usize) -> Vec<(String, Tensor)> {
    vec![
        (format!("{prefix}.weight"), init.xavier(&[fan_in, fan_out])),
        (format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
    ]
}

pub(crate) fn linear_shapes(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.weight"), vec![fan_in, fan_out]),
        (format!("{prefix}.bias"), vec![fan_out]),
    ]
}

pub(crate) fn norm_params(prefix: &str, dim: usize) -> Vec<(String, Tensor)> {
    vec![
        (format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0)),
        (format!("{prefix}.beta"), Tensor::zeros(&[dim])),
    ]
}

pub(crate) fn norm_shapes(prefix: &str, dim: usize) -> Vec<(String, Vec<usize>)> {
    vec![(format!("{prefix}.gamma"), vec![dim]), (format!("{prefix}.beta"), vec![dim])]
}

pub(crate) fn layer_norm<F: Float>(tape: &mut Tape<F>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, super::LAYER_NORM_EPS)
}

pub(crate) const ATTENTION_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

pub(crate) fn attention_params(init: &mut Init, prefix: &str, dim: usize) -> Vec<(String, Tensor)> {
    ATTENTION_PROJECTIONS
        .iter()
        .flat_map(|p| linear_params(init, &format!("{prefix}.{p}"), dim, dim))
        .collect()
}

pub(crate) fn attention_shapes(prefix: &str, dim: usize) -> Vec<(String, Vec<usize>)> {
    ATTENTION_PROJECTIONS
        .iter()
        .flat_map(|p| linear_shapes(&format!("{prefix}.{p}"), dim, dim))
        .collect()
}

/// Multi-head scaled dot-product self-attention over `x [B, L, D]`.
/// Padded keys receive an additive -1e9 before the softmax.
pub(crate) fn self_attention<F: Float>(
    tape: &mut Tape<F>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    batch: &Batch,
    dropout: f32,
) -> Result<Var> {
    let (b, l) = (batch.batch, batch.len);
    let d = tape.shape(x)[2];
    let dh = d / heads;
    let split = |tape: &mut Tape<F>, name: &str| -> Result<Var> {
        let y = linear(tape, p, &format!("{prefix}.{name}"), x)?;
        let y = tape.reshape(y, &[b, l, heads, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * heads, l, dh])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scalar_mul(scores, F::one() / F::from_usize(dh).unwrap().sqrt())?;
    let scores = if batch.has_padding() {
        let scores = tape.reshape(scores, &[b, heads, l, l])?;
        let bias = tape.constant(batch.attention_bias());
        let masked = tape.add(scores, bias)?;
        tape.reshape(masked, &[b * heads, l, l])?
    } else {
        scores
    };
    let probs = tape.softmax(scores)?;
    let probs = tape.dropout(probs, dropout)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.reshape(ctx, &[b, heads, l, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, l, d])?;
    linear(tape, p, &format!("{prefix}.o"), ctx)
}

/// Position-0 vector of every sequence: `[B, L, D] -> [B, D]`.
pub(crate) fn first_position<F: Float>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let first = tape.slice(x, 1, 0, 1)?;
    tape.reshape(first, &[s[0], s[2]])
}
