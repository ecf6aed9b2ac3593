//! Residual depthwise-separable convolution encoder.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::layers::{layer_norm, linear, linear_params, linear_shapes, norm_params, norm_shapes};
use crate::model::{Batch, Bound, CnnSpec, Init, Task};
use crate::tensor::{Float, Tensor};

/// Absolute sinusoidal position table `[len, dim]`.
pub fn sinusoidal_encoding<F: Float>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64_lossy(v));
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

pub(crate) fn parameter_shapes(s: &CnnSpec) -> Vec<(String, Vec<usize>)> {
    let e = s.embed_dim;
    let mut out = vec![("embeddings.token".to_string(), vec![s.vocab_size, e])];
    for i in 0..s.n_blocks {
        out.push((format!("block{i}.depthwise.weight"), vec![e, s.kernel_size]));
        out.push((format!("block{i}.depthwise.bias"), vec![e]));
        out.extend(linear_shapes(&format!("block{i}.pointwise"), e, e));
        out.extend(norm_shapes(&format!("block{i}.norm"), e));
    }
    out.extend(linear_shapes("head", e, s.num_classes));
    out
}

pub(crate) fn init_params(s: &CnnSpec, init: &mut Init) -> Vec<(String, Tensor)> {
    let e = s.embed_dim;
    let mut out = vec![("embeddings.token".to_string(), init.embedding(s.vocab_size, e, 0.1))];
    for i in 0..s.n_blocks {
        let bound = 1.0 / (s.kernel_size as f32).sqrt();
        out.push((format!("block{i}.depthwise.weight"), init.uniform(&[e, s.kernel_size], bound)));
        out.push((format!("block{i}.depthwise.bias"), Tensor::zeros(&[e])));
        out.extend(linear_params(init, &format!("block{i}.pointwise"), e, e));
        out.extend(norm_params(&format!("block{i}.norm"), e));
    }
    out.extend(linear_params(init, "head", e, s.num_classes));
    out
}

pub(crate) fn forward<F: Float>(s: &CnnSpec, tape: &mut Tape<F>, p: &Bound, batch: &Batch) -> Result<Var> {
    let (b, l) = (batch.batch, batch.len);
    let tok = tape.embedding(p.get("embeddings.token")?, &batch.ids, &[b, l])?;
    let pe = tape.constant(sinusoidal_encoding(l, s.embed_dim));
    let x = tape.add(tok, pe)?;
    // padded positions are held at zero so the convolutions see the same
    // zero padding whatever the batch length
    let keep = batch.has_padding().then(|| tape.constant(batch.mask_column()));
    let mut x = match keep {
        Some(k) => tape.mul(x, k)?,
        None => x,
    };
    x = tape.dropout(x, s.dropout)?;
    for i in 0..s.n_blocks {
        let w = p.get(&format!("block{i}.depthwise.weight"))?;
        let bias = p.get(&format!("block{i}.depthwise.bias"))?;
        let y = tape.conv1d_depthwise(x, w, bias)?;
        let pw = p.get(&format!("block{i}.pointwise.weight"))?;
        let pb = p.get(&format!("block{i}.pointwise.bias"))?;
        let y = tape.conv1d_pointwise(y, pw, pb)?;
        let y = layer_norm(tape, p, &format!("block{i}.norm"), y)?;
        let y = tape.relu(y)?;
        let y = tape.dropout(y, s.dropout)?;
        x = tape.add(x, y)?;
        if let Some(k) = keep {
            x = tape.mul(x, k)?;
        }
    }
    match s.task {
        Task::Classification => {
            let pooled = tape.mean_pool(x, Some(&batch.mask))?;
            linear(tape, p, "head", pooled)
        }
        Task::SequenceLabeling => linear(tape, p, "head", x),
    }
}
