//! Stacked bidirectional LSTM with one self-attention layer on top.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::layers::{attention_params, attention_shapes, first_position, linear, linear_params, linear_shapes, self_attention};
use crate::model::{BiLstmSpec, Batch, Bound, Init, Task};
use crate::tensor::{Float, Tensor};

pub(crate) const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

fn layer_input(s: &BiLstmSpec, layer: usize) -> usize {
    if layer == 0 {
        s.embed_dim
    } else {
        2 * s.hidden_dim
    }
}

pub(crate) fn parameter_shapes(s: &BiLstmSpec) -> Vec<(String, Vec<usize>)> {
    let h = s.hidden_dim;
    let mut out = vec![("embeddings.token".to_string(), vec![s.vocab_size, s.embed_dim])];
    for l in 0..s.lstm_layers {
        for dir in DIRECTIONS {
            out.push((format!("lstm{l}.{dir}.w_ih"), vec![layer_input(s, l), 4 * h]));
            out.push((format!("lstm{l}.{dir}.w_hh"), vec![h, 4 * h]));
            out.push((format!("lstm{l}.{dir}.bias"), vec![4 * h]));
        }
    }
    out.extend(attention_shapes("attn", 2 * h));
    out.extend(linear_shapes("head", 2 * h, s.num_classes));
    out
}

pub(crate) fn init_params(s: &BiLstmSpec, init: &mut Init) -> Vec<(String, Tensor)> {
    let h = s.hidden_dim;
    let bound = 1.0 / (h as f32).sqrt();
    let mut out = vec![("embeddings.token".to_string(), init.embedding(s.vocab_size, s.embed_dim, 0.1))];
    for l in 0..s.lstm_layers {
        for dir in DIRECTIONS {
            out.push((format!("lstm{l}.{dir}.w_ih"), init.uniform(&[layer_input(s, l), 4 * h], bound)));
            out.push((format!("lstm{l}.{dir}.w_hh"), init.uniform(&[h, 4 * h], bound)));
            // gate order i, f, g, o; forget gate starts open
            let mut bias = Tensor::zeros(&[4 * h]);
            bias.data_mut()[h..2 * h].fill(1.0);
            out.push((format!("lstm{l}.{dir}.bias"), bias));
        }
    }
    out.extend(attention_params(init, "attn", 2 * h));
    out.extend(linear_params(init, "head", 2 * h, s.num_classes));
    out
}

/// One LSTM direction over `x [B, L, In]`, returning `[B, L, H]`.
/// At padded steps the state is carried through unchanged, so real
/// positions never see padding in either direction.
pub(crate) fn run_direction<F: Float>(
    tape: &mut Tape<F>,
    p: &Bound,
    prefix: &str,
    x: Var,
    hidden: usize,
    batch: &Batch,
    reverse: bool,
) -> Result<Var> {
    let (b, l, h) = (batch.batch, batch.len, hidden);
    let w_ih = p.get(&format!("{prefix}.w_ih"))?;
    let w_hh = p.get(&format!("{prefix}.w_hh"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w_ih)?;
    let xw = tape.add(xw, bias)?;

    let mut state_h = tape.constant(Tensor::zeros(&[b, h]));
    let mut state_c = tape.constant(Tensor::zeros(&[b, h]));
    let mut outputs = vec![None; l];
    let steps: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
    for t in steps {
        let xt = tape.slice(xw, 1, t, t + 1)?;
        let xt = tape.reshape(xt, &[b, 4 * h])?;
        let hw = tape.matmul(state_h, w_hh)?;
        let gates = tape.add(xt, hw)?;
        let i = tape.slice(gates, 1, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(gates, 1, h, 2 * h)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice(gates, 1, 2 * h, 3 * h)?;
        let g = tape.tanh(g)?;
        let o = tape.slice(gates, 1, 3 * h, 4 * h)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, state_c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;

        let column: Vec<bool> = (0..b).map(|bi| batch.mask[bi * l + t]).collect();
        if column.iter().all(|&m| m) {
            state_h = h_new;
            state_c = c_new;
        } else {
            let keep: Vec<F> = column.iter().map(|&m| if m { F::one() } else { F::zero() }).collect();
            let drop = keep.iter().map(|&k| F::one() - k).collect();
            let keep = tape.constant(Tensor::from_parts(vec![b, 1], keep));
            let drop = tape.constant(Tensor::from_parts(vec![b, 1], drop));
            state_h = blend(tape, keep, drop, h_new, state_h)?;
            state_c = blend(tape, keep, drop, c_new, state_c)?;
        }
        outputs[t] = Some(tape.reshape(state_h, &[b, 1, h])?);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    tape.concat(&outputs, 1)
}

/// `new * keep + old * drop` with 0/1 masks, exact for both choices.
fn blend<F: Float>(tape: &mut Tape<F>, keep: Var, drop: Var, new: Var, old: Var) -> Result<Var> {
    let a = tape.mul(new, keep)?;
    let b = tape.mul(old, drop)?;
    tape.add(a, b)
}

pub(crate) fn forward<F: Float>(s: &BiLstmSpec, tape: &mut Tape<F>, p: &Bound, batch: &Batch) -> Result<Var> {
    let (b, l) = (batch.batch, batch.len);
    let mut x = tape.embedding(p.get("embeddings.token")?, &batch.ids, &[b, l])?;
    x = tape.dropout(x, s.dropout)?;
    for layer in 0..s.lstm_layers {
        let fwd = run_direction(tape, p, &format!("lstm{layer}.fwd"), x, s.hidden_dim, batch, false)?;
        let bwd = run_direction(tape, p, &format!("lstm{layer}.bwd"), x, s.hidden_dim, batch, true)?;
        x = tape.concat(&[fwd, bwd], 2)?;
        x = tape.dropout(x, s.dropout)?;
    }
    let attended = self_attention(tape, p, "attn", x, s.attn_heads, batch, s.dropout)?;
    let y = tape.add(x, attended)?;
    match s.task {
        Task::Classification => {
            let first = first_position(tape, y)?;
            linear(tape, p, "head", first)
        }
        Task::SequenceLabeling => linear(tape, p, "head", y),
    }
}
