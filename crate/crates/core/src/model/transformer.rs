//! BERT-style post-norm encoder used for the teacher and the pruned students.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::layers::{
    attention_params, attention_shapes, first_position, layer_norm, linear, linear_params, linear_shapes,
    norm_params, norm_shapes, self_attention,
};
use crate::model::{Batch, Bound, Init, Task, TransformerSpec};
use crate::tensor::{Float, Tensor};

pub(crate) fn parameter_shapes(s: &TransformerSpec) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (s.embed_dim, s.ffn());
    let mut out = vec![
        ("embeddings.token".to_string(), vec![s.vocab_size, h]),
        ("embeddings.position".to_string(), vec![s.max_len, h]),
    ];
    out.extend(norm_shapes("embeddings.norm", h));
    for i in 0..s.layers {
        out.extend(attention_shapes(&format!("layer{i}.attn"), h));
        out.extend(norm_shapes(&format!("layer{i}.attn_norm"), h));
        out.extend(linear_shapes(&format!("layer{i}.ffn.in"), h, f));
        out.extend(linear_shapes(&format!("layer{i}.ffn.out"), f, h));
        out.extend(norm_shapes(&format!("layer{i}.ffn_norm"), h));
    }
    out.extend(linear_shapes("head", h, s.num_classes));
    out
}

pub(crate) fn init_params(s: &TransformerSpec, init: &mut Init) -> Vec<(String, Tensor)> {
    let (h, f) = (s.embed_dim, s.ffn());
    let mut out = vec![
        ("embeddings.token".to_string(), init.embedding(s.vocab_size, h, 0.1)),
        ("embeddings.position".to_string(), init.normal(&[s.max_len, h], 0.02)),
    ];
    out.extend(norm_params("embeddings.norm", h));
    for i in 0..s.layers {
        out.extend(attention_params(init, &format!("layer{i}.attn"), h));
        out.extend(norm_params(&format!("layer{i}.attn_norm"), h));
        out.extend(linear_params(init, &format!("layer{i}.ffn.in"), h, f));
        out.extend(linear_params(init, &format!("layer{i}.ffn.out"), f, h));
        out.extend(norm_params(&format!("layer{i}.ffn_norm"), h));
    }
    out.extend(linear_params(init, "head", h, s.num_classes));
    out
}

pub(crate) fn forward<F: Float>(s: &TransformerSpec, tape: &mut Tape<F>, p: &Bound, batch: &Batch) -> Result<Var> {
    let (b, l) = (batch.batch, batch.len);
    let tok = tape.embedding(p.get("embeddings.token")?, &batch.ids, &[b, l])?;
    let positions: Vec<usize> = (0..l).collect();
    let pos = tape.embedding(p.get("embeddings.position")?, &positions, &[l])?;
    let x = tape.add(tok, pos)?;
    let x = layer_norm(tape, p, "embeddings.norm", x)?;
    let mut x = tape.dropout(x, s.dropout)?;
    for i in 0..s.layers {
        let a = self_attention(tape, p, &format!("layer{i}.attn"), x, s.attn_heads, batch, s.dropout)?;
        let a = tape.dropout(a, s.dropout)?;
        let r = tape.add(x, a)?;
        x = layer_norm(tape, p, &format!("layer{i}.attn_norm"), r)?;
        let f = linear(tape, p, &format!("layer{i}.ffn.in"), x)?;
        let f = tape.relu(f)?;
        let f = linear(tape, p, &format!("layer{i}.ffn.out"), f)?;
        let f = tape.dropout(f, s.dropout)?;
        let r = tape.add(x, f)?;
        x = layer_norm(tape, p, &format!("layer{i}.ffn_norm"), r)?;
    }
    match s.task {
        Task::Classification => {
            let cls = first_position(tape, x)?;
            linear(tape, p, "head", cls)
        }
        Task::SequenceLabeling => linear(tape, p, "head", x),
    }
}
