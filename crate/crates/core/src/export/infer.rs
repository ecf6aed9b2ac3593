//! Single-sentence forward passes on plain buffers: no tape, no gradient
//! storage, all intermediates in a reusable [`Scratch`].

use crate::autodiff::{sigmoid, softmax_in_place};
use crate::error::{Error, Result};
use crate::model::{sinusoidal_encoding, Model, ModelSpec, Task, LAYER_NORM_EPS};
use crate::tensor::Tensor;

struct Linear {
    w: Vec<f32>,
    b: Vec<f32>,
    fan_in: usize,
    fan_out: usize,
}

struct Norm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

struct EncoderLayer {
    attn: Attention,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

struct LstmDirection {
    w_ih: Linear,
    w_hh: Vec<f32>,
}

struct ConvBlock {
    dw_w: Vec<f32>,
    dw_b: Vec<f32>,
    kernel: usize,
    pointwise: Linear,
    norm: Norm,
}

enum Body {
    Transformer {
        position: Vec<f32>,
        norm: Norm,
        layers: Vec<EncoderLayer>,
    },
    Bilstm {
        hidden: usize,
        layers: Vec<[LstmDirection; 2]>,
        attn: Attention,
    },
    Cnn {
        position: Vec<f32>,
        blocks: Vec<ConvBlock>,
    },
}

/// Immutable inference weights. Safe to share; every caller brings its
/// own [`Scratch`].
pub struct FrozenNet {
    spec: ModelSpec,
    token: Vec<f32>,
    body: Body,
    head: Linear,
}

/// Preallocated intermediates sized for the model's `max_len`.
pub struct Scratch {
    x: Vec<f32>,
    y: Vec<f32>,
    z: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    ctx: Vec<f32>,
    scores: Vec<f32>,
    wide: Vec<f32>,
    state: Vec<f32>,
    logits: Vec<f32>,
}

struct Weights<'a>(&'a Model);

impl Weights<'_> {
    fn get(&self, name: &str) -> Result<Vec<f32>> {
        self.0
            .params()
            .get(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        let t = self
            .0
            .params()
            .get(&format!("{prefix}.weight"))
            .ok_or_else(|| Error::Contract(format!("missing parameter `{prefix}.weight`")))?;
        Ok(Linear {
            w: t.data().to_vec(),
            b: self.get(&format!("{prefix}.bias"))?,
            fan_in: t.shape()[0],
            fan_out: t.shape()[1],
        })
    }

    fn norm(&self, prefix: &str) -> Result<Norm> {
        Ok(Norm {
            gamma: self.get(&format!("{prefix}.gamma"))?,
            beta: self.get(&format!("{prefix}.beta"))?,
        })
    }

    fn attention(&self, prefix: &str, heads: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{prefix}.q"))?,
            k: self.linear(&format!("{prefix}.k"))?,
            v: self.linear(&format!("{prefix}.v"))?,
            o: self.linear(&format!("{prefix}.o"))?,
            heads,
        })
    }
}

impl FrozenNet {
    pub fn new(model: &Model) -> Result<Self> {
        let w = Weights(model);
        let spec = model.spec().clone();
        let body = match &spec {
            ModelSpec::Transformer(s) => Body::Transformer {
                position: w.get("embeddings.position")?,
                norm: w.norm("embeddings.norm")?,
                layers: (0..s.layers)
                    .map(|i| {
                        Ok(EncoderLayer {
                            attn: w.attention(&format!("layer{i}.attn"), s.attn_heads)?,
                            attn_norm: w.norm(&format!("layer{i}.attn_norm"))?,
                            ffn_in: w.linear(&format!("layer{i}.ffn.in"))?,
                            ffn_out: w.linear(&format!("layer{i}.ffn.out"))?,
                            ffn_norm: w.norm(&format!("layer{i}.ffn_norm"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            ModelSpec::Bilstm(s) => {
                let dir = |l: usize, d: &str| -> Result<LstmDirection> {
                    let p = format!("lstm{l}.{d}");
                    let w_ih = model
                        .params()
                        .get(&format!("{p}.w_ih"))
                        .ok_or_else(|| Error::Contract(format!("missing parameter `{p}.w_ih`")))?;
                    Ok(LstmDirection {
                        w_ih: Linear {
                            w: w_ih.data().to_vec(),
                            b: w.get(&format!("{p}.bias"))?,
                            fan_in: w_ih.shape()[0],
                            fan_out: w_ih.shape()[1],
                        },
                        w_hh: w.get(&format!("{p}.w_hh"))?,
                    })
                };
                Body::Bilstm {
                    hidden: s.hidden_dim,
                    layers: (0..s.lstm_layers)
                        .map(|l| Ok([dir(l, "fwd")?, dir(l, "bwd")?]))
                        .collect::<Result<_>>()?,
                    attn: w.attention("attn", s.attn_heads)?,
                }
            }
            ModelSpec::Cnn(s) => Body::Cnn {
                position: sinusoidal_encoding::<f32>(s.max_len, s.embed_dim).into_data(),
                blocks: (0..s.n_blocks)
                    .map(|i| {
                        Ok(ConvBlock {
                            dw_w: w.get(&format!("block{i}.depthwise.weight"))?,
                            dw_b: w.get(&format!("block{i}.depthwise.bias"))?,
                            kernel: s.kernel_size,
                            pointwise: w.linear(&format!("block{i}.pointwise"))?,
                            norm: w.norm(&format!("block{i}.norm"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
        };
        Ok(FrozenNet {
            token: w.get("embeddings.token")?,
            head: w.linear("head")?,
            spec,
            body,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Buffers large enough for any input up to `max_len`.
    pub fn scratch(&self) -> Scratch {
        let l = self.spec.max_len();
        let (width, wide) = match &self.spec {
            ModelSpec::Transformer(s) => (s.embed_dim, s.ffn()),
            ModelSpec::Bilstm(s) => (s.embed_dim.max(2 * s.hidden_dim), 4 * s.hidden_dim),
            ModelSpec::Cnn(s) => (s.embed_dim, s.embed_dim),
        };
        let buf = |n: usize| vec![0.0f32; n];
        Scratch {
            x: buf(l * width),
            y: buf(l * width),
            z: buf(l * width),
            q: buf(l * width),
            k: buf(l * width),
            v: buf(l * width),
            ctx: buf(l * width),
            scores: buf(l),
            wide: buf(l * wide),
            state: buf(6 * width.max(wide)),
            logits: buf(l * self.spec.num_classes()),
        }
    }

    /// Logits for one id sequence (already including `[CLS]` for
    /// classification): `C` values, or `L * C` for sequence labeling.
    pub fn infer<'s>(&self, ids: &[usize], s: &'s mut Scratch) -> Result<&'s [f32]> {
        let l = ids.len();
        if l == 0 {
            return Err(Error::Contract("empty input".into()));
        }
        if l > self.spec.max_len() {
            return Err(Error::Contract(format!(
                "input length {l} exceeds max_len {}",
                self.spec.max_len()
            )));
        }
        let vocab = self.spec.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let e = self.spec.embed_dim();
        for (t, &id) in ids.iter().enumerate() {
            s.x[t * e..(t + 1) * e].copy_from_slice(&self.token[id * e..(id + 1) * e]);
        }
        let width = match &self.body {
            Body::Transformer { position, norm, layers } => {
                add_in_place(&mut s.x[..l * e], &position[..l * e]);
                layer_norm(&mut s.x[..l * e], norm);
                for layer in layers {
                    attention(&layer.attn, l, s);
                    add_in_place(&mut s.x[..l * e], &s.y[..l * e]);
                    layer_norm(&mut s.x[..l * e], &layer.attn_norm);
                    linear(&s.x, l, &layer.ffn_in, &mut s.wide);
                    s.wide[..l * layer.ffn_in.fan_out].iter_mut().for_each(|v| *v = v.max(0.0));
                    linear(&s.wide, l, &layer.ffn_out, &mut s.y);
                    add_in_place(&mut s.x[..l * e], &s.y[..l * e]);
                    layer_norm(&mut s.x[..l * e], &layer.ffn_norm);
                }
                e
            }
            Body::Bilstm { hidden, layers, attn } => {
                let h = *hidden;
                for dirs in layers {
                    for (d, dir) in dirs.iter().enumerate() {
                        lstm_direction(dir, h, l, d == 1, d * h, s);
                    }
                    std::mem::swap(&mut s.x, &mut s.z);
                }
                attention(attn, l, s);
                add_in_place(&mut s.x[..l * 2 * h], &s.y[..l * 2 * h]);
                2 * h
            }
            Body::Cnn { position, blocks } => {
                add_in_place(&mut s.x[..l * e], &position[..l * e]);
                for b in blocks {
                    depthwise(&s.x, l, e, b, &mut s.z);
                    linear(&s.z, l, &b.pointwise, &mut s.y);
                    let y = &mut s.y[..l * e];
                    layer_norm(y, &b.norm);
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                    add_in_place(&mut s.x[..l * e], &s.y[..l * e]);
                }
                e
            }
        };
        let c = self.head.fan_out;
        match self.spec.task() {
            Task::Classification => {
                let first = match self.body {
                    Body::Cnn { .. } => {
                        let pooled = &mut s.state[..e];
                        pooled.fill(0.0);
                        let w = 1.0 / l as f32;
                        for t in 0..l {
                            for (p, &v) in pooled.iter_mut().zip(&s.x[t * e..(t + 1) * e]) {
                                *p += w * v;
                            }
                        }
                        &s.state[..e]
                    }
                    _ => &s.x[..width],
                };
                linear(first, 1, &self.head, &mut s.logits);
                Ok(&s.logits[..c])
            }
            Task::SequenceLabeling => {
                linear(&s.x, l, &self.head, &mut s.logits);
                Ok(&s.logits[..l * c])
            }
        }
    }

    /// Allocating convenience shaped like [`Model::predict`] on one
    /// sequence: `[1, C]` or `[1, L, C]`.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut s = self.scratch();
        let out = self.infer(ids, &mut s)?.to_vec();
        let c = self.head.fan_out;
        let shape = match self.spec.task() {
            Task::Classification => vec![1, c],
            Task::SequenceLabeling => vec![1, ids.len(), c],
        };
        Tensor::new(shape, out)
    }
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// `out[..rows * n] = x[..rows * k] W + b`.
fn linear(x: &[f32], rows: usize, lin: &Linear, out: &mut [f32]) {
    let (k, n) = (lin.fan_in, lin.fan_out);
    for i in 0..rows {
        let o = &mut out[i * n..(i + 1) * n];
        o.copy_from_slice(&lin.b);
        for (p, &a) in x[i * k..(i + 1) * k].iter().enumerate() {
            for (acc, &w) in o.iter_mut().zip(&lin.w[p * n..(p + 1) * n]) {
                *acc += a * w;
            }
        }
    }
}

fn layer_norm(x: &mut [f32], norm: &Norm) {
    let d = norm.gamma.len();
    let inv_d = 1.0 / d as f32;
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f32>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() * inv_d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * is * norm.gamma[j] + norm.beta[j];
        }
    }
}

/// Self-attention over `s.x[..l * d]`, result in `s.y`.
fn attention(a: &Attention, l: usize, s: &mut Scratch) {
    let d = a.q.fan_in;
    let dh = d / a.heads;
    linear(&s.x, l, &a.q, &mut s.q);
    linear(&s.x, l, &a.k, &mut s.k);
    linear(&s.x, l, &a.v, &mut s.v);
    let scale = 1.0 / (dh as f32).sqrt();
    for h in 0..a.heads {
        let off = h * dh;
        for i in 0..l {
            let qi = &s.q[i * d + off..i * d + off + dh];
            let scores = &mut s.scores[..l];
            for (j, sc) in scores.iter_mut().enumerate() {
                let kj = &s.k[j * d + off..j * d + off + dh];
                *sc = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f32>() * scale;
            }
            softmax_in_place(scores);
            let ci = &mut s.ctx[i * d + off..i * d + off + dh];
            ci.fill(0.0);
            for (j, &p) in scores.iter().enumerate() {
                for (c, &v) in ci.iter_mut().zip(&s.v[j * d + off..j * d + off + dh]) {
                    *c += p * v;
                }
            }
        }
    }
    linear(&s.ctx, l, &a.o, &mut s.y);
}

/// One LSTM direction reading `s.x`, writing hidden states into columns
/// `col..col + h` of `s.z` (row width `2h`).
fn lstm_direction(dir: &LstmDirection, h: usize, l: usize, reverse: bool, col: usize, s: &mut Scratch) {
    linear(&s.x, l, &dir.w_ih, &mut s.wide);
    let (state, rest) = s.state.split_at_mut(2 * h);
    let (hs, cs) = state.split_at_mut(h);
    let gates = &mut rest[..4 * h];
    hs.fill(0.0);
    cs.fill(0.0);
    for step in 0..l {
        let t = if reverse { l - 1 - step } else { step };
        gates.copy_from_slice(&s.wide[t * 4 * h..(t + 1) * 4 * h]);
        for (p, &a) in hs.iter().enumerate() {
            for (g, &w) in gates.iter_mut().zip(&dir.w_hh[p * 4 * h..(p + 1) * 4 * h]) {
                *g += a * w;
            }
        }
        for j in 0..h {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[h + j]);
            let g = gates[2 * h + j].tanh();
            let o = sigmoid(gates[3 * h + j]);
            cs[j] = f * cs[j] + i * g;
            hs[j] = o * cs[j].tanh();
        }
        s.z[t * 2 * h + col..t * 2 * h + col + h].copy_from_slice(hs);
    }
}

/// Same-padded depthwise convolution of `x [l, ch]` into `out`.
fn depthwise(x: &[f32], l: usize, ch: usize, b: &ConvBlock, out: &mut [f32]) {
    let half = (b.kernel / 2) as isize;
    for t in 0..l {
        let o = &mut out[t * ch..(t + 1) * ch];
        o.copy_from_slice(&b.dw_b);
        for j in 0..b.kernel {
            let src = t as isize + j as isize - half;
            if src < 0 || src >= l as isize {
                continue;
            }
            let xi = &x[src as usize * ch..(src as usize + 1) * ch];
            for c in 0..ch {
                o[c] += b.dw_w[c * b.kernel + j] * xi[c];
            }
        }
    }
}
