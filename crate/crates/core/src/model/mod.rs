//! Teacher and student architectures.
//!
//! A [`Model`] is its [`ModelSpec`] plus an ordered, named parameter set.
//! Forward passes are generic over the tape's element type so the same
//! code serves training (`f32`) and gradient checking (`f64`).

mod bilstm;
mod cnn;
mod layers;
mod transformer;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use cnn::sinusoidal_encoding;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub(crate) const LAYER_NORM_EPS: f32 = 1e-5;
pub(crate) const ATTENTION_MASK_VALUE: f32 = -1e9;

fn default_dropout() -> f32 {
    0.1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    SequenceLabeling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub attn_heads: usize,
    pub layers: usize,
    pub embed_dim: usize,
    /// Defaults to `4 * embed_dim` when omitted from a config.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub max_len: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

impl TransformerSpec {
    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.embed_dim)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.attn_heads,
            self.layers,
            self.embed_dim,
            self.vocab_size,
            self.max_len,
            self.num_classes,
        ];
        if positive.contains(&0) || self.ffn() == 0 {
            return Err(Error::Parameter(format!("transformer spec has a zero size: {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::Parameter(format!(
                "embed_dim {} not divisible by attn_heads {}",
                self.embed_dim, self.attn_heads
            )));
        }
        if self.ffn() < self.embed_dim {
            return Err(Error::Parameter(format!(
                "ffn_dim {} smaller than embed_dim {}",
                self.ffn(),
                self.embed_dim
            )));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiLstmSpec {
    pub embed_dim: usize,
    /// Hidden size of each direction.
    pub hidden_dim: usize,
    pub lstm_layers: usize,
    #[serde(default = "one")]
    pub attn_heads: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub max_len: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn one() -> usize {
    1
}

impl BiLstmSpec {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.embed_dim,
            self.hidden_dim,
            self.lstm_layers,
            self.attn_heads,
            self.vocab_size,
            self.max_len,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Parameter(format!("bilstm spec has a zero size: {self:?}")));
        }
        if !(2 * self.hidden_dim).is_multiple_of(self.attn_heads) {
            return Err(Error::Parameter(format!(
                "attention width {} not divisible by attn_heads {}",
                2 * self.hidden_dim,
                self.attn_heads
            )));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub max_len: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

impl CnnSpec {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.embed_dim,
            self.n_blocks,
            self.kernel_size,
            self.vocab_size,
            self.max_len,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Parameter(format!("cnn spec has a zero size: {self:?}")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        check_dropout(self.dropout)
    }
}

fn check_dropout(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout {rate} not in [0, 1)")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Transformer(TransformerSpec),
    Bilstm(BiLstmSpec),
    Cnn(CnnSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Transformer(s) => s.validate(),
            ModelSpec::Bilstm(s) => s.validate(),
            ModelSpec::Cnn(s) => s.validate(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Transformer(_) => "transformer",
            ModelSpec::Bilstm(_) => "bilstm",
            ModelSpec::Cnn(_) => "cnn",
        }
    }

    pub fn task(&self) -> Task {
        match self {
            ModelSpec::Transformer(s) => s.task,
            ModelSpec::Bilstm(s) => s.task,
            ModelSpec::Cnn(s) => s.task,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Transformer(s) => s.num_classes,
            ModelSpec::Bilstm(s) => s.num_classes,
            ModelSpec::Cnn(s) => s.num_classes,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelSpec::Transformer(s) => s.vocab_size,
            ModelSpec::Bilstm(s) => s.vocab_size,
            ModelSpec::Cnn(s) => s.vocab_size,
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            ModelSpec::Transformer(s) => s.max_len,
            ModelSpec::Bilstm(s) => s.max_len,
            ModelSpec::Cnn(s) => s.max_len,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            ModelSpec::Transformer(s) => s.embed_dim,
            ModelSpec::Bilstm(s) => s.embed_dim,
            ModelSpec::Cnn(s) => s.embed_dim,
        }
    }

    pub fn dropout(&self) -> f32 {
        match self {
            ModelSpec::Transformer(s) => s.dropout,
            ModelSpec::Bilstm(s) => s.dropout,
            ModelSpec::Cnn(s) => s.dropout,
        }
    }

    /// Replace the vocabulary and label-set sizes, keeping the architecture.
    pub fn with_io(mut self, vocab_size: usize, num_classes: usize, task: Task) -> Self {
        match &mut self {
            ModelSpec::Transformer(s) => {
                s.vocab_size = vocab_size;
                s.num_classes = num_classes;
                s.task = task;
            }
            ModelSpec::Bilstm(s) => {
                s.vocab_size = vocab_size;
                s.num_classes = num_classes;
                s.task = task;
            }
            ModelSpec::Cnn(s) => {
                s.vocab_size = vocab_size;
                s.num_classes = num_classes;
                s.task = task;
            }
        }
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        match &mut self {
            ModelSpec::Transformer(s) => s.max_len = max_len,
            ModelSpec::Bilstm(s) => s.max_len = max_len,
            ModelSpec::Cnn(s) => s.max_len = max_len,
        }
        self
    }

    /// Ordered `(name, shape)` list of every parameter the spec instantiates.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            ModelSpec::Transformer(s) => transformer::parameter_shapes(s),
            ModelSpec::Bilstm(s) => bilstm::parameter_shapes(s),
            ModelSpec::Cnn(s) => cnn::parameter_shapes(s),
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        match self {
            ModelSpec::Transformer(s) => {
                let (h, f, c) = (s.embed_dim, s.ffn(), s.num_classes);
                let embeddings = (s.vocab_size + s.max_len) * h + 2 * h;
                let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
                embeddings + s.layers * layer + h * c + c
            }
            ModelSpec::Bilstm(s) => {
                let (e, h, c) = (s.embed_dim, s.hidden_dim, s.num_classes);
                let first = 2 * 4 * h * (e + h + 1);
                let rest = (s.lstm_layers - 1) * 2 * 4 * h * (2 * h + h + 1);
                let d = 2 * h;
                s.vocab_size * e + first + rest + 4 * (d * d + d) + d * c + c
            }
            ModelSpec::Cnn(s) => {
                let (e, k, c) = (s.embed_dim, s.kernel_size, s.num_classes);
                let block = (e * k + e) + (e * e + e) + 2 * e;
                s.vocab_size * e + s.n_blocks * block + e * c + c
            }
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamSet { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameter vars bound on one tape, addressable by name.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(set: &'a ParamSet, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != set.len() {
            return Err(Error::Contract(format!(
                "bound {} vars for {} parameters",
                vars.len(),
                set.len()
            )));
        }
        Ok(Bound { set, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.set
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }
}

/// A padded batch of token-id sequences. `mask` is true on real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Right-pad every sequence to the longest one.
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        Self::padded(seqs, len)
    }

    /// Right-pad every sequence to exactly `len`.
    pub fn padded<S: AsRef<[usize]>>(seqs: &[S], len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Contract("empty sequence in batch".into()));
            }
            if s.len() > len {
                return Err(Error::Contract(format!("sequence of {} tokens exceeds pad length {len}", s.len())));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD_ID, len - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(Batch {
            ids,
            mask,
            batch: seqs.len(),
            len,
        })
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(&[ids])
    }

    /// Mask as 0/1 values shaped `[B, L, 1]`.
    pub(crate) fn mask_column<F: Float>(&self) -> Tensor<F> {
        Tensor::from_parts(
            vec![self.batch, self.len, 1],
            self.mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect(),
        )
    }

    /// Additive attention mask `[B, 1, 1, L]`: 0 on tokens, -1e9 on padding.
    pub(crate) fn attention_bias<F: Float>(&self) -> Tensor<F> {
        let neg = F::of_f32(ATTENTION_MASK_VALUE);
        Tensor::from_parts(
            vec![self.batch, 1, 1, self.len],
            self.mask.iter().map(|&m| if m { F::zero() } else { neg }).collect(),
        )
    }

    pub fn has_padding(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }
}

/// Parameter initializer drawing from one seeded stream.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    /// Glorot-uniform over the last two dims.
    pub(crate) fn xavier(&mut self, shape: &[usize]) -> Tensor {
        let fan_in = shape[0];
        let fan_out = shape[shape.len() - 1];
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    pub(crate) fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    /// Embedding table with the PAD row zeroed.
    pub(crate) fn embedding(&mut self, vocab: usize, dim: usize, std: f32) -> Tensor {
        let mut t = self.normal(&[vocab, dim], std);
        t.data_mut()[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
}

impl Model {
    /// Instantiate `spec` with parameters drawn deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut init = Init::new(seed);
        let entries = match spec {
            ModelSpec::Transformer(s) => transformer::init_params(s, &mut init),
            ModelSpec::Bilstm(s) => bilstm::init_params(s, &mut init),
            ModelSpec::Cnn(s) => cnn::init_params(s, &mut init),
        };
        Ok(Model {
            spec: spec.clone(),
            params: ParamSet::new(entries)?,
        })
    }

    /// Assemble a model from existing tensors. Names and shapes must match
    /// the spec's parameter list exactly.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Model> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "spec expects {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "expected parameter `{name}` {shape:?}, got `{got_name}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Put every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind<F: Float>(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.param(t.cast())).collect()
    }

    /// Logits for `batch`: `[B, C]` for classification, `[B, L, C]` for
    /// sequence labeling. `vars` come from [`Model::bind`] (or a modified
    /// copy of it). Dropout follows the tape's training flag.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, vars: &[Var], batch: &Batch) -> Result<Var> {
        if batch.len > self.spec.max_len() {
            return Err(Error::Contract(format!(
                "input length {} exceeds max_len {}",
                batch.len,
                self.spec.max_len()
            )));
        }
        let bound = Bound::new(&self.params, vars.to_vec())?;
        match &self.spec {
            ModelSpec::Transformer(s) => transformer::forward(s, tape, &bound, batch),
            ModelSpec::Bilstm(s) => bilstm::forward(s, tape, &bound, batch),
            ModelSpec::Cnn(s) => cnn::forward(s, tape, &bound, batch),
        }
    }

    /// Evaluation-mode logits. Parameters go on the tape as constants, so
    /// nothing is saved for a backward pass.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new(0);
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }
}
