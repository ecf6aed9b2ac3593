use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, distill_loss_on_tape, SoftTarget};
use super::{DistillConfig, LossMode};
use crate::autodiff::Tape;
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{macro_f1_classification, seqlab_f1, SeqMode};
use crate::model::{Batch, Model, ModelSpec, Task};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

const EVAL_BATCH: usize = 64;

/// Token-id inputs with one label per input (classification) or per
/// token (sequence labeling).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Encoded {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A dataset tokenized against one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub label_names: Vec<String>,
    pub vocab: Vocab,
    pub max_len: usize,
    pub metric: SeqMode,
    pub train: Encoded,
    pub dev: Encoded,
    pub test: Encoded,
}

impl TaskData {
    /// Tokenize `ds` with a vocabulary built from its training split.
    pub fn new(ds: &Dataset, max_len: usize, metric: SeqMode) -> Result<TaskData> {
        let vocab = Vocab::build(ds.train.iter().map(Example::text), 1);
        Self::with_vocab(ds, vocab, max_len, metric)
    }

    pub fn with_vocab(ds: &Dataset, vocab: Vocab, max_len: usize, metric: SeqMode) -> Result<TaskData> {
        if max_len < 2 {
            return Err(Error::Parameter("max_len must be at least 2".into()));
        }
        let mut td = TaskData {
            task: ds.task,
            label_names: ds.labels.clone(),
            vocab,
            max_len,
            metric,
            train: Encoded::default(),
            dev: Encoded::default(),
            test: Encoded::default(),
        };
        td.train = td.encode_examples(&ds.train);
        td.dev = td.encode_examples(&ds.dev);
        td.test = td.encode_examples(&ds.test);
        Ok(td)
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        match self.task {
            Task::Classification => self.vocab.encode_classification(tokens, self.max_len),
            Task::SequenceLabeling => self.vocab.encode_labeling(tokens, self.max_len),
        }
    }

    /// Encode raw texts, dropping any that end up empty.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Vec<Vec<usize>> {
        texts
            .iter()
            .map(|t| self.encode_tokens(&t.as_ref().split_whitespace().collect::<Vec<_>>()))
            .filter(|ids| !ids.is_empty())
            .collect()
    }

    fn encode_examples(&self, examples: &[Example]) -> Encoded {
        let mut out = Encoded::default();
        for e in examples {
            let ids = self.encode_tokens(&e.tokens);
            if ids.is_empty() {
                continue;
            }
            let labels = match self.task {
                Task::Classification => vec![e.label()],
                Task::SequenceLabeling => e.labels[..ids.len()].to_vec(),
            };
            out.inputs.push(ids);
            out.labels.push(labels);
        }
        out
    }

    /// Resize a spec's input and output layers to this data.
    pub fn fit_spec(&self, spec: &ModelSpec) -> ModelSpec {
        spec.clone()
            .with_io(self.vocab.len(), self.num_classes(), self.task)
            .with_max_len(self.max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_f1: f32,
    /// Optimizer steps taken up to the end of this epoch.
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss; 0 if none ran.
    pub best_epoch: usize,
    pub steps_to_best: u64,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.checked_sub(1).and_then(|i| self.epochs.get(i))
    }
}

/// Per-example logits in evaluation mode: `[C]` or `[L, C]` flattened,
/// one entry per input.
pub fn model_logits(model: &Model, inputs: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
    let c = model.spec().num_classes();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk)?;
        let logits = model.predict(&batch)?;
        match model.spec().task() {
            Task::Classification => out.extend(logits.data().chunks(c).map(<[f32]>::to_vec)),
            Task::SequenceLabeling => {
                for (b, seq) in chunk.iter().enumerate() {
                    let start = b * batch.len * c;
                    out.push(logits.data()[start..start + seq.len() * c].to_vec());
                }
            }
        }
    }
    Ok(out)
}

/// Argmax labels per input (one, or one per token).
pub fn predict_labels(model: &Model, inputs: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let c = model.spec().num_classes();
    Ok(model_logits(model, inputs)?
        .into_iter()
        .map(|l| l.chunks(c).map(crate::tensor::argmax).collect())
        .collect())
}

/// Teacher soft targets for each input, evaluation mode.
pub fn teacher_logits(teacher: &Model, inputs: &[Vec<usize>]) -> Result<Vec<SoftTarget>> {
    let c = teacher.spec().num_classes();
    model_logits(teacher, inputs)?
        .into_iter()
        .map(|l| SoftTarget::from_logits(l, c))
        .collect()
}

fn f1_of(preds: &[Vec<usize>], golds: &[Vec<usize>], data: &TaskData) -> Result<f32> {
    match data.task {
        Task::Classification => {
            let p: Vec<usize> = preds.iter().map(|v| v[0]).collect();
            let g: Vec<usize> = golds.iter().map(|v| v[0]).collect();
            macro_f1_classification(&p, &g, data.num_classes())
        }
        Task::SequenceLabeling => {
            let names = |v: &Vec<usize>| v.iter().map(|&i| data.label_names[i].as_str()).collect::<Vec<_>>();
            let p: Vec<Vec<&str>> = preds.iter().map(names).collect();
            let g: Vec<Vec<&str>> = golds.iter().map(names).collect();
            seqlab_f1(&p, &g, data.metric)
        }
    }
}

/// Macro F1 of `model` on `split` under the data's metric.
pub fn evaluate(model: &Model, split: &Encoded, data: &TaskData) -> Result<f32> {
    if split.is_empty() {
        return Err(Error::Contract("evaluation on an empty split".into()));
    }
    f1_of(&predict_labels(model, &split.inputs)?, &split.labels, data)
}

/// What a batch is trained against.
#[derive(Clone, Copy)]
enum Targets<'a> {
    Gold(&'a [Vec<usize>]),
    Teacher(&'a [SoftTarget], LossMode, f32),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Gold(l) => l.len(),
            Targets::Teacher(t, ..) => t.len(),
        }
    }
}

/// Loss of the logits `out` for the examples `idx` packed into `batch`.
fn batch_loss(
    tape: &mut Tape<f32>,
    out: crate::autodiff::Var,
    batch: &Batch,
    idx: &[usize],
    targets: Targets,
    task: Task,
    c: usize,
) -> Result<crate::autodiff::Var> {
    let seq = task == Task::SequenceLabeling;
    let mask = if seq { Some(batch.mask.as_slice()) } else { None };
    match targets {
        Targets::Gold(labels) => {
            let flat: Vec<usize> = if seq {
                idx.iter()
                    .flat_map(|&i| {
                        let l = &labels[i];
                        l.iter().copied().chain(std::iter::repeat_n(0, batch.len - l.len()))
                    })
                    .collect()
            } else {
                idx.iter().map(|&i| labels[i][0]).collect()
            };
            cross_entropy(tape, out, &flat, mask)
        }
        Targets::Teacher(soft, mode, temperature) => {
            let rows = if seq { batch.len } else { 1 };
            let mut data = vec![0.0f32; idx.len() * rows * c];
            for (b, &i) in idx.iter().enumerate() {
                let l = &soft[i].logits;
                data[b * rows * c..b * rows * c + l.len()].copy_from_slice(l);
            }
            let teacher = Tensor::new(tape.shape(out).to_vec(), data)?;
            distill_loss_on_tape(tape, out, &teacher, mode, temperature, mask)
        }
    }
}

/// Mean validation loss (weighted by counted rows) and F1 against gold.
fn validate(model: &Model, inputs: &[Vec<usize>], targets: Targets, gold: &[Vec<usize>], data: &TaskData) -> Result<(f32, f32)> {
    let task = model.spec().task();
    let c = model.spec().num_classes();
    let mut total = 0.0f64;
    let mut weight = 0usize;
    let mut preds = Vec::with_capacity(inputs.len());
    let idx: Vec<usize> = (0..inputs.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
        let batch = Batch::new(&seqs)?;
        let mut tape = Tape::<f32>::new(0);
        let vars: Vec<_> = model.params().tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let out = model.forward(&mut tape, &vars, &batch)?;
        let loss = batch_loss(&mut tape, out, &batch, chunk, targets, task, c)?;
        let rows = match task {
            Task::Classification => chunk.len(),
            Task::SequenceLabeling => batch.mask.iter().filter(|&&m| m).count(),
        };
        total += tape.value(loss).item()? as f64 * rows as f64;
        weight += rows;
        let logits = tape.value(out).data();
        for (b, seq) in seqs.iter().enumerate() {
            match task {
                Task::Classification => preds.push(vec![crate::tensor::argmax(&logits[b * c..(b + 1) * c])]),
                Task::SequenceLabeling => {
                    let start = b * batch.len * c;
                    preds.push(logits[start..start + seq.len() * c].chunks(c).map(crate::tensor::argmax).collect())
                }
            }
        }
    }
    Ok(((total / weight as f64) as f32, f1_of(&preds, gold, data)?))
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step)
}

/// Shared loop: mini-batch training with early stopping on validation
/// loss; returns the best checkpoint.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut model: Model,
    train_inputs: &[Vec<usize>],
    train_targets: Targets,
    dev_inputs: &[Vec<usize>],
    dev_targets: Targets,
    dev_gold: &[Vec<usize>],
    data: &TaskData,
    cfg: &DistillConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train_inputs.is_empty() || dev_inputs.is_empty() {
        return Err(Error::Contract("training needs non-empty train and dev splits".into()));
    }
    if train_targets.len() != train_inputs.len() || dev_targets.len() != dev_inputs.len() || dev_gold.len() != dev_inputs.len() {
        return Err(Error::Contract("targets do not align with inputs".into()));
    }
    let task = model.spec().task();
    let c = model.spec().num_classes();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_inputs.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f32, Model)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| train_inputs[i].as_slice()).collect();
            let batch = Batch::new(&seqs)?;
            let mut tape = Tape::<f32>::training(dropout_seed(cfg.seed, opt.steps()));
            let vars = model.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &batch)?;
            let loss = batch_loss(&mut tape, out, &batch, idx, train_targets, task, c)?;
            loss_sum += tape.value(loss).item()? as f64;
            batches += 1;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(model.params().tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            opt.step(model.params_mut().tensors_mut(), &grads)?;
        }
        let (val_loss, val_f1) = validate(&model, dev_inputs, dev_targets, dev_gold, data)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / batches as f64) as f32,
            val_loss,
            val_f1,
            steps: opt.steps(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            history.best_epoch = epoch;
            history.steps_to_best = opt.steps();
        } else if epoch - history.best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), history))
}

/// Cross-entropy training on gold labels (teacher fine-tuning).
pub fn fine_tune_teacher(spec: &ModelSpec, data: &TaskData, cfg: &DistillConfig) -> Result<(Model, TrainHistory)> {
    let model = Model::build(&data.fit_spec(spec), cfg.seed)?;
    train_loop(
        model,
        &data.train.inputs,
        Targets::Gold(&data.train.labels),
        &data.dev.inputs,
        Targets::Gold(&data.dev.labels),
        &data.dev.labels,
        data,
        cfg,
    )
}

/// Student trained on gold labels only.
pub fn train_vanilla(student: Model, data: &TaskData, cfg: &DistillConfig) -> Result<(Model, TrainHistory)> {
    train_loop(
        student,
        &data.train.inputs,
        Targets::Gold(&data.train.labels),
        &data.dev.inputs,
        Targets::Gold(&data.dev.labels),
        &data.dev.labels,
        data,
        cfg,
    )
}

/// Student trained to match teacher targets over `pool`; early stopping
/// uses the distillation loss against `dev_targets`, F1 is against gold.
pub fn train_student(
    student: Model,
    pool: &[Vec<usize>],
    pool_targets: &[SoftTarget],
    dev_targets: &[SoftTarget],
    data: &TaskData,
    cfg: &DistillConfig,
) -> Result<(Model, TrainHistory)> {
    let (mode, t) = (cfg.loss_mode, cfg.temperature);
    train_loop(
        student,
        pool,
        Targets::Teacher(pool_targets, mode, t),
        &data.dev.inputs,
        Targets::Teacher(dev_targets, mode, t),
        &data.dev.labels,
        data,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_classification, SynthClassification};
    use crate::model::{CnnSpec, TransformerSpec};

    fn small_data() -> TaskData {
        let ds = synth_classification(&SynthClassification {
            n_train: 120,
            n_dev: 40,
            n_test: 40,
            vocab_size: 30,
            ..Default::default()
        })
        .unwrap();
        TaskData::new(&ds, 16, SeqMode::TokenMacro).unwrap()
    }

    fn cnn() -> ModelSpec {
        ModelSpec::Cnn(CnnSpec {
            embed_dim: 8,
            n_blocks: 1,
            kernel_size: 3,
            vocab_size: 1,
            max_len: 1,
            num_classes: 1,
            task: Task::Classification,
            dropout: 0.1,
        })
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = small_data();
        let cfg = DistillConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let m = Model::build(&data.fit_spec(&cnn()), 3).unwrap();
        let (out, h) = train_vanilla(m.clone(), &data, &cfg).unwrap();
        assert_eq!(out, m);
        assert!(h.epochs.is_empty());
        assert_eq!(h.best_epoch, 0);
    }

    #[test]
    fn early_stopping_contract_and_determinism() {
        let data = small_data();
        let cfg = DistillConfig {
            max_epochs: 40,
            patience: 3,
            lr: 5e-3,
            ..Default::default()
        };
        let m = Model::build(&data.fit_spec(&cnn()), 3).unwrap();
        let (a, ha) = train_vanilla(m.clone(), &data, &cfg).unwrap();
        let (b, hb) = train_vanilla(m, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        let best = ha.best().unwrap();
        assert!(ha.epochs.iter().all(|e| best.val_loss <= e.val_loss));
        let ran = ha.epochs.len();
        assert!(ran == cfg.max_epochs || ran == ha.best_epoch + cfg.patience);
        assert_eq!(ha.epochs.last().unwrap().epoch, ran);
        assert_eq!(best.steps, ha.steps_to_best);
        let f1 = evaluate(&a, &data.dev, &data).unwrap();
        assert!((f1 - best.val_f1).abs() < 1e-6);
    }

    #[test]
    fn teacher_targets_are_consistent() {
        let data = small_data();
        let spec = ModelSpec::Transformer(TransformerSpec {
            attn_heads: 2,
            layers: 1,
            embed_dim: 8,
            ffn_dim: None,
            vocab_size: 1,
            max_len: 1,
            num_classes: 1,
            task: Task::Classification,
            dropout: 0.1,
        });
        let teacher = Model::build(&data.fit_spec(&spec), 1).unwrap();
        let targets = teacher_logits(&teacher, &data.train.inputs).unwrap();
        assert_eq!(targets, teacher_logits(&teacher, &data.train.inputs).unwrap());
        for t in &targets {
            assert_eq!(t.probs.len(), data.num_classes());
            assert!((t.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert_eq!(t.hard_label(), crate::tensor::argmax(&t.probs));
        }
    }
}
