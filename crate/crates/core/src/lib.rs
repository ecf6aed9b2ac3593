//! Task-specific knowledge distillation workbench.
//!
//! A small reverse-mode autodiff engine drives a teacher Transformer and
//! three student families (BiLSTM with self-attention, residual
//! depthwise-separable CNN, pruned Transformers). On top sit the
//! distillation losses and training loops, unlabeled-pool augmentation,
//! embedding transfer, a frozen export format with reduced precision and a
//! CPU latency harness.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod distill;
pub mod embed;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runner;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use model::{Batch, BiLstmSpec, CnnSpec, Model, ModelSpec, ParamSet, Task, TransformerSpec};
pub use tensor::{Float, Tensor};
