//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use distilbench::augment::{
    balance_indices, filter_by_length, length_stats_of, pseudo_label, BalanceStrategy, LengthFilter, PoolStats,
    UnlabeledPool,
};
use distilbench::autodiff::softmax_with_temperature;
use distilbench::bench::{bench_latency, BenchOptions, DEFAULT_LENGTHS};
use distilbench::data::{
    synth_classification, synth_documents, synth_sequence_labeling, synth_texts, SynthClassification, SynthLabeling,
};
use distilbench::distill::{
    distill_loss, fine_tune_teacher, run_pipeline, DistillConfig, LossMode, PipelineInputs, SoftTarget,
    Stage, TaskData,
};
use distilbench::embed::{extract_teacher_embeddings, initialize_student_embedding, EmbeddingTable};
use distilbench::export::{export_frozen, load_frozen, Precision};
use distilbench::gradcheck::grad_check;
use distilbench::metrics::{macro_f1_classification, seqlab_f1, SeqMode};
use distilbench::model::CLS_ID;
use distilbench::runner::{ExperimentConfig, Runner};
use distilbench::tokenizer::Vocab;
use distilbench::{BiLstmSpec, CnnSpec, Error, Model, ModelSpec, OpKind, Tape, Task, Tensor, TransformerSpec, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T>(r: distilbench::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-6;
/// Whole models sum rounding over many more terms; a wider step keeps the
/// difference quotient above that noise for near-zero gradients.
const ARCH_EPS: f64 = 1e-5;
const OP_SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// Random weights so that the checked scalar depends on every output entry.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, rng_seed: u64) -> distilbench::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = rand_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Cut a flat leaf into pieces of the given shapes.
fn unpack(tape: &mut Tape<f64>, flat: Var, shapes: &[Vec<usize>]) -> distilbench::Result<Vec<Var>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = tape.slice(flat, 0, at, at + n)?;
        out.push(tape.reshape(piece, s)?);
        at += n;
    }
    Ok(out)
}

/// Max relative error of one op for one seed; every float input is checked.
fn op_case(kind: OpKind, seed: u64) -> distilbench::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + kind as u64);
    let (b, l, h, k) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let wseed = rng.random();
    // input shapes, then a closure mapping the unpacked inputs to an output
    type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> distilbench::Result<Var>>;
    let (shapes, body): (Vec<Vec<usize>>, Body) = match kind {
        OpKind::MatMul => (vec![vec![b, l, h], vec![h, k]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        OpKind::Add => (vec![vec![b, l, h], vec![h]], Box::new(|t, v| t.add(v[0], v[1]))),
        OpKind::Sub => (vec![vec![b, l, h], vec![b, l, h]], Box::new(|t, v| t.sub(v[0], v[1]))),
        OpKind::Mul => (vec![vec![b, l, h], vec![l, h]], Box::new(|t, v| t.mul(v[0], v[1]))),
        OpKind::ScalarMul => {
            let s = rng.random_range(-3.0..3.0);
            (vec![vec![b, h]], Box::new(move |t, v| t.scalar_mul(v[0], s)))
        }
        OpKind::Concat => (
            vec![vec![b, l, h], vec![b, k, h]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        OpKind::Slice => {
            let lo = rng.random_range(0..l);
            let hi = rng.random_range(lo + 1..=l);
            (vec![vec![b, l, h]], Box::new(move |t, v| t.slice(v[0], 1, lo, hi)))
        }
        OpKind::EmbeddingLookup => {
            let ids: Vec<usize> = (0..b * l).map(|_| rng.random_range(0..k)).collect();
            (vec![vec![k, h]], Box::new(move |t, v| t.embedding(v[0], &ids, &[b, l])))
        }
        OpKind::Conv1dDepthwise => {
            let kernel = [1, 3, 5][rng.random_range(0..3)];
            (
                vec![vec![b, l, h], vec![h, kernel], vec![h]],
                Box::new(|t, v| t.conv1d_depthwise(v[0], v[1], v[2])),
            )
        }
        OpKind::Conv1dPointwise => (
            vec![vec![b, l, h], vec![h, k], vec![k]],
            Box::new(|t, v| t.conv1d_pointwise(v[0], v[1], v[2])),
        ),
        OpKind::LayerNorm => {
            let h = h.max(2);
            (
                vec![vec![b, l, h], vec![h], vec![h]],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            )
        }
        OpKind::Relu => (vec![vec![b, h]], Box::new(|t, v| t.relu(v[0]))),
        OpKind::Tanh => (vec![vec![b, h]], Box::new(|t, v| t.tanh(v[0]))),
        OpKind::Sigmoid => (vec![vec![b, h]], Box::new(|t, v| t.sigmoid(v[0]))),
        OpKind::Softmax => {
            let temp = [0.5f32, 1.0, 2.0][rng.random_range(0..3)];
            (
                vec![vec![b, l, h]],
                Box::new(move |t, v| t.softmax_with_temperature(v[0], temp)),
            )
        }
        OpKind::LogSoftmax => {
            let temp = [0.5f32, 1.0, 2.0][rng.random_range(0..3)];
            (
                vec![vec![b, l, h]],
                Box::new(move |t, v| t.log_softmax_with_temperature(v[0], temp)),
            )
        }
        OpKind::MeanPool => {
            let mut mask: Vec<bool> = (0..b * l).map(|_| rng.random_bool(0.6)).collect();
            for r in 0..b {
                mask[r * l] = true;
            }
            let masked = rng.random_bool(0.5);
            (
                vec![vec![b, l, h]],
                Box::new(move |t, v| t.mean_pool(v[0], if masked { Some(&mask) } else { None })),
            )
        }
        OpKind::Dropout => (
            vec![vec![b, l, h]],
            Box::new(|t, v| {
                t.set_training(true);
                t.dropout(v[0], 0.3)
            }),
        ),
        OpKind::MaskedFill => {
            let mask = Tensor::from_fn(&[b, l, h], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            (vec![vec![b, l, h]], Box::new(move |t, v| t.masked_fill(v[0], &mask, -2.5)))
        }
        OpKind::Transpose => (vec![vec![b, l, h]], Box::new(|t, v| t.transpose(v[0]))),
        OpKind::Permute => (vec![vec![b, l, h, k]], Box::new(|t, v| t.permute(v[0], &[2, 0, 3, 1]))),
        OpKind::Reshape => (vec![vec![b, l, h]], Box::new(move |t, v| t.reshape(v[0], &[l, b * h]))),
        OpKind::Sum => (vec![vec![b, l]], Box::new(|t, v| t.sum(v[0]))),
        OpKind::Mean => (vec![vec![b, l]], Box::new(|t, v| t.mean(v[0]))),
    };
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let x = rand_tensor(&mut rng, &[total]);
    grad_check(
        |tape, flat| {
            let inputs = unpack(tape, flat, &shapes)?;
            let y = body(tape, &inputs)?;
            weighted_sum(tape, y, wseed)
        },
        &x,
        GRAD_EPS,
    )
}

fn desk_students(task: Task) -> Vec<ModelSpec> {
    vec![
        ModelSpec::Bilstm(BiLstmSpec {
            embed_dim: 8,
            hidden_dim: 4,
            lstm_layers: 2,
            attn_heads: 2,
            vocab_size: 12,
            max_len: 6,
            num_classes: 3,
            task,
            dropout: 0.2,
        }),
        ModelSpec::Cnn(CnnSpec {
            embed_dim: 8,
            n_blocks: 2,
            kernel_size: 3,
            vocab_size: 12,
            max_len: 6,
            num_classes: 3,
            task,
            dropout: 0.2,
        }),
        ModelSpec::Transformer(TransformerSpec {
            attn_heads: 2,
            layers: 2,
            embed_dim: 8,
            ffn_dim: Some(8),
            vocab_size: 12,
            max_len: 6,
            num_classes: 3,
            task,
            dropout: 0.2,
        }),
    ]
}

/// Attention scores are shift invariant per query, so the key bias has an
/// identically zero gradient and a relative error there only measures
/// rounding noise. Those tensors are checked for a zero gradient instead.
fn zero_gradient(name: &str) -> bool {
    name.ends_with(".k.bias")
}

/// Check the gradient of a training-mode forward (dropout on) with respect
/// to every parameter of the model at once.
fn architecture_case(spec: &ModelSpec, seed: u64) -> distilbench::Result<f64> {
    let model = Model::build(spec, seed)?;
    let batch = distilbench::Batch::new(&[vec![CLS_ID, 5, 6, 7, 11], vec![CLS_ID, 9, 4]])?;
    let params: Vec<(&str, Tensor<f64>)> = model.params().iter().map(|(n, t)| (n, t.cast())).collect();
    let checked: Vec<usize> = (0..params.len()).filter(|&i| !zero_gradient(params[i].0)).collect();
    let shapes: Vec<Vec<usize>> = checked.iter().map(|&i| params[i].1.shape().to_vec()).collect();
    let flat: Vec<f64> = checked.iter().flat_map(|&i| params[i].1.data().to_vec()).collect();
    let forward = |tape: &mut Tape<f64>, leaf: Var, zero_leaves: bool| -> distilbench::Result<(Var, Vec<Var>)> {
        tape.set_training(true);
        let pieces = unpack(tape, leaf, &shapes)?;
        let mut vars = Vec::with_capacity(params.len());
        let mut zero = Vec::new();
        let mut next = pieces.into_iter();
        for (name, t) in &params {
            if zero_gradient(name) {
                let v = if zero_leaves { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                zero.push(v);
                vars.push(v);
            } else {
                vars.push(next.next().expect("one piece per checked tensor"));
            }
        }
        let y = model.forward(tape, &vars, &batch)?;
        Ok((weighted_sum(tape, y, seed + 77)?, zero))
    };
    let x = Tensor::new(vec![flat.len()], flat)?;
    let mut tape = Tape::new(0);
    let leaf = tape.param(x.clone());
    let (out, zero) = forward(&mut tape, leaf, true)?;
    let grads = tape.backward(out)?;
    for v in zero {
        let g = grads.get(v).map(|g| g.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))).unwrap_or(0.0);
        if g > 1e-12 {
            return Err(Error::Contract(format!("key bias gradient {g:e} is not zero")));
        }
    }
    grad_check(|tape, leaf| Ok(forward(tape, leaf, false)?.0), &x, ARCH_EPS)
}

fn criterion_1() -> Outcome {
    let mut worst = (0.0f64, String::new());
    for kind in OpKind::ALL {
        for seed in 0..OP_SEEDS {
            let e = ok(op_case(kind, seed))?;
            if e > worst.0 {
                worst = (e, format!("{kind:?} seed {seed}"));
            }
        }
    }
    ensure(worst.0 < GRAD_TOL, format!("op {} rel err {:.2e}", worst.1, worst.0))?;
    let ops_worst = worst.clone();
    let mut arch_worst = (0.0f64, String::new());
    for task in [Task::Classification, Task::SequenceLabeling] {
        for spec in desk_students(task) {
            for seed in 0..5 {
                let e = ok(architecture_case(&spec, seed))?;
                if e > arch_worst.0 {
                    arch_worst = (e, format!("{} {task:?} seed {seed}", spec.family()));
                }
            }
        }
    }
    ensure(
        arch_worst.0 < GRAD_TOL,
        format!("architecture {} rel err {:.2e}", arch_worst.1, arch_worst.0),
    )?;
    Ok(format!(
        "{} op kinds x {OP_SEEDS} seeds max {:.1e} ({}); 3 families x 2 tasks x 5 seeds max {:.1e}",
        OpKind::ALL.len(),
        ops_worst.0,
        ops_worst.1,
        arch_worst.0
    ))
}

// ---------------------------------------------------------------- 2

fn row(v: &[f32]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

fn criterion_2() -> Outcome {
    let mse = ok(distill_loss(&row(&[1.0, 2.0]), &row(&[3.0, 4.0]), LossMode::Mse, 1.0, None))?;
    ensure(mse == 4.0, format!("mse {mse}"))?;
    let p = row(&[0.4, -1.3, 2.2]);
    let same = ok(distill_loss(&p, &p, LossMode::Kld, 1.0, None))?;
    ensure(same.abs() == 0.0, format!("kld(p, p) = {same}"))?;
    // teacher [1, 0] (saturated logits), student [0.5, 0.5]
    let kl = ok(distill_loss(&row(&[0.0, 0.0]), &row(&[200.0, -200.0]), LossMode::Kld, 1.0, None))?;
    let oracle = (1.0f64 * (1.0f64 / 0.5).ln()) as f32;
    ensure((kl - oracle).abs() <= 1e-6, format!("kld {kl} vs ln 2"))?;
    let hard = ok(SoftTarget::from_logits(
        vec![0.3f32.ln(), 0.5f32.ln(), 0.2f32.ln()],
        3,
    ))?;
    ensure(hard.hard_label() == 1, format!("hard target {}", hard.hard_label()))?;
    Ok(format!("mse 4, kld(p,p) 0, kld {kl:.7}, hard target 1"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let c = rng.random_range(2..8);
        let logits = Tensor::from_fn(&[2, c], |_| rng.random_range(-6.0f32..6.0));
        let t1 = ok(softmax_with_temperature(&logits, 1.0))?;
        let mut tape = Tape::<f32>::new(0);
        let v = tape.constant(logits.clone());
        let plain = ok(tape.softmax(v))?;
        ensure(tape.value(plain).data() == t1.data(), format!("case {case}: T=1 differs from softmax"))?;
        let base = logits.argmax_last();
        for t in [0.5, 1.0, 2.0, 10.0] {
            let p = ok(softmax_with_temperature(&logits, t))?;
            ensure(p.argmax_last() == base, format!("case {case}: argmax moved at T={t}"))?;
        }
    }
    Ok("200 random logit sets, T=1 bit-exact, argmax fixed for T in {0.5,1,2,10}".into())
}

// ---------------------------------------------------------------- 4

/// Enumerates the encoder's tensors independently of the model code.
fn transformer_oracle(layers: usize, h: usize, ffn: usize, vocab: usize, max_len: usize, classes: usize) -> usize {
    let mut sizes = vec![vocab * h, max_len * h, h, h];
    for _ in 0..layers {
        sizes.extend([h * h, h, h * h, h, h * h, h, h * h, h]);
        sizes.extend([h, h]);
        sizes.extend([h * ffn, ffn, ffn * h, h]);
        sizes.extend([h, h]);
    }
    sizes.extend([h * classes, classes]);
    sizes.iter().sum()
}

fn transformer(a: usize, l: usize, h: usize, ffn: Option<usize>, vocab: usize, max_len: usize) -> ModelSpec {
    ModelSpec::Transformer(TransformerSpec {
        attn_heads: a,
        layers: l,
        embed_dim: h,
        ffn_dim: ffn,
        vocab_size: vocab,
        max_len,
        num_classes: 2,
        task: Task::Classification,
        dropout: 0.1,
    })
}

fn criterion_4() -> Outcome {
    let minimal = transformer(1, 1, 4, Some(8), 10, 8);
    let oracle = transformer_oracle(1, 4, 8, 10, 8, 2);
    let built = ok(Model::build(&minimal, 0))?.count_parameters();
    ensure(
        oracle == 262 && built == 262 && minimal.parameter_count() == 262,
        format!("minimal: oracle {oracle}, built {built}"),
    )?;
    let vocab = 30522;
    let cfgs = [(2, 2, 128, 4.4e6), (4, 4, 256, 11.3e6), (8, 4, 512, 29.1e6), (12, 12, 768, 110.1e6)];
    let counts: Vec<usize> = cfgs
        .iter()
        .map(|&(a, l, h, _)| transformer(a, l, h, None, vocab, 512).parameter_count())
        .collect();
    ensure(counts.windows(2).all(|w| w[0] < w[1]), format!("ordering {counts:?}"))?;
    for (&(_, l, h, paper), &got) in cfgs.iter().zip(&counts) {
        ensure(got == transformer_oracle(l, h, 4 * h, vocab, 512, 2), format!("oracle mismatch at H={h}"))?;
        let rel = (got as f64 - paper).abs() / paper;
        ensure(rel < 0.15, format!("H={h}: {got} vs {paper} ({:.1}%)", rel * 100.0))?;
    }
    Ok(format!("minimal 262; {counts:?} within 15% of 4.4M/11.3M/29.1M/110.1M"))
}

// ---------------------------------------------------------------- 5

fn teacher_spec(task: Task) -> ModelSpec {
    transformer(4, 2, 64, Some(128), 1, 1).with_io(1, 1, task)
}

fn student_specs(task: Task) -> Vec<(&'static str, ModelSpec)> {
    vec![
        (
            "bilstm",
            ModelSpec::Bilstm(BiLstmSpec {
                embed_dim: 32,
                hidden_dim: 32,
                lstm_layers: 1,
                attn_heads: 1,
                vocab_size: 1,
                max_len: 1,
                num_classes: 1,
                task,
                dropout: 0.1,
            }),
        ),
        ("cnn", cnn_spec(32, task)),
        ("tiny", transformer(2, 2, 32, Some(64), 1, 1).with_io(1, 1, task)),
    ]
}

fn cnn_spec(embed_dim: usize, task: Task) -> ModelSpec {
    ModelSpec::Cnn(CnnSpec {
        embed_dim,
        n_blocks: 2,
        kernel_size: 3,
        vocab_size: 1,
        max_len: 1,
        num_classes: 1,
        task,
        dropout: 0.1,
    })
}

fn desk_config(seed: u64) -> DistillConfig {
    DistillConfig {
        max_epochs: 30,
        patience: 5,
        lr: 2e-3,
        seed,
        ..Default::default()
    }
}

/// Per family, the number of seeds where KD matched or beat vanilla.
fn kd_wins(task: Task) -> Result<(BTreeMap<&'static str, usize>, Vec<String>), String> {
    let mut wins = BTreeMap::new();
    let mut log = Vec::new();
    for seed in 0..3u64 {
        let ds = ok(match task {
            Task::Classification => synth_classification(&SynthClassification {
                seed,
                noise: 0.1,
                n_train: 400,
                n_dev: 150,
                n_test: 300,
                vocab_size: 150,
                ..Default::default()
            }),
            Task::SequenceLabeling => synth_sequence_labeling(&SynthLabeling {
                seed,
                noise: 0.1,
                n_train: 300,
                n_dev: 100,
                n_test: 200,
                ..Default::default()
            }),
        })?;
        let data = ok(TaskData::new(&ds, 32, SeqMode::TokenMacro))?;
        let cfg = desk_config(seed);
        let (teacher, _) = ok(fine_tune_teacher(&teacher_spec(task), &data, &cfg))?;
        for (name, spec) in student_specs(task) {
            let inputs = PipelineInputs {
                data: &data,
                teacher: Some(&teacher),
                student_name: name,
                student_spec: &spec,
                pool: None,
                embeddings: None,
                config: &cfg,
                seed,
            };
            let r = ok(run_pipeline(&[Stage::Vanilla, Stage::Kd], &inputs))?;
            *wins.entry(name).or_insert(0) += usize::from(r[1].test_f1 >= r[0].test_f1);
            log.push(format!("{name} s{seed} {:.3}/{:.3}", r[0].test_f1, r[1].test_f1));
        }
    }
    Ok((wins, log))
}

fn criterion_5() -> Outcome {
    let (cls, cls_log) = kd_wins(Task::Classification)?;
    let (seq, seq_log) = kd_wins(Task::SequenceLabeling)?;
    let detail = format!("cls wins {cls:?}, seqlab wins {seq:?}");
    ensure(cls.values().all(|&w| w >= 2), format!("{detail}; {}", cls_log.join(", ")))?;
    let seq_ok = seq.values().filter(|&&w| w >= 2).count();
    ensure(seq_ok >= 2, format!("{detail}; {}", seq_log.join(", ")))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn counts(labels: &[usize], idx: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &i in idx {
        *m.entry(labels[i]).or_insert(0) += 1;
    }
    m
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50 {
        let labels: Vec<usize> = (0..rng.random_range(1..300)).map(|_| rng.random_range(0..5)).collect();
        let n = rng.random_range(1..80);
        let idx = ok(balance_indices(&labels, BalanceStrategy::TargetOversample { n }, case))?;
        let c = counts(&labels, &idx);
        ensure(c.values().all(|&v| v == n), format!("oversample to {n}: {c:?}"))?;
        let std = PoolStats::from_counts(c).std;
        ensure(std == 0.0, format!("oversample std {std}"))?;
    }
    let labels: Vec<usize> = [(0, 2000), (1, 100), (2, 5)]
        .iter()
        .flat_map(|&(l, n)| std::iter::repeat_n(l, n))
        .collect();
    let capped = counts(&labels, &ok(balance_indices(&labels, BalanceStrategy::MedianCap, 1))?);
    ensure(
        capped == BTreeMap::from([(0, 100), (1, 100), (2, 5)]),
        format!("median cap {capped:?}"),
    )?;
    for _ in 0..50 {
        let lens: Vec<usize> = (0..rng.random_range(4..200)).map(|_| rng.random_range(1..40)).collect();
        let mut sorted = lens.clone();
        sorted.sort_unstable();
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        let (q1, q3) = (rank(0.25), rank(0.75));
        let mut pool = UnlabeledPool::default();
        let texts: Vec<String> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| (0..n).map(|j| format!("t{i}_{j}")).collect::<Vec<_>>().join(" "))
            .collect();
        pool.extend("p", &texts);
        let kept = filter_by_length(&pool, LengthFilter::Q1Q3, &ok(length_stats_of(&lens))?);
        let expected: Vec<&String> = texts
            .iter()
            .zip(&lens)
            .filter(|(_, &n)| (q1..=q3).contains(&n))
            .map(|(t, _)| t)
            .collect();
        ensure(
            kept.texts.iter().collect::<Vec<_>>() == expected,
            format!("q1_q3 [{q1}, {q3}] kept {} of {} expected", kept.len(), expected.len()),
        )?;
    }
    Ok("oversample exact n with std 0; median cap {100,100,5}; q1_q3 filter exact".into())
}

// ---------------------------------------------------------------- 7

fn short_task(seed: u64) -> SynthClassification {
    SynthClassification {
        seed,
        noise: 0.1,
        n_train: 300,
        n_dev: 150,
        n_test: 300,
        vocab_size: 150,
        min_len: 3,
        max_len: 8,
        ..Default::default()
    }
}

const POOL_SIZE: usize = 600;
const DOC_SENTENCES: usize = 4;

fn criterion_7() -> Outcome {
    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 0..3u64 {
        let sc = short_task(seed);
        let data = ok(TaskData::new(&ok(synth_classification(&sc))?, 32, SeqMode::TokenMacro))?;
        let cfg = desk_config(seed);
        let (teacher, _) = ok(fine_tune_teacher(&teacher_spec(Task::Classification), &data, &cfg))?;
        let matched = ok(synth_texts(&sc, 1000 + seed, POOL_SIZE, sc.min_len, sc.max_len))?;
        let long = ok(synth_documents(&sc, 1000 + seed, POOL_SIZE, DOC_SENTENCES))?;
        let mut f1 = Vec::new();
        for texts in [matched, long] {
            let mut pool = UnlabeledPool::default();
            pool.extend("synth", texts);
            let labeled = ok(pseudo_label(&teacher, &data, &pool))?;
            let spec = cnn_spec(32, Task::Classification);
            let inputs = PipelineInputs {
                data: &data,
                teacher: Some(&teacher),
                student_name: "cnn",
                student_spec: &spec,
                pool: Some(&labeled),
                embeddings: None,
                config: &cfg,
                seed,
            };
            f1.push(ok(run_pipeline(&[Stage::KdUlb], &inputs))?[0].test_f1);
        }
        wins += usize::from(f1[0] >= f1[1]);
        log.push(format!("s{seed} matched {:.4} long {:.4}", f1[0], f1[1]));
    }
    let detail = format!("matched >= long in {wins}/3 seeds ({})", log.join(", "));
    ensure(wins >= 2, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_words(words.iter().cloned());
    let mut table = EmbeddingTable::new(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for w in words.iter().step_by(2) {
        let v: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        ok(table.insert(w, &v))?;
    }
    let spec = cnn_spec(8, Task::Classification).with_io(vocab.len(), 2, Task::Classification).with_max_len(16);
    let mut student = ok(Model::build(&spec, 0))?;
    ok(initialize_student_embedding(&mut student, &table, &vocab, 0))?;
    let emb = student.params().get("embeddings.token").unwrap();
    for w in words.iter().step_by(2) {
        let id = vocab.id(w);
        let got = &emb.data()[id * 8..id * 8 + 8];
        let want = table.get(w).unwrap();
        ensure(
            got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("row `{w}` not bit-exact"),
        )?;
    }
    let mut wide = ok(Model::build(
        &cnn_spec(16, Task::Classification).with_io(vocab.len(), 2, Task::Classification).with_max_len(16),
        0,
    ))?;
    ensure(
        matches!(
            initialize_student_embedding(&mut wide, &table, &vocab, 0),
            Err(Error::Config { .. })
        ),
        "dim mismatch accepted",
    )?;

    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 0..3u64 {
        let sc = short_task(seed);
        let data = ok(TaskData::new(&ok(synth_classification(&sc))?, 32, SeqMode::TokenMacro))?;
        let cfg = desk_config(seed);
        let (teacher, _) = ok(fine_tune_teacher(&teacher_spec(Task::Classification), &data, &cfg))?;
        let teacher_table = ok(extract_teacher_embeddings(&teacher, &data.vocab))?;
        let mut pool = UnlabeledPool::default();
        pool.extend("synth", ok(synth_texts(&sc, 1000 + seed, POOL_SIZE, sc.min_len, sc.max_len))?);
        let labeled = ok(pseudo_label(&teacher, &data, &pool))?;
        let spec = cnn_spec(teacher_table.dim(), Task::Classification);
        let inputs = PipelineInputs {
            data: &data,
            teacher: Some(&teacher),
            student_name: "cnn",
            student_spec: &spec,
            pool: Some(&labeled),
            embeddings: Some(&teacher_table),
            config: &cfg,
            seed,
        };
        let r = ok(run_pipeline(&[Stage::KdUlb, Stage::KdUlbEmbed], &inputs))?;
        wins += usize::from(r[1].steps_to_best <= r[0].steps_to_best);
        log.push(format!("s{seed} random {} pretrained {}", r[0].steps_to_best, r[1].steps_to_best));
    }
    let detail = format!("rows bit-exact, mismatch rejected, steps <= in {wins}/3 ({})", log.join(", "));
    ensure(wins >= 2, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn tags(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn criterion_9() -> Outcome {
    let v = ok(macro_f1_classification(&[0, 0, 1, 1], &[0, 1, 1, 1], 2))?;
    let oracle = ((2.0 / 3.0 + 4.0 / 5.0) / 2.0) as f32;
    ensure((v - oracle).abs() <= 1e-6, format!("macro f1 {v}"))?;
    let all_wrong = ok(macro_f1_classification(&[0, 0, 0], &[1, 1, 1], 2))?;
    ensure(all_wrong < 0.5, format!("all wrong {all_wrong}"))?;
    ensure(ok(macro_f1_classification(&[2, 0, 1], &[2, 0, 1], 3))? == 1.0, "identity macro f1")?;

    let gold = vec![tags("B-PER I-PER O B-LOC"), tags("O B-ORG I-ORG I-ORG")];
    ensure(ok(seqlab_f1(&gold, &gold, SeqMode::Entity))? == 1.0, "identity entity f1")?;
    ensure(ok(seqlab_f1(&gold, &gold, SeqMode::TokenMacro))? == 1.0, "identity token f1")?;
    // 2 of 3 predicted spans correct, 2 of 3 gold spans found: P = R = 2/3
    let pred = vec![tags("B-PER I-PER O B-PER"), tags("O B-ORG I-ORG I-ORG")];
    let e = ok(seqlab_f1(&pred, &gold, SeqMode::Entity))?;
    ensure((e - 2.0 / 3.0).abs() <= 1e-6, format!("entity f1 {e}"))?;
    // truncated span is a miss: P = 1/2 (PER right, ORG wrong), R = 1/3
    let pred = vec![tags("B-PER I-PER O O"), tags("O B-ORG I-ORG O")];
    let e = ok(seqlab_f1(&pred, &gold, SeqMode::Entity))?;
    let oracle = 2.0 * 0.5 * (1.0 / 3.0) / (0.5 + 1.0 / 3.0);
    ensure((e - oracle as f32).abs() <= 1e-6, format!("entity f1 {e} vs {oracle}"))?;
    Ok(format!("macro {v:.6}; entity cases 0.666667 and {oracle:.6}; identity 1.0"))
}

// ---------------------------------------------------------------- 10

fn random_ids(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let l = rng.random_range(2..=max_len);
    let mut ids: Vec<usize> = (0..l).map(|_| rng.random_range(4..vocab)).collect();
    ids[0] = CLS_ID;
    ids
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (vocab, max_len) = (200, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut notes = Vec::new();
    for (name, spec) in student_specs(Task::Classification) {
        let spec = spec.with_io(vocab, 2, Task::Classification).with_max_len(max_len);
        let model = ok(Model::build(&spec, 1))?;
        let f32_path = dir.path().join(format!("{name}.f32.kdfz"));
        let int8_path = dir.path().join(format!("{name}.int8.kdfz"));
        ok(export_frozen(&model, &f32_path, Precision::F32))?;
        ok(export_frozen(&model, &int8_path, Precision::Int8))?;
        let full = ok(ok(load_frozen(&f32_path))?.net())?;
        let quant = ok(ok(load_frozen(&int8_path))?.net())?;
        let mut worst = 0.0f32;
        for _ in 0..50 {
            let ids = random_ids(&mut rng, vocab, max_len);
            let live = ok(model.predict(&ok(distilbench::Batch::single(&ids))?))?;
            let frozen = ok(full.logits(&ids))?;
            worst = worst.max(ok(frozen.max_abs_diff(&live))?);
        }
        ensure(worst <= 1e-5, format!("{name}: frozen differs by {worst:e}"))?;
        let size = |p: &Path| fs::metadata(p).map(|m| m.len()).map_err(|e| e.to_string());
        let (a, b) = (size(&f32_path)?, size(&int8_path)?);
        ensure(b as f64 <= 0.4 * a as f64, format!("{name}: int8 {b} vs f32 {a} bytes"))?;
        let mut agree = 0;
        for _ in 0..200 {
            let ids = random_ids(&mut rng, vocab, max_len);
            agree += usize::from(ok(full.logits(&ids))?.argmax_last() == ok(quant.logits(&ids))?.argmax_last());
        }
        ensure(agree >= 190, format!("{name}: int8 argmax agreement {agree}/200"))?;

        let bytes = fs::read(&f32_path).map_err(|e| e.to_string())?;
        let bad = dir.path().join("bad.kdfz");
        for at in [0, 9, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[at] ^= 0x5a;
            fs::write(&bad, &b).map_err(|e| e.to_string())?;
            ensure(load_frozen(&bad).is_err(), format!("{name}: corrupt byte {at} accepted"))?;
        }
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            fs::write(&bad, &bytes[..cut]).map_err(|e| e.to_string())?;
            ensure(load_frozen(&bad).is_err(), format!("{name}: truncation at {cut} accepted"))?;
        }
        notes.push(format!(
            "{name} max diff {worst:.1e}, int8 {:.0}% smaller, agree {agree}/200",
            100.0 * (1.0 - b as f64 / a as f64)
        ));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let opts = BenchOptions {
        lengths: DEFAULT_LENGTHS.to_vec(),
        iterations: 30,
        warmup: 5,
        seed: 0,
    };
    let specs = [
        (
            "bilstm",
            ModelSpec::Bilstm(BiLstmSpec {
                embed_dim: 32,
                hidden_dim: 32,
                lstm_layers: 1,
                attn_heads: 1,
                vocab_size: 1000,
                max_len: 128,
                num_classes: 2,
                task: Task::Classification,
                dropout: 0.1,
            }),
        ),
        ("transformer-small", transformer(4, 4, 64, Some(256), 1000, 128)),
    ];
    let mut means = Vec::new();
    for (name, spec) in specs {
        let model = ok(Model::build(&spec, 0))?;
        let r = ok(bench_latency(name, &model, Precision::F32, &opts, true))?;
        let live = r.live.as_ref().ok_or("live path missing")?;
        for stats in [&r.frozen, live] {
            ensure(
                stats.iter().map(|s| s.length).collect::<Vec<_>>() == opts.lengths,
                format!("{name}: lengths differ"),
            )?;
            ensure(
                stats.iter().all(|s| s.samples_ms.len() == opts.iterations),
                format!("{name}: sample count differs"),
            )?;
        }
        let (f, l) = (r.mean_frozen_ms(), r.mean_live_ms().unwrap());
        ensure(f <= l, format!("{name}: frozen {f:.3} ms > live {l:.3} ms"))?;
        means.push((name, f, l));
    }
    ensure(
        means[0].1 < means[1].1,
        format!("bilstm {:.3} ms not faster than small {:.3} ms", means[0].1, means[1].1),
    )?;
    Ok(means
        .iter()
        .map(|(n, f, l)| format!("{n} frozen {f:.3} ms live {l:.3} ms"))
        .collect::<Vec<_>>()
        .join("; "))
}

// ---------------------------------------------------------------- 12

fn determinism_config(out: &Path) -> String {
    format!(
        r#"
name = "determinism"
task = "classification"
max_len = 16
stages = ["vanilla", "kd", "kd_ulb", "kd_ulb_embed"]
seeds = [0, 1]
out_dir = "{}"

[data.synth_classification]
n_train = 80
n_dev = 30
n_test = 30
vocab_size = 40

[teacher]
family = "transformer"
attn_heads = 2
layers = 1
embed_dim = 16

[[students]]
name = "cnn"
[students.spec]
family = "cnn"
embed_dim = 16
n_blocks = 1
kernel_size = 3

[[students]]
name = "bilstm"
[students.spec]
family = "bilstm"
embed_dim = 16
hidden_dim = 8
lstm_layers = 1
attn_heads = 1

[distill]
max_epochs = 3
patience = 2
lr = 0.003

[pool]
synth = {{ n = 60, seed = 4, min_len = 3, max_len = 12 }}

[embeddings]
source = "teacher_embed"
"#,
        out.display()
    )
}

fn result_files(out: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(out.join("results")).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, fs::read(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

fn criterion_12() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = root.path().join(run);
        let cfg = ok(ExperimentConfig::from_toml_str(&determinism_config(&out)))?;
        ok(ok(Runner::new(cfg))?.run())?;
        runs.push(result_files(&out)?);
    }
    ensure(runs[0].len() >= 3, format!("only {} result files", runs[0].len()))?;
    ensure(
        runs[0].keys().eq(runs[1].keys()),
        "result file sets differ",
    )?;
    for (name, bytes) in &runs[0] {
        ensure(&runs[1][name] == bytes, format!("{name} differs between runs"))?;
        let text = String::from_utf8_lossy(bytes);
        let header = text.lines().next().unwrap_or("");
        ensure(
            !header.contains("_ms") && !header.contains("time"),
            format!("{name} carries timing columns"),
        )?;
    }
    Ok(format!("{} result CSVs byte-identical across two runs", runs[0].len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, fn() -> Outcome); 12] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
        (12, criterion_12),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("criterion {n}: FAIL ({secs:.1}s): {detail}");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
