//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value. Nodes whose inputs do
//! not require gradients are stored as constants, so inference through a
//! tape only pays for the values. `backward` walks the tape once in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{strides, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Op kinds the engine implements. Used by the test suites to make sure
/// every kind is covered by a gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Concat,
    Slice,
    EmbeddingLookup,
    Conv1dDepthwise,
    Conv1dPointwise,
    LayerNorm,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmax,
    MeanPool,
    Dropout,
    MaskedFill,
    Transpose,
    Permute,
    Reshape,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::EmbeddingLookup,
        OpKind::Conv1dDepthwise,
        OpKind::Conv1dPointwise,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::MeanPool,
        OpKind::Dropout,
        OpKind::MaskedFill,
        OpKind::Transpose,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
    ];
}

/// How an operand of a broadcasting binary op maps onto the output.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand is a trailing block repeated over the output.
    Suffix(usize),
    /// Explicit output-position to operand-offset map.
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], input: &[usize]) -> Bcast {
        if out == input {
            return Bcast::Same;
        }
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if trimmed.is_empty() {
            return Bcast::Suffix(1);
        }
        if out.ends_with(&trimmed) {
            return Bcast::Suffix(trimmed.iter().product());
        }
        let offset = out.len() - input.len();
        let in_strides = strides(input);
        let mut eff = vec![0usize; out.len()];
        for (i, &d) in input.iter().enumerate() {
            eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                off += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                off -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    #[inline]
    fn apply<F: Float>(self, x: F, y: F) -> F {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    ScalarMul {
        a: Var,
        s: F,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        len: usize,
        ch: usize,
        k: usize,
    },
    PointwiseConv {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    MeanPool {
        x: Var,
        weights: Vec<F>,
        batch: usize,
        len: usize,
        dim: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<F>,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one per gradient-requiring leaf.
pub struct Gradients<F = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<F: Float> Tape<F> {
    /// A tape in evaluation mode. `seed` drives dropout masks.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn training(seed: u64) -> Self {
        let mut t = Tape::new(seed);
        t.training = true;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [.., m, k] x b [k, n]` (b shared across leading dims) or
    /// `a [.., m, k] x b [.., k, n]` with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}: operands must be at least 2-d")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}: inner dims differ")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}: batch dims differ")));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                gemm(av, bv, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[a, b],
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", format!("{s:?} has fewer than 2 axes")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let out = transpose_blocks(self.value(a).data(), batch, rows, cols);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push(
            "transpose",
            Tensor::from_parts(shape, out),
            Op::Transpose { a, batch, rows, cols },
            &[a],
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} invalid for {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| s[i]).collect();
        let out = permute_data(self.value(a).data(), &s, axes);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, out),
            Op::Permute { a, axes: axes.to_vec() },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", Tensor::from_parts(shape.to_vec(), data), Op::Reshape { a }, &[a])
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(name, format!("{sa:?} vs {sb:?} not broadcastable")))?;
        let ba = Bcast::plan(&out_shape, &sa);
        let bb = Bcast::plan(&out_shape, &sb);
        let n: usize = out_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<F> = match (&ba, &bb) {
            (Bcast::Same, Bcast::Same) => match kind {
                Binary::Add => av.iter().zip(bv).map(|(x, y)| *x + *y).collect(),
                Binary::Sub => av.iter().zip(bv).map(|(x, y)| *x - *y).collect(),
                Binary::Mul => av.iter().zip(bv).map(|(x, y)| *x * *y).collect(),
            },
            (Bcast::Same, Bcast::Suffix(m)) => av
                .chunks(*m)
                .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| kind.apply(x, y)))
                .collect(),
            (Bcast::Suffix(m), Bcast::Same) => bv
                .chunks(*m)
                .flat_map(|ch| av.iter().zip(ch).map(|(&x, &y)| kind.apply(x, y)))
                .collect(),
            _ => (0..n)
                .map(|i| {
                    let (x, y) = (av[ba.index(i)], bv[bb.index(i)]);
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect(),
        };
        self.push(
            name,
            Tensor::from_parts(out_shape, out),
            Op::Binary { kind, a, b, ba, bb },
            &[a, b],
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn scalar_mul(&mut self, a: Var, s: F) -> Result<Var> {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scalar_mul", Tensor::from_parts(shape, out), Op::ScalarMul { a, s }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, &[a])
    }

    /// Rows of `table [V, H]` for every id; output shape `index_shape ++ [H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("embedding_lookup", format!("table must be 2-d, got {ts:?}")));
        }
        if index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding_lookup", "index shape does not match id count"));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token id {bad} out of vocabulary of size {vocab}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        self.push(
            "embedding_lookup",
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Per-channel convolution over the sequence axis with zero "same"
    /// padding. `x [B, L, C]`, `w [C, K]` with K odd, `b [C]`.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || sb != [sx[2]] || sw[1].is_multiple_of(2) {
            return Err(Error::dim(
                "conv1d_depthwise",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let (batch, len, ch, k) = (sx[0], sx[1], sx[2], sw[1]);
        let out = depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            len,
            ch,
            k,
        );
        self.push(
            "conv1d_depthwise",
            Tensor::from_parts(sx, out),
            Op::DepthwiseConv {
                x,
                w,
                b,
                batch,
                len,
                ch,
                k,
            },
            &[x, w, b],
        )
    }

    /// 1x1 convolution mixing channels. `x [.., Cin]`, `w [Cin, Cout]`, `b [Cout]`.
    pub fn conv1d_pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let cin = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != cin || sb != [sw[1]] {
            return Err(Error::dim(
                "conv1d_pointwise",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let cout = sw[1];
        let rows = self.value(x).numel() / cin;
        let mut out = Vec::with_capacity(rows * cout);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(self.value(x).data(), self.value(w).data(), &mut out, rows, cin, cout);
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        self.push(
            "conv1d_pointwise",
            Tensor::from_parts(shape, out),
            Op::PointwiseConv {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            },
            &[x, w, b],
        )
    }

    /// Normalize over the last axis, then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = F::of_f32(eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn unary(&mut self, kind: Unary, name: &'static str, a: Var) -> Result<Var> {
        let f = |x: F| match kind {
            Unary::Relu => x.max(F::zero()),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
        };
        let out: Vec<F> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts(shape, out), Op::Unary { kind, a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, "relu", a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, "tanh", a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, "sigmoid", a)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            log_softmax_in_place(row);
        }
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax { a }, &[a])
    }

    /// Softmax of `logits / temperature` over the last axis. `T = 1` is
    /// exactly [`Tape::softmax`].
    pub fn softmax_with_temperature(&mut self, logits: Var, temperature: f32) -> Result<Var> {
        check_temperature(temperature)?;
        if temperature == 1.0 {
            return self.softmax(logits);
        }
        let scaled = self.scalar_mul(logits, F::one() / F::of_f32(temperature))?;
        self.softmax(scaled)
    }

    pub fn log_softmax_with_temperature(&mut self, logits: Var, temperature: f32) -> Result<Var> {
        check_temperature(temperature)?;
        if temperature == 1.0 {
            return self.log_softmax(logits);
        }
        let scaled = self.scalar_mul(logits, F::one() / F::of_f32(temperature))?;
        self.log_softmax(scaled)
    }

    /// Average over the sequence axis of `x [B, L, H]`. With a mask
    /// (`B * L` entries), only positions where the mask is set count.
    pub fn mean_pool(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("mean_pool", format!("expected [B, L, H], got {s:?}")));
        }
        let (batch, len, dim) = (s[0], s[1], s[2]);
        let mut weights = vec![F::zero(); batch * len];
        for bi in 0..batch {
            let row = &mut weights[bi * len..(bi + 1) * len];
            let count = match mask {
                Some(m) => {
                    if m.len() != batch * len {
                        return Err(Error::dim("mean_pool", "mask length differs from B*L"));
                    }
                    m[bi * len..(bi + 1) * len].iter().filter(|&&v| v).count()
                }
                None => len,
            };
            if count == 0 {
                return Err(Error::Contract(format!("mean_pool: sequence {bi} has no unmasked position")));
            }
            let w = F::one() / F::from_usize(count).unwrap();
            for (t, slot) in row.iter_mut().enumerate() {
                if mask.is_none_or(|m| m[bi * len + t]) {
                    *slot = w;
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); batch * dim];
        for bi in 0..batch {
            for t in 0..len {
                let w = weights[bi * len + t];
                if w == F::zero() {
                    continue;
                }
                let src = &xv[(bi * len + t) * dim..(bi * len + t + 1) * dim];
                for (o, &v) in out[bi * dim..(bi + 1) * dim].iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        self.push(
            "mean_pool",
            Tensor::from_parts(vec![batch, dim], out),
            Op::MeanPool {
                x,
                weights,
                batch,
                len,
                dim,
            },
            &[x],
        )
    }

    /// Inverted dropout. The identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f32) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let scale = F::one() / F::of_f32(1.0 - rate);
        let n = self.value(a).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.random::<f32>() < rate { F::zero() } else { scale })
            .collect();
        let out: Vec<F> = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push("dropout", Tensor::from_parts(shape, out), Op::Dropout { a, mask }, &[a])
    }

    /// Replace entries where `mask` is 1 by `value`. The mask must hold
    /// only 0 and 1 and have the same element count as `a`.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor<F>, value: F) -> Result<Var> {
        if mask.numel() != self.value(a).numel() {
            return Err(Error::dim(
                "masked_fill",
                format!("mask {:?} vs input {:?}", mask.shape(), self.shape(a)),
            ));
        }
        let bits: Vec<bool> = mask
            .data()
            .iter()
            .map(|&m| {
                if m == F::one() {
                    Ok(true)
                } else if m == F::zero() {
                    Ok(false)
                } else {
                    Err(Error::Contract("masked_fill: mask is not binary".into()))
                }
            })
            .collect::<Result<_>>()?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(&bits)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("masked_fill", Tensor::from_parts(shape, out), Op::MaskedFill { a, mask: bits }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<F>() / F::from_usize(v.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaves: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.accum(grads, a) {
                    if shared_b {
                        gemm_nt(g, bv, ga, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, b) {
                    if shared_b {
                        gemm_tn(av, g, gb, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            gemm_tn(
                                &av[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            &Op::Transpose { a, batch, rows, cols } => {
                if let Some(ga) = self.accum(grads, a) {
                    let back = transpose_blocks(g, batch, cols, rows);
                    add_into(ga, &back);
                }
            }
            Op::Permute { a, axes } => {
                if let Some(ga) = self.accum(grads, *a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inverse);
                    add_into(ga, &back);
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.accum(grads, a) {
                    add_into(ga, g);
                }
            }
            Op::Binary { kind, a, b, ba, bb } => {
                let (a, b) = (*a, *b);
                match kind {
                    Binary::Add | Binary::Sub => {
                        if let Some(ga) = self.accum(grads, a) {
                            scatter(ga, g, ba, |x, _| x);
                        }
                        let neg = matches!(kind, Binary::Sub);
                        if let Some(gb) = self.accum(grads, b) {
                            scatter(gb, g, bb, |x, _| if neg { -x } else { x });
                        }
                    }
                    Binary::Mul => {
                        let av = self.value(a).data();
                        let bv = self.value(b).data();
                        if let Some(ga) = self.accum(grads, a) {
                            scatter(ga, g, ba, |x, i| x * bv[bb.index(i)]);
                        }
                        if let Some(gb) = self.accum(grads, b) {
                            scatter(gb, g, bb, |x, i| x * av[ba.index(i)]);
                        }
                    }
                }
            }
            &Op::ScalarMul { a, s } => {
                if let Some(ga) = self.accum(grads, a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * s;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if let Some(gv) = self.accum(grads, *v) {
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { a, axis, start } => {
                let src_shape = self.shape(a).to_vec();
                let outer: usize = src_shape[..axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let width = node.value.shape()[axis];
                if let Some(ga) = self.accum(grads, a) {
                    for o in 0..outer {
                        let base = (o * src_shape[axis] + start) * inner;
                        add_into(
                            &mut ga[base..base + width * inner],
                            &g[o * width * inner..(o + 1) * width * inner],
                        );
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                if let Some(gt) = self.accum(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            &Op::DepthwiseConv {
                x,
                w,
                b,
                batch,
                len,
                ch,
                k,
            } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let half = (k / 2) as isize;
                if let Some(gb) = self.accum(grads, b) {
                    for row in g.chunks(ch) {
                        add_into(gb, row);
                    }
                }
                if let Some(gw) = self.accum(grads, w) {
                    for bi in 0..batch {
                        for t in 0..len {
                            let go = &g[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                            for j in 0..k {
                                let src = t as isize + j as isize - half;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xi = &xv[(bi * len + src as usize) * ch..(bi * len + src as usize + 1) * ch];
                                for c in 0..ch {
                                    gw[c * k + j] += go[c] * xi[c];
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.accum(grads, x) {
                    for bi in 0..batch {
                        for t in 0..len {
                            let go = &g[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                            for j in 0..k {
                                let src = t as isize + j as isize - half;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let base = (bi * len + src as usize) * ch;
                                for c in 0..ch {
                                    gx[base + c] += go[c] * wv[c * k + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::PointwiseConv {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            } => {
                if let Some(gb) = self.accum(grads, b) {
                    for row in g.chunks(cout) {
                        add_into(gb, row);
                    }
                }
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                if let Some(gw) = self.accum(grads, w) {
                    gemm_tn(xv, g, gw, rows, cin, cout);
                }
                if let Some(gx) = self.accum(grads, x) {
                    gemm_nt(g, wv, gx, rows, cout, cin);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.accum(grads, *gamma) {
                    for (go, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *beta) {
                    for go in g.chunks(d) {
                        add_into(gb, go);
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    let df = F::from_usize(d).unwrap();
                    for (r, (go, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dxh = F::zero();
                        let mut sum_dxh_xh = F::zero();
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let scale = inv_std[r] / df;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            dst[j] += scale * (df * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                }
            }
            &Op::Unary { kind, a } => {
                let y = node.value.data();
                let xv = self.value(a).data();
                if let Some(ga) = self.accum(grads, a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if xv[i] > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Tanh => F::one() - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (F::one() - y[i]),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = self.accum(grads, a) {
                    for ((gy, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: F = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = self.accum(grads, a) {
                    for ((gy, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: F = gy.iter().copied().sum();
                        for j in 0..d {
                            dst[j] += gy[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::MeanPool {
                x,
                weights,
                batch,
                len,
                dim,
            } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for bi in 0..*batch {
                        let go = &g[bi * dim..(bi + 1) * dim];
                        for t in 0..*len {
                            let w = weights[bi * len + t];
                            if w == F::zero() {
                                continue;
                            }
                            let dst = &mut gx[(bi * len + t) * dim..(bi * len + t + 1) * dim];
                            for (d, &v) in dst.iter_mut().zip(go) {
                                *d += w * v;
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(ga) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        if !mask[i] {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.accum(grads, a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.accum(grads, a) {
                    let s = g[0] / F::from_usize(ga.len()).unwrap();
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn check_temperature(t: f32) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Softmax of `logits / temperature` along the last axis, off-tape.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    check_temperature(temperature)?;
    let d = *logits.shape().last().unwrap();
    let mut out = logits.data().to_vec();
    if temperature != 1.0 {
        let inv = 1.0 / temperature;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    for row in out.chunks_mut(d) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reduce an output-shaped gradient onto a broadcast operand.
fn scatter<F: Float>(dst: &mut [F], g: &[F], plan: &Bcast, f: impl Fn(F, usize) -> F) {
    match plan {
        Bcast::Same => {
            for i in 0..g.len() {
                dst[i] += f(g[i], i);
            }
        }
        Bcast::Suffix(n) => {
            for i in 0..g.len() {
                dst[i % n] += f(g[i], i);
            }
        }
        Bcast::Map(m) => {
            for i in 0..g.len() {
                dst[m[i]] += f(g[i], i);
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
fn gemm_nt<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot<F: Float>(x: &[F], y: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let (xr, yr) = (xs.remainder(), ys.remainder());
    for (cx, cy) in xs.zip(ys) {
        for l in 0..8 {
            acc[l] += cx[l] * cy[l];
        }
    }
    let mut tail = F::zero();
    for (&p, &q) in xr.iter().zip(yr) {
        tail += p * q;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// `c[k, n] += a[m, k]^T * b[m, n]`
fn gemm_tn<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_blocks<F: Float>(src: &[F], batch: usize, rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

fn permute_data<F: Float>(src: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn depthwise_forward<F: Float>(
    x: &[F],
    w: &[F],
    b: &[F],
    batch: usize,
    len: usize,
    ch: usize,
    k: usize,
) -> Vec<F> {
    let half = (k / 2) as isize;
    let mut out = Vec::with_capacity(batch * len * ch);
    for bi in 0..batch {
        for t in 0..len {
            out.extend_from_slice(b);
            let row = out.len() - ch;
            for j in 0..k {
                let src = t as isize + j as isize - half;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let xi = &x[(bi * len + src as usize) * ch..(bi * len + src as usize + 1) * ch];
                for c in 0..ch {
                    out[row + c] += w[c * k + j] * xi[c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f32>::new(0);
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::<f32>::new(0);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mean_pool_of_identical_vectors() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(t(&[1, 3, 2], &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]));
        let p = tape.mean_pool(x, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, -1.0]);
    }

    #[test]
    fn masked_mean_pool_ignores_padding() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 3.0, 100.0]));
        let p = tape.mean_pool(x, Some(&[true, true, false])).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
        assert!(matches!(tape.mean_pool(x, Some(&[false; 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn depthwise_with_zero_kernel_is_zero() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| i as f32 * 0.3 - 1.0));
        let w = tape.constant(Tensor::zeros(&[3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv1d_depthwise(x, w, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[2, 5, 3]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new(0);
        let w = tape.param(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_w() {
        let mut tape = Tape::<f32>::new(0);
        let w = tape.param(t(&[3], &[1.5, -2.0, 0.25]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scalar_mul(s, 0.5).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new(0);
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_bias_and_general() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let col = tape.constant(t(&[2, 1], &[100.0, 200.0]));
        let z = tape.add(x, col).unwrap();
        assert_eq!(tape.value(z).data(), &[100.0, 101.0, 102.0, 203.0, 204.0, 205.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f32));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn dropout_identity_in_eval_and_at_zero_rate() {
        let mut tape = Tape::<f32>::new(3);
        let x = tape.param(Tensor::from_fn(&[10], |i| i as f32));
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);
        tape.set_training(true);
        assert_eq!(tape.dropout(x, 0.0).unwrap(), x);
        let d = tape.dropout(x, 0.5).unwrap();
        assert_ne!(d, x);
    }

    #[test]
    fn temperature_softmax() {
        let z = t(&[2], &[2.0, 0.0]);
        let p = softmax_with_temperature(&z, 2.0).unwrap();
        assert!((p.data()[0] - 0.731_058_6).abs() < 1e-6);
        assert!((p.data()[1] - 0.268_941_4).abs() < 1e-6);
        let hot = softmax_with_temperature(&t(&[2], &[5.0, -5.0]), 100.0).unwrap();
        assert!((hot.data()[0] - 0.5).abs() < 0.05);
        let flat = softmax_with_temperature(&t(&[3], &[0.7, 0.7, 0.7]), 3.3).unwrap();
        for v in flat.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!(matches!(softmax_with_temperature(&z, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_with_temperature(&z, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(t(&[2], &[f32::MAX, f32::MAX]));
        assert!(matches!(tape.scalar_mul(x, 10.0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn masked_fill_requires_binary_mask() {
        let mut tape = Tape::<f32>::new(0);
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.masked_fill(x, &t(&[3], &[0.0, 1.0, 0.0]), -7.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -7.0, 3.0]);
        assert!(tape.masked_fill(x, &t(&[3], &[0.0, 0.5, 0.0]), -7.0).is_err());
    }
}
