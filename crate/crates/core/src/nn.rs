//! Parameterised layers shared by agents, reasoners and tools.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and every forward pass is
//! recorded on the caller's tape.

use rand::Rng;
use tsagent_autodiff::{ParamId, Var};

use crate::error::Result;
use crate::{ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.uniform_fan_in(format!("{name}.w"), &[in_dim, out_dim], in_dim, rng);
        let b = Some(store.zeros(format!("{name}.b"), &[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.uniform_fan_in(format!("{name}.w"), &[in_dim, out_dim], in_dim, rng);
        Linear { w, b: None, in_dim, out_dim }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.zeros(format!("{name}.w"), &[in_dim, out_dim]);
        let b = Some(store.zeros(format!("{name}.b"), &[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let flat = shape.len() == 1;
        let x = if flat { tape.reshape(x, &[1, shape[0]])? } else { x };
        let w = tape.param(store, self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            y = tape.add(y, b)?;
        }
        Ok(if flat { tape.reshape(y, &[self.out_dim])? } else { y })
    }

    pub fn zero_out(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm { gamma: store.full(format!("{name}.gamma"), &[dim], 1.0), beta: store.zeros(format!("{name}.beta"), &[dim]) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul(n, g)?;
        Ok(tape.add(y, b)?)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// `query` `[B, Lq, d]` (or `[Lq, d]`) attends over `context` of matching rank.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let qs = tape.shape(query).to_vec();
        let cs = tape.shape(context).to_vec();
        let two_d = qs.len() == 2;
        let (b, lq, lk) = if two_d { (1, qs[0], cs[0]) } else { (qs[0], qs[1], cs[1]) };
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |tape: &mut Tape, x: Var, len: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, len, h, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            Ok(tape.reshape(x, &[b * h, len, dh])?)
        };
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let q = split(tape, q, lq)?;
        let k = split(tape, k, lk)?;
        let v = split(tape, v, lk)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let out = tape.matmul(attn, v)?;
        let out = tape.reshape(out, &[b, h, lq, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let shape: Vec<usize> = if two_d { vec![lq, self.dim] } else { vec![b, lq, self.dim] };
        let out = tape.reshape(out, &shape)?;
        self.o.forward(tape, store, out)
    }
}

/// Post-norm transformer encoder layer: attention and a GELU feed-forward, each with a
/// residual connection and dropout.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, d_ff: usize, dropout: f64) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, d_ff),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), d_ff, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.forward(tape, store, x, x)?;
        let a = tape.dropout(a, self.dropout)?;
        let x = tape.add(x, a)?;
        let x = self.ln1.forward(tape, store, x)?;
        let f = self.ff1.forward(tape, store, x)?;
        let f = tape.gelu(f)?;
        let f = tape.dropout(f, self.dropout)?;
        let f = self.ff2.forward(tape, store, f)?;
        let x = tape.add(x, f)?;
        self.ln2.forward(tape, store, x)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Self {
        let layers = (0..depth).map(|i| EncoderLayer::new(store, rng, &format!("{name}.{i}"), dim, heads, d_ff, dropout)).collect();
        Encoder { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Fixed sinusoidal position encoding, `rows × dim`.
pub fn sinusoidal(rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for t in 0..rows {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = t as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(&[rows, dim], data).expect("consistent shape")
}

/// Softmax cross-entropy of a logit vector against a class index.
pub fn cross_entropy(tape: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    let c = tape.shape(logits).iter().product::<usize>();
    let logits = tape.reshape(logits, &[c])?;
    // log-sum-exp with a detached shift for stability
    let shift = crate::stats::max(tape.value(logits).data());
    let shifted = tape.add_scalar(logits, -shift)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum(e)?;
    let lse = tape.log(s)?;
    let pick = tape.slice(shifted, 0, class, class + 1)?;
    let pick = tape.reshape(pick, &[1])?;
    let nll = tape.sub(lse, pick)?;
    Ok(tape.sum(nll)?)
}
