use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tsagent_autodiff::{ParamId, Var};

use super::{unexpected, Payload, SchemaKind, ScoreOutput, Tool, ToolContext, ToolSpec};
use crate::config::ModelConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::{ParamStore, Tape, Tensor};

/// `½ Σ (μ² + σ² − 1 − ln σ²)` against a standard normal prior.
pub fn kl_unit_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter().zip(sigma).map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln())).sum()
}

/// `s_t = α_t · Σ_c (x − x̂)²`, shape `[L]`.
pub fn weighted_scores(tape: &mut Tape, x: Var, recon: Var, alpha: Var) -> Result<Var> {
    let d = tape.sub(x, recon)?;
    let sq = tape.square(d)?;
    let err = tape.sum_axis(sq, 1)?;
    Ok(tape.mul(err, alpha)?)
}

/// Non-overlapping patch autoencoder at one scale.
#[derive(Debug, Clone)]
struct Branch {
    patch: usize,
    encode: Linear,
    decode: Linear,
}

impl Branch {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (l, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let n = l.div_ceil(self.patch);
        let idx: Vec<usize> = (0..n * self.patch).map(|i| i.min(l - 1)).collect();
        let g = tape.embedding(x, &idx)?;
        let g = tape.reshape(g, &[n, self.patch, d])?;
        let g = tape.permute(g, &[2, 0, 1])?;
        let h = self.encode.forward(tape, store, g)?;
        let r = self.decode.forward(tape, store, h)?;
        let r = tape.reshape(r, &[d, n * self.patch])?;
        let r = tape.slice(r, 1, 0, l)?;
        Ok(tape.transpose(r)?)
    }
}

/// Fine and coarse patch reconstructions fused by a two-layer perceptron, with a learned
/// softmax weighting over time.
#[derive(Debug, Clone)]
pub struct MultiScaleDetector {
    pub spec: ToolSpec,
    gamma: ParamId,
    beta: ParamId,
    branches: Vec<Branch>,
    fuse1: Linear,
    fuse2: Linear,
    score: Linear,
    context: Linear,
}

impl MultiScaleDetector {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, cfg: &ModelConfig, seq_len: usize, channels: usize) -> Result<Self> {
        let name = "tool.multiscale";
        if cfg.anomaly_scales.is_empty() {
            return Err(Error::Config("anomaly_scales must not be empty".into()));
        }
        let mut branches = Vec::new();
        for &p in &cfg.anomaly_scales {
            if p == 0 || p > seq_len {
                return Err(Error::Contract(format!("anomaly scale {p} does not fit a window of {seq_len}")));
            }
            let b = (p / 2).max(1);
            branches.push(Branch {
                patch: p,
                encode: Linear::new(store, rng, &format!("{name}.p{p}.enc"), p, b),
                decode: Linear::new(store, rng, &format!("{name}.p{p}.dec"), b, p),
            });
        }
        let cat = branches.len() * channels;
        let hidden = cfg.d_model.max(2 * cat);
        Ok(MultiScaleDetector {
            spec: ToolSpec::new("multiscale", &[Task::Detect], &[SchemaKind::Series], SchemaKind::Scores),
            gamma: store.full(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.zeros(format!("{name}.beta"), &[channels]),
            branches,
            fuse1: Linear::new(store, rng, &format!("{name}.fuse1"), cat, hidden),
            fuse2: Linear::new(store, rng, &format!("{name}.fuse2"), hidden, channels),
            score: Linear::zeros(store, &format!("{name}.score"), channels, 1),
            context: Linear::zeros(store, &format!("{name}.context"), channels, channels),
        })
    }

    pub fn scales(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.patch).collect()
    }
}

impl Tool for MultiScaleDetector {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, _ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let l = tape.shape(x)[0];
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let xa = tape.mul(x, g)?;
        let xa = tape.add(xa, b)?;
        let mut recons = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            recons.push(br.forward(tape, store, xa)?);
        }
        let cat = tape.concat(&recons, 1)?;
        let h = self.fuse1.forward(tape, store, cat)?;
        let h = tape.gelu(h)?;
        let fused = self.fuse2.forward(tape, store, h)?;
        let s = self.score.forward(tape, store, fused)?;
        let s = tape.reshape(s, &[l])?;
        let alpha = tape.softmax(s)?;
        let a_row = tape.reshape(alpha, &[1, l])?;
        let pooled = tape.matmul(a_row, fused)?;
        let ctx_term = self.context.forward(tape, store, pooled)?;
        let r = tape.add(fused, ctx_term)?;
        let r = tape.sub(r, b)?;
        let recon = tape.div(r, g)?;
        let scores = weighted_scores(tape, x, recon, alpha)?;
        Ok(Payload::Scores(ScoreOutput { scores, recon, attention: alpha, aux_loss: None }))
    }
}

/// Variational autoencoder over the flattened window.
#[derive(Debug, Clone)]
pub struct VaeDetector {
    pub spec: ToolSpec,
    enc: Linear,
    mu: Linear,
    logvar: Linear,
    dec1: Linear,
    dec2: Linear,
    pub beta: f64,
    seq_len: usize,
    channels: usize,
}

impl VaeDetector {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, cfg: &ModelConfig, seq_len: usize, channels: usize) -> Self {
        let name = "tool.vae";
        let (n, h, z) = (seq_len * channels, cfg.vae_hidden, cfg.vae_latent);
        VaeDetector {
            spec: ToolSpec::new("vae", &[Task::Detect], &[SchemaKind::Series], SchemaKind::Scores),
            enc: Linear::new(store, rng, &format!("{name}.enc"), n, h),
            mu: Linear::new(store, rng, &format!("{name}.mu"), h, z),
            logvar: Linear::new(store, rng, &format!("{name}.logvar"), h, z),
            dec1: Linear::new(store, rng, &format!("{name}.dec1"), z, h),
            dec2: Linear::new(store, rng, &format!("{name}.dec2"), h, n),
            beta: cfg.vae_beta,
            seq_len,
            channels,
        }
    }
}

impl Tool for VaeDetector {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let (l, d) = (self.seq_len, self.channels);
        if tape.shape(x) != [l, d] {
            return Err(Error::Contract(format!("vae built for {l}x{d}, got {:?}", tape.shape(x))));
        }
        let flat = tape.reshape(x, &[l * d])?;
        let h = self.enc.forward(tape, store, flat)?;
        let h = tape.tanh(h)?;
        let mu = self.mu.forward(tape, store, h)?;
        let logvar = self.logvar.forward(tape, store, h)?;
        let z = if tape.is_training() {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.noise_seed);
            let eps: Vec<f64> = (0..self.mu.out_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = tape.constant(Tensor::from_vec(eps));
            let half = tape.scale(logvar, 0.5)?;
            let sd = tape.exp(half)?;
            let noise = tape.mul(sd, eps)?;
            tape.add(mu, noise)?
        } else {
            mu
        };
        let r = self.dec1.forward(tape, store, z)?;
        let r = tape.tanh(r)?;
        let r = self.dec2.forward(tape, store, r)?;
        let recon = tape.reshape(r, &[l, d])?;
        // KL = ½ Σ (μ² + e^{logvar} − 1 − logvar)
        let m2 = tape.square(mu)?;
        let ev = tape.exp(logvar)?;
        let k = tape.add(m2, ev)?;
        let k = tape.sub(k, logvar)?;
        let k = tape.add_scalar(k, -1.0)?;
        let k = tape.sum(k)?;
        let kl = tape.scale(k, 0.5)?;
        let uniform = tape.constant(Tensor::full(&[l], 1.0));
        let err = weighted_scores(tape, x, recon, uniform)?;
        let per_step = tape.scale(kl, self.beta / l as f64)?;
        let scores = tape.add(err, per_step)?;
        let attention = tape.constant(Tensor::full(&[l], 1.0 / l as f64));
        let aux = tape.scale(kl, self.beta / (l * d) as f64)?;
        Ok(Payload::Scores(ScoreOutput { scores, recon, attention, aux_loss: Some(aux) }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NormState;

    fn cfg() -> ModelConfig {
        ModelConfig { d_model: 8, vae_hidden: 8, vae_latent: 3, ..Default::default() }
    }

    fn series(l: usize) -> Tensor {
        Tensor::new(&[l, 2], (0..2 * l).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap()
    }

    #[test]
    fn kl_reference_values() {
        assert_eq!(kl_unit_normal(&[0.0], &[1.0]), 0.0);
        assert_eq!(kl_unit_normal(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(series(8));
        let a = tape.constant(Tensor::full(&[8], 0.125));
        let s = weighted_scores(&mut tape, x, x, a).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multiscale_attention_is_a_distribution() {
        let mut store = ParamStore::new();
        let t = MultiScaleDetector::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg(), 32, 2).unwrap();
        assert_eq!(t.scales(), vec![4, 16]);
        let norm = NormState::identity(2);
        let ctx = ToolContext::new(Task::Detect, 32, 0, 2, &norm);
        let mut tape = Tape::new();
        let x = tape.constant(series(32));
        let Payload::Scores(out) = t.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
        let a: f64 = tape.value(out.attention).data().iter().sum();
        assert!((a - 1.0).abs() < 1e-12);
        assert!(tape.value(out.scores).data().iter().all(|&v| v >= 0.0));
        assert_eq!(tape.shape(out.recon), &[32, 2]);
    }

    #[test]
    fn vae_beta_zero_is_reconstruction_error() {
        let mut store = ParamStore::new();
        let mut t = VaeDetector::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg(), 10, 2);
        t.beta = 0.0;
        let norm = NormState::identity(2);
        let ctx = ToolContext::new(Task::Detect, 10, 0, 2, &norm);
        let mut tape = Tape::new();
        let x = tape.constant(series(10));
        let Payload::Scores(out) = t.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
        let (xv, rv) = (tape.value(x).clone(), tape.value(out.recon).clone());
        for step in 0..10 {
            let e: f64 = (0..2).map(|c| (xv.row(step)[c] - rv.row(step)[c]).powi(2)).sum();
            assert!((tape.value(out.scores).data()[step] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn vae_eval_is_deterministic() {
        let mut store = ParamStore::new();
        let t = VaeDetector::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg(), 10, 2);
        let norm = NormState::identity(2);
        let ctx = ToolContext::new(Task::Detect, 10, 0, 2, &norm);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(series(10));
            let Payload::Scores(out) = t.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
            tape.value(out.scores).clone()
        };
        assert_eq!(run(), run());
    }
}
