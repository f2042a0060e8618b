use rand::Rng;
use tsagent_autodiff::{ParamId, Var};

use super::{unexpected, Payload, SchemaKind, Tool, ToolContext, ToolSpec};
use crate::config::ModelConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, LayerNorm, Linear};
use crate::spectral::{dft_amplitudes, top_frequencies};
use crate::{ParamStore, Tape, Tensor};

const KERNELS: [usize; 3] = [1, 3, 5];

/// Top-`k` periods of an `L × d` matrix from column-averaged DFT amplitudes, with their
/// amplitudes. Periods are `L / f` for the selected frequencies `f`.
pub fn detect_periods(x: &Tensor, k: usize) -> Vec<(usize, f64)> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let mut amps = vec![0.0; l / 2 + 1];
    for c in 0..d {
        let col: Vec<f64> = (0..l).map(|t| x.data()[t * d + c]).collect();
        for (a, v) in amps.iter_mut().zip(dft_amplitudes(&col)) {
            *a += v / d as f64;
        }
    }
    top_frequencies(&amps, k).into_iter().map(|f| ((l / f).max(1), amps[f])).collect()
}

/// Parallel 2-D convolutions with kernels 1, 3 and 5, averaged.
#[derive(Debug, Clone)]
struct Inception {
    kernels: Vec<ParamId>,
}

impl Inception {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let kernels = KERNELS
            .iter()
            .map(|&k| store.uniform_fan_in(format!("{name}.k{k}"), &[c_out, c_in, k, k], c_in * k * k, rng))
            .collect();
        Inception { kernels }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &k in &self.kernels {
            let w = tape.param(store, k);
            let y = tape.conv2d(x, w)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        let acc = acc.expect("at least one kernel");
        Ok(tape.scale(acc, 1.0 / self.kernels.len() as f64)?)
    }
}

/// Fold by each detected period, convolve in 2-D, unfold and mix by amplitude.
#[derive(Debug, Clone)]
pub struct TimesBlock {
    first: Inception,
    second: Inception,
    norm: LayerNorm,
    top_k: usize,
}

impl TimesBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, d_ff: usize, top_k: usize) -> Self {
        TimesBlock {
            first: Inception::new(store, rng, &format!("{name}.inc1"), d, d_ff),
            second: Inception::new(store, rng, &format!("{name}.inc2"), d_ff, d),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            top_k,
        }
    }

    /// `L × d` to `L × d`; also returns the periods used.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<usize>)> {
        let (l, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let found = detect_periods(tape.value(x), self.top_k);
        let amps: Vec<f64> = found.iter().map(|p| p.1).collect();
        let mx = amps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = amps.iter().map(|a| (a - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut acc: Option<Var> = None;
        for (&(p, _), w) in found.iter().zip(&e) {
            let rows = l.div_ceil(p);
            let total = rows * p;
            let mut xt = tape.transpose(x)?;
            if total > l {
                let pad = tape.constant(Tensor::zeros(&[d, total - l]));
                xt = tape.concat(&[xt, pad], 1)?;
            }
            let grid = tape.reshape(xt, &[1, d, rows, p])?;
            let h = self.first.forward(tape, store, grid)?;
            let h = tape.gelu(h)?;
            let h = self.second.forward(tape, store, h)?;
            let h = tape.reshape(h, &[d, total])?;
            let h = tape.slice(h, 1, 0, l)?;
            let h = tape.transpose(h)?;
            let h = tape.scale(h, w / z)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, h)?,
                None => h,
            });
        }
        let y = match acc {
            Some(a) => tape.add(x, a)?,
            None => x,
        };
        Ok((self.norm.forward(tape, store, y)?, found.iter().map(|p| p.0).collect()))
    }
}

/// Convolutional embedding, stacked period blocks and a flattened linear classifier.
#[derive(Debug, Clone)]
pub struct TimesBlockClassifier {
    pub spec: ToolSpec,
    embed: ParamId,
    blocks: Vec<TimesBlock>,
    head: Linear,
    adapter: Linear,
    d_model: usize,
    seq_len: usize,
    dropout: f64,
}

impl TimesBlockClassifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        seq_len: usize,
        channels: usize,
        classes: usize,
    ) -> Result<Self> {
        if seq_len < 4 {
            return Err(Error::Contract(format!("TimesBlock needs at least 4 steps, got {seq_len}")));
        }
        let name = "tool.timesblock";
        let d = cfg.d_model;
        Ok(TimesBlockClassifier {
            spec: ToolSpec::new("timesblock", &[Task::Classify], &[SchemaKind::Series], SchemaKind::Logits),
            embed: store.uniform_fan_in(format!("{name}.embed"), &[d, channels, 3], channels * 3, rng),
            blocks: (0..cfg.e_layers)
                .map(|i| TimesBlock::new(store, rng, &format!("{name}.block{i}"), d, cfg.d_ff, cfg.top_k_periods))
                .collect(),
            head: Linear::new(store, rng, &format!("{name}.head"), seq_len * d, classes),
            adapter: Linear::zeros(store, &format!("{name}.adapter"), d, classes),
            d_model: d,
            seq_len,
            dropout: cfg.dropout,
        })
    }
}

impl Tool for TimesBlockClassifier {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let (l, c) = (tape.shape(x)[0], tape.shape(x)[1]);
        if l != self.seq_len {
            return Err(Error::Contract(format!("TimesBlock built for {} steps, got {l}", self.seq_len)));
        }
        let xt = tape.transpose(x)?;
        let xt = tape.reshape(xt, &[1, c, l])?;
        let w = tape.param(store, self.embed);
        let h = tape.conv1d_same(xt, w)?;
        let h = tape.reshape(h, &[self.d_model, l])?;
        let h = tape.transpose(h)?;
        let pe = tape.constant(sinusoidal(l, self.d_model));
        let mut h = tape.add(h, pe)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?.0;
        }
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        let flat = tape.reshape(h, &[l * self.d_model])?;
        let mut logits = self.head.forward(tape, store, flat)?;
        if let Some(z) = ctx.fused.filter(|&z| tape.shape(z)[1] == self.d_model && tape.shape(z)[0] >= l) {
            let part = tape.slice(z, 0, 0, l)?;
            let pooled = tape.mean_axis(part, 0)?;
            let a = self.adapter.forward(tape, store, pooled)?;
            logits = tape.add(logits, a)?;
        }
        Ok(Payload::Logits(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_period_is_detected() {
        let x = Tensor::new(&[96, 1], (0..96).map(|t| (std::f64::consts::TAU * t as f64 / 12.0).sin()).collect()).unwrap();
        assert_eq!(detect_periods(&x, 3)[0].0, 12);
    }

    #[test]
    fn classifier_emits_class_logits() {
        let cfg = ModelConfig { d_model: 8, d_ff: 8, e_layers: 1, ..Default::default() };
        let mut store = ParamStore::new();
        let tool = TimesBlockClassifier::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg, 24, 2, 5).unwrap();
        let norm = crate::NormState::identity(2);
        let ctx = ToolContext::new(Task::Classify, 24, 0, 2, &norm);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[24, 2], (0..48).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap());
        let Payload::Logits(y) = tool.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
        assert_eq!(tape.shape(y), &[5]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn short_windows_rejected() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        assert!(TimesBlockClassifier::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg, 3, 1, 2).is_err());
    }
}
