use rand::Rng;
use tsagent_autodiff::{ParamId, Var};

use super::{unexpected, Payload, SchemaKind, Tool, ToolContext, ToolSpec};
use crate::config::ModelConfig;
use crate::data::Task;
use crate::error::Result;
use crate::nn::Linear;
use crate::{ParamStore, Tape};

/// Receptive field of `layers` causal convolutions with doubling dilation.
pub fn receptive_field(layers: usize, kernel: usize) -> usize {
    1 + (kernel - 1) * ((1usize << layers) - 1)
}

/// Dilated causal convolution stack, global average pool and a linear head.
#[derive(Debug, Clone)]
pub struct TcnClassifier {
    pub spec: ToolSpec,
    convs: Vec<ParamId>,
    head: Linear,
    adapter: Linear,
    kernel: usize,
    hidden: usize,
}

impl TcnClassifier {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, channels: usize, classes: usize) -> Self {
        let name = "tool.tcn";
        let (k, h) = (cfg.tcn_kernel.max(1), cfg.d_model);
        let convs = (0..cfg.tcn_layers)
            .map(|i| {
                let c_in = if i == 0 { channels } else { h };
                store.uniform_fan_in(format!("{name}.conv{i}"), &[h, c_in, k], c_in * k, rng)
            })
            .collect();
        TcnClassifier {
            spec: ToolSpec::new("tcn", &[Task::Classify], &[SchemaKind::Series], SchemaKind::Logits),
            convs,
            head: Linear::new(store, rng, &format!("{name}.head"), h, classes),
            adapter: Linear::zeros(store, &format!("{name}.adapter"), cfg.d_model, classes),
            kernel: k,
            hidden: h,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.convs.len()).map(|i| 1 << i).collect()
    }

    /// `L × D` to `[hidden, L]` causal features.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (l, c) = (tape.shape(x)[0], tape.shape(x)[1]);
        let xt = tape.transpose(x)?;
        let mut h = tape.reshape(xt, &[1, c, l])?;
        for (i, (&w, dil)) in self.convs.iter().zip(self.dilations()).enumerate() {
            let wv = tape.param(store, w);
            let y = tape.conv1d(h, wv, dil * (self.kernel - 1), 0, dil, 1)?;
            let y = tape.relu(y)?;
            h = if i == 0 { y } else { tape.add(h, y)? };
        }
        Ok(tape.reshape(h, &[self.hidden, l])?)
    }
}

impl Tool for TcnClassifier {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let l = tape.shape(x)[0];
        let f = self.features(tape, store, x)?;
        let pooled = tape.mean_axis(f, 1)?;
        let mut logits = self.head.forward(tape, store, pooled)?;
        if let Some(z) = ctx.fused.filter(|&z| tape.shape(z)[1] == self.adapter.in_dim && tape.shape(z)[0] >= l) {
            let part = tape.slice(z, 0, 0, l)?;
            let p = tape.mean_axis(part, 0)?;
            let a = self.adapter.forward(tape, store, p)?;
            logits = tape.add(logits, a)?;
        }
        Ok(Payload::Logits(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tcn() -> (ParamStore, TcnClassifier) {
        let cfg = ModelConfig { d_model: 6, ..Default::default() };
        let mut store = ParamStore::new();
        let t = TcnClassifier::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg, 2, 3);
        (store, t)
    }

    #[test]
    fn receptive_field_and_dilations() {
        assert_eq!(receptive_field(4, 3), 31);
        assert_eq!(tcn().1.dilations(), vec![1, 2, 4, 8]);
    }

    #[test]
    fn causal() {
        let (store, t) = tcn();
        let base: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut perturbed = base.clone();
        for v in &mut perturbed[30..] {
            *v += 5.0;
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[20, 2], base).unwrap());
        let b = tape.constant(Tensor::new(&[20, 2], perturbed).unwrap());
        let fa = t.features(&mut tape, &store, a).unwrap();
        let fb = t.features(&mut tape, &store, b).unwrap();
        let (va, vb) = (tape.value(fa), tape.value(fb));
        for h in 0..6 {
            for step in 0..15 {
                assert_eq!(va.data()[h * 20 + step], vb.data()[h * 20 + step]);
            }
        }
        assert_ne!(va, vb);
    }

    #[test]
    fn logits_shape() {
        let (store, t) = tcn();
        let norm = crate::NormState::identity(2);
        let ctx = ToolContext::new(Task::Classify, 16, 0, 2, &norm);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[16, 2]));
        let Payload::Logits(y) = t.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
        assert_eq!(tape.shape(y), &[3]);
    }
}
