use rand::Rng;
use tsagent_autodiff::Var;

use super::memory::{memory_update, AgentId, MemoryGate, SharedMemory};
use crate::error::Result;
use crate::nn::{sinusoidal, LayerNorm, Linear, MultiHeadAttention};
use crate::{ParamStore, Tape};

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: AgentId,
    /// `L × d_m`.
    pub h: Var,
    /// Confidence, shape `[1]`.
    pub alpha: Var,
}

/// `Enc`: stacked cross-attention from the agent state into memory, or a single affine
/// mix when gated attention is disabled.
#[derive(Debug, Clone)]
pub enum Encoder {
    Attention(Vec<MultiHeadAttention>),
    Affine { wh: Linear, wm: Linear },
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: AgentId,
    pub embed: Linear,
    pub alpha_head: Linear,
    pub encoder: Encoder,
    pub ln: LayerNorm,
}

impl Agent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        id: AgentId,
        carrier_dim: usize,
        d_memory: usize,
        heads: usize,
        layers: usize,
        gated_attention: bool,
    ) -> Self {
        let p = format!("agent.{}", id.name());
        let encoder = if gated_attention {
            Encoder::Attention(
                (0..layers).map(|i| MultiHeadAttention::new(store, rng, &format!("{p}.enc.{i}"), d_memory, heads)).collect(),
            )
        } else {
            Encoder::Affine {
                wh: Linear::new(store, rng, &format!("{p}.mix_h"), d_memory, d_memory),
                wm: Linear::no_bias(store, rng, &format!("{p}.mix_m"), d_memory, d_memory),
            }
        };
        Agent {
            id,
            embed: Linear::new(store, rng, &format!("{p}.embed"), carrier_dim, d_memory),
            alpha_head: Linear::new(store, rng, &format!("{p}.alpha"), d_memory, 1),
            encoder,
            ln: LayerNorm::new(store, &format!("{p}.ln"), d_memory),
        }
    }

    /// `h = LN(Embed(carrier) + PE)`, `α = sigmoid(head(mean_t h))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, carrier: Var) -> Result<AgentState> {
        let rows = tape.shape(carrier)[0];
        let e = self.embed.forward(tape, store, carrier)?;
        let pe = tape.constant(sinusoidal(rows, self.embed.out_dim));
        let e = tape.add(e, pe)?;
        let h = tape.layer_norm(e)?;
        let pooled = tape.mean_axis(h, 0)?;
        let a = self.alpha_head.forward(tape, store, pooled)?;
        let alpha = tape.sigmoid(a)?;
        Ok(AgentState { id: self.id, h, alpha })
    }

    /// `h + LN(Enc(h, M))`.
    pub fn communicate(&self, tape: &mut Tape, store: &ParamStore, state: &AgentState, memory: Var) -> Result<Var> {
        let enc = match &self.encoder {
            Encoder::Attention(layers) => {
                let mut x = state.h;
                for layer in layers {
                    x = layer.forward(tape, store, x, memory)?;
                }
                x
            }
            Encoder::Affine { wh, wm } => {
                let a = wh.forward(tape, store, state.h)?;
                let b = wm.forward(tape, store, memory)?;
                tape.add(a, b)?
            }
        };
        let n = self.ln.forward(tape, store, enc)?;
        Ok(tape.add(state.h, n)?)
    }

    /// Forward, communicate and write to memory in one call.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        carrier: Var,
        memory: &mut SharedMemory,
        gate: &MemoryGate,
    ) -> Result<AgentState> {
        let state = self.forward(tape, store, carrier)?;
        let msg = self.communicate(tape, store, &state, memory.read())?;
        memory_update(tape, store, memory, gate, self.id, state.alpha, msg)?;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(gated: bool) -> (ParamStore, Agent) {
        let mut store = ParamStore::new();
        let a = Agent::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), AgentId::Analyzer, 3, 8, 2, 2, gated);
        (store, a)
    }

    #[test]
    fn zero_carrier_gives_position_rows() {
        let (mut store, a) = agent(true);
        a.embed.zero_out(&mut store);
        a.alpha_head.zero_out(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[6, 3]));
        let s = a.forward(&mut tape, &store, x).unwrap();
        let pe = tape.constant(sinusoidal(6, 8));
        let expect = tape.layer_norm(pe).unwrap();
        assert_eq!(tape.value(s.h), tape.value(expect));
        assert_eq!(tape.value(s.alpha).data(), &[0.5]);
        assert_eq!(tape.shape(s.h), &[6, 8]);
    }

    #[test]
    fn encoder_depth_follows_config() {
        let (_, a) = agent(true);
        assert!(matches!(&a.encoder, Encoder::Attention(l) if l.len() == 2));
        let (_, b) = agent(false);
        assert!(matches!(b.encoder, Encoder::Affine { .. }));
    }

    #[test]
    fn zero_output_projection_leaves_state() {
        let (mut store, a) = agent(true);
        if let Encoder::Attention(layers) = &a.encoder {
            layers.last().unwrap().o.zero_out(&mut store);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 3], (0..12).map(|i| i as f64).collect()).unwrap());
        let s = a.forward(&mut tape, &store, x).unwrap();
        let m = tape.constant(Tensor::zeros(&[4, 8]));
        let msg = a.communicate(&mut tape, &store, &s, m).unwrap();
        assert_eq!(tape.value(msg), tape.value(s.h));
    }

    #[test]
    fn identical_rows_give_identical_messages() {
        let (store, a) = agent(true);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[5, 8], (0..40).map(|i| ((i % 8) as f64).sin()).collect()).unwrap());
        let alpha = tape.constant(Tensor::from_vec(vec![0.5]));
        let state = AgentState { id: AgentId::Reasoner, h, alpha };
        let msg = a.communicate(&mut tape, &store, &state, h).unwrap();
        let v = tape.value(msg);
        for t in 1..5 {
            for (x, y) in v.row(t).iter().zip(v.row(0)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
