use rand::Rng;
use serde::{Deserialize, Serialize};
use tsagent_autodiff::Var;

use crate::error::Result;
use crate::nn::Linear;
use crate::{ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentId {
    Analyzer,
    Reasoner,
    Executor,
}

impl AgentId {
    pub const ORDER: [AgentId; 3] = [AgentId::Analyzer, AgentId::Reasoner, AgentId::Executor];

    pub fn name(self) -> &'static str {
        match self {
            AgentId::Analyzer => "analyzer",
            AgentId::Reasoner => "reasoner",
            AgentId::Executor => "executor",
        }
    }
}

/// Shared `L × d_m` memory recorded on a tape. When disabled, reads see zeros and updates
/// are ignored.
#[derive(Debug, Clone)]
pub struct SharedMemory {
    pub m: Var,
    pub initial: Var,
    pub update_log: Vec<(AgentId, f64)>,
    pub enabled: bool,
}

impl SharedMemory {
    pub fn zeros(tape: &mut Tape, rows: usize, d_memory: usize, enabled: bool) -> Self {
        let m = tape.constant(Tensor::zeros(&[rows, d_memory]));
        SharedMemory { m, initial: m, update_log: Vec::new(), enabled }
    }

    pub fn read(&self) -> Var {
        self.m
    }
}

/// Per-dimension gate `γ = sigmoid([M ; message]·W + b)`.
#[derive(Debug, Clone)]
pub struct MemoryGate {
    pub proj: Linear,
}

impl MemoryGate {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_memory: usize) -> Self {
        MemoryGate { proj: Linear::new(store, rng, "memory.gate", 2 * d_memory, d_memory) }
    }

    pub fn gamma(&self, tape: &mut Tape, store: &ParamStore, m: Var, message: Var) -> Result<Var> {
        let cat = tape.concat(&[m, message], 1)?;
        let g = self.proj.forward(tape, store, cat)?;
        Ok(tape.sigmoid(g)?)
    }
}

/// `M ← M + α·γ⊙(message − M)`; `α = 0` leaves `M` untouched. Returns `γ` when applied.
pub fn memory_update(
    tape: &mut Tape,
    store: &ParamStore,
    memory: &mut SharedMemory,
    gate: &MemoryGate,
    agent: AgentId,
    alpha: Var,
    message: Var,
) -> Result<Option<Var>> {
    let a = tape.value(alpha).data()[0];
    memory.update_log.push((agent, a));
    if !memory.enabled || a == 0.0 {
        return Ok(None);
    }
    let m = memory.m;
    let gamma = gate.gamma(tape, store, m, message)?;
    let diff = tape.sub(message, m)?;
    let step = tape.mul(gamma, diff)?;
    let step = tape.mul(step, alpha)?;
    memory.m = tape.add(m, step)?;
    Ok(Some(gamma))
}

/// Mean squared element change between two memories.
pub fn memory_regularizer(tape: &mut Tape, before: Var, after: Var) -> Result<Var> {
    let d = tape.sub(after, before)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, MemoryGate) {
        let mut store = ParamStore::new();
        let gate = MemoryGate::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 4);
        (store, gate)
    }

    fn msg(tape: &mut Tape) -> Var {
        tape.constant(Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap())
    }

    #[test]
    fn zero_alpha_is_identity() {
        let (store, gate) = setup();
        let mut tape = Tape::new();
        let mut mem = SharedMemory::zeros(&mut tape, 3, 4, true);
        let m0 = tape.value(mem.m).clone();
        let message = msg(&mut tape);
        let zero = tape.constant(Tensor::from_vec(vec![0.0]));
        for agent in [AgentId::Analyzer, AgentId::Reasoner] {
            memory_update(&mut tape, &store, &mut mem, &gate, agent, zero, message).unwrap();
        }
        assert_eq!(tape.value(mem.m), &m0);
        assert_eq!(mem.update_log.len(), 2);
    }

    #[test]
    fn saturated_gate_overwrites() {
        let (mut store, gate) = setup();
        gate.proj.zero_out(&mut store);
        store.value_mut(gate.proj.b.unwrap()).data_mut().fill(1e3);
        let mut tape = Tape::new();
        let mut mem = SharedMemory::zeros(&mut tape, 3, 4, true);
        let message = msg(&mut tape);
        let one = tape.constant(Tensor::from_vec(vec![1.0]));
        memory_update(&mut tape, &store, &mut mem, &gate, AgentId::Executor, one, message).unwrap();
        for (a, b) in tape.value(mem.m).data().iter().zip(tape.value(message).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_memory_ignores_updates() {
        let (store, gate) = setup();
        let mut tape = Tape::new();
        let mut mem = SharedMemory::zeros(&mut tape, 3, 4, false);
        let message = msg(&mut tape);
        let one = tape.constant(Tensor::from_vec(vec![1.0]));
        memory_update(&mut tape, &store, &mut mem, &gate, AgentId::Analyzer, one, message).unwrap();
        assert!(tape.value(mem.read()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[96, 64]));
        let b = tape.constant(Tensor::ones(&[96, 64]));
        let l = memory_regularizer(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = memory_regularizer(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let c = tape.constant(Tensor::full(&[96, 64], 2.0));
        let l = memory_regularizer(&mut tape, a, c).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
    }
}
