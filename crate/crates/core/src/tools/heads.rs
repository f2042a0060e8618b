use rand::Rng;

use super::anomaly::weighted_scores;
use super::{unexpected, Payload, SchemaKind, ScoreOutput, Tool, ToolContext, ToolSpec};
use crate::data::Task;
use crate::error::Result;
use crate::nn::Linear;
use crate::{ParamStore, Tape, Tensor};

/// Two-layer perceptron head used when tool-augmented execution is switched off.
/// Forecasting, imputation and detection map each channel over time; classification
/// flattens the window.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub spec: ToolSpec,
    l1: Linear,
    l2: Linear,
}

impl MlpHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        task: Task,
        hidden: usize,
        seq_len: usize,
        pred_len: usize,
        channels: usize,
        classes: usize,
    ) -> Self {
        let id = format!("mlp_{}", task.name());
        let name = format!("tool.{id}");
        let (i, o) = match task {
            Task::Forecast => (seq_len, pred_len),
            Task::Impute | Task::Detect => (seq_len, seq_len),
            Task::Classify => (seq_len * channels, classes),
        };
        MlpHead {
            spec: ToolSpec::new(&id, &[task], &[SchemaKind::Series], SchemaKind::terminal(task)),
            l1: Linear::new(store, rng, &format!("{name}.l1"), i, hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, o),
        }
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, x: tsagent_autodiff::Var) -> Result<tsagent_autodiff::Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.l2.forward(tape, store, h)
    }
}

impl Tool for MlpHead {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, _ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let task = self.spec.task_compat[0];
        if task == Task::Classify {
            let n = tape.value(x).numel();
            let flat = tape.reshape(x, &[n])?;
            return Ok(Payload::Logits(self.mlp(tape, store, flat)?));
        }
        let xt = tape.transpose(x)?;
        let y = self.mlp(tape, store, xt)?;
        let y = tape.transpose(y)?;
        Ok(match task {
            Task::Forecast => Payload::Forecast(y),
            Task::Impute => Payload::Completed(y),
            _ => {
                let l = tape.shape(x)[0];
                let attention = tape.constant(Tensor::full(&[l], 1.0 / l as f64));
                let scores = weighted_scores(tape, x, y, attention)?;
                Payload::Scores(ScoreOutput { scores, recon: y, attention, aux_loss: None })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_kinds_and_shapes() {
        let norm = crate::NormState::identity(2);
        for task in Task::ALL {
            let mut store = ParamStore::new();
            let head = MlpHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), task, 8, 12, 5, 2, 3);
            let ctx = ToolContext::new(task, 12, 5, 2, &norm);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::ones(&[12, 2]));
            let out = head.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap();
            assert_eq!(out.kind(), SchemaKind::terminal(task));
            let shape = match out {
                Payload::Forecast(y) | Payload::Completed(y) | Payload::Logits(y) => tape.shape(y).to_vec(),
                Payload::Scores(s) => tape.shape(s.scores).to_vec(),
                _ => unreachable!(),
            };
            let want = match task {
                Task::Forecast => vec![5, 2],
                Task::Impute => vec![12, 2],
                Task::Classify => vec![3],
                Task::Detect => vec![12],
            };
            assert_eq!(shape, want);
        }
    }
}
