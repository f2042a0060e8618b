use super::{unexpected, LatentAdapter, Payload, SchemaKind, Tool, ToolContext, ToolSpec};
use crate::data::{Mask, Task};
use crate::error::{Error, Result};
use crate::{ParamStore, Tape, Tensor};

/// Fill masked cells by linear interpolation between the nearest observed neighbours of
/// the same channel, holding the edge value beyond the first or last observation. Channels
/// with no observation become zero.
pub fn linear_fill(values: &Tensor, mask: &Mask) -> Tensor {
    let (l, d) = (values.shape()[0], values.shape()[1]);
    let mut out = values.data().to_vec();
    for c in 0..d {
        let obs: Vec<usize> = (0..l).filter(|&t| !mask.is_missing(t, c)).collect();
        for t in 0..l {
            if !mask.is_missing(t, c) {
                continue;
            }
            let prev = obs.iter().rev().find(|&&o| o < t);
            let next = obs.iter().find(|&&o| o > t);
            out[t * d + c] = match (prev, next) {
                (Some(&a), Some(&b)) => {
                    let (va, vb) = (values.data()[a * d + c], values.data()[b * d + c]);
                    va + (vb - va) * (t - a) as f64 / (b - a) as f64
                }
                (Some(&a), None) => values.data()[a * d + c],
                (None, Some(&b)) => values.data()[b * d + c],
                (None, None) => 0.0,
            };
        }
    }
    Tensor::new(&[l, d], out).expect("shape preserved")
}

/// Rule-based linear interpolation tool.
#[derive(Debug, Clone)]
pub struct Interpolate {
    pub spec: ToolSpec,
}

impl Default for Interpolate {
    fn default() -> Self {
        Interpolate {
            spec: ToolSpec::new("interpolate", &[Task::Impute], &[SchemaKind::Series], SchemaKind::Completed).rule_based(),
        }
    }
}

impl Tool for Interpolate {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, _store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let filled = match ctx.mask {
            Some(m) => linear_fill(tape.value(x), m),
            None => tape.value(x).clone(),
        };
        Ok(Payload::Completed(tape.constant(filled)))
    }
}

/// Forecast that follows the decoded trajectory from the last observed row:
/// `ŷ[t, c] = x[L−1, c] + (traj[L+t] − traj[L−1]) / σ_ref`, plus a latent adapter.
#[derive(Debug, Clone)]
pub struct OdeReconstruct {
    pub spec: ToolSpec,
    pub adapter: LatentAdapter,
}

impl OdeReconstruct {
    pub fn new(store: &mut ParamStore, d_model: usize) -> Self {
        OdeReconstruct {
            spec: ToolSpec::new("ode_reconstruct", &[Task::Forecast], &[SchemaKind::Series], SchemaKind::Forecast),
            adapter: LatentAdapter::new(store, "tool.ode_reconstruct", d_model),
        }
    }
}

impl Tool for OdeReconstruct {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let (l, h) = (ctx.seq_len, ctx.pred_len);
        let mut y = tape.embedding(x, &vec![l - 1; h])?;
        if let Some(traj) = ctx.trajectory.filter(|&t| tape.shape(t)[0] == l + h) {
            let scale = ctx.priors.map_or(1.0, |p| p.reference_stats.std).max(1e-8);
            let col = tape.reshape(traj, &[l + h, 1])?;
            let future = tape.slice(col, 0, l, l + h)?;
            let last = tape.embedding(col, &vec![l - 1; h])?;
            let delta = tape.sub(future, last)?;
            let delta = tape.scale(delta, 1.0 / scale)?;
            y = tape.add(y, delta)?;
        }
        let y = self.adapter.apply(tape, store, y, ctx, l)?;
        Ok(Payload::Forecast(y))
    }
}

/// A named tool without an implementation; registered so chains can reference it but
/// never selectable.
#[derive(Debug, Clone)]
pub struct Unavailable {
    pub spec: ToolSpec,
}

impl Unavailable {
    pub fn new(id: &str, task: Task) -> Self {
        let mut spec = ToolSpec::new(id, &[task], &[SchemaKind::Series], SchemaKind::terminal(task)).rule_based();
        spec.available = false;
        Unavailable { spec }
    }
}

impl Tool for Unavailable {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, _tape: &mut Tape, _store: &ParamStore, _input: Payload, _ctx: &ToolContext) -> Result<Payload> {
        Err(Error::Registry(format!("tool `{}` is not available", self.spec.tool_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_between_and_beyond_observations() {
        let x = Tensor::new(&[5, 2], vec![0.0, 1.0, 9.0, 9.0, 9.0, 9.0, 6.0, 9.0, 9.0, 9.0]).unwrap();
        let mut m = Mask::empty(5, 2);
        for t in [1, 2, 4] {
            m.set(t, 0, true);
        }
        for t in 1..5 {
            m.set(t, 1, true);
        }
        let y = linear_fill(&x, &m);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 1.0, 4.0, 1.0, 6.0, 1.0, 6.0, 1.0]);
    }

    #[test]
    fn empty_mask_is_identity() {
        let x = Tensor::new(&[3, 1], vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(linear_fill(&x, &Mask::empty(3, 1)), x);
    }

    #[test]
    fn ode_reconstruct_without_trajectory_repeats_last() {
        let mut store = ParamStore::new();
        let tool = OdeReconstruct::new(&mut store, 4);
        let norm = crate::NormState::identity(2);
        let ctx = ToolContext::new(Task::Forecast, 3, 2, 2, &norm);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let Payload::Forecast(y) = tool.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn unavailable_tools_refuse() {
        let t = Unavailable::new("nbeats", Task::Forecast);
        assert!(!t.spec().available);
        let norm = crate::NormState::identity(1);
        let ctx = ToolContext::new(Task::Forecast, 3, 2, 1, &norm);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(t.forward(&mut tape, &ParamStore::new(), Payload::Series(x), &ctx).is_err());
    }
}
