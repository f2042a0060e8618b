//! Chain routing, composition, verification and fallback.

pub mod fallback;
mod router;
mod verify;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tsagent_autodiff::Var;

pub use router::{decide, prior_features, softmax, Router, RoutingDecision, RoutingMode, PRIOR_FEATURES};
pub use verify::{verify, VerifiedPrediction, VerifyConfig, VerifyContext};

use crate::data::NormStrategy;
use crate::error::{Error, Result};
use crate::tools::{Chain, Payload, ToolContext, ToolRegistry};
use crate::{NormState, ParamStore, Tape, Tensor, TimeSeriesWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub greedy_threshold: f64,
    pub max_ensemble: usize,
    pub verify: VerifyConfig,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig { greedy_threshold: 0.6, max_ensemble: 3, verify: VerifyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolTiming {
    pub tool_id: String,
    pub millis: f64,
}

/// Executed tools of one chain with timings and the error that stopped it, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub chain_id: String,
    pub tools: Vec<ToolTiming>,
    pub error: Option<String>,
}

/// Terminal chain output mapped back to data units.
#[derive(Debug, Clone, Copy)]
pub struct ChainOutput {
    /// Forecast `H × D`, completed series `L × D`, logits `[C]` or scores `[L]`.
    pub value: Var,
    /// Detection reconstruction in normalized units.
    pub recon: Option<Var>,
    pub aux_loss: Option<Var>,
}

/// Per-window normalization over observed cells; masked cells become zero.
pub fn pre_op(window: &TimeSeriesWindow, strategy: NormStrategy) -> (Tensor, NormState) {
    let state = NormState::fit(window, strategy);
    let d = window.channels();
    let mut v = window.values.clone();
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        let c = i % d;
        *x = if window.is_observed(i / d, c) { (*x - state.location[c]) / state.scale[c] } else { 0.0 };
    }
    (v, state)
}

/// `y·scale + location` per channel on the tape.
pub fn denormalize_var(tape: &mut Tape, y: Var, norm: &NormState) -> Result<Var> {
    let s = tape.constant(Tensor::from_vec(norm.scale.clone()));
    let l = tape.constant(Tensor::from_vec(norm.location.clone()));
    let y = tape.mul(y, s)?;
    Ok(tape.add(y, l)?)
}

/// Map a terminal payload to data units; completed series keep observed cells bit-exactly.
pub fn post_op(tape: &mut Tape, payload: Payload, window: &TimeSeriesWindow, norm: &NormState) -> Result<ChainOutput> {
    Ok(match payload {
        Payload::Forecast(y) => ChainOutput { value: denormalize_var(tape, y, norm)?, recon: None, aux_loss: None },
        Payload::Completed(y) => {
            let y = denormalize_var(tape, y, norm)?;
            let value = match &window.mask {
                Some(m) => {
                    let keep: Vec<f64> = m.bits().iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
                    let fill: Vec<f64> = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    let shape = window.values.shape();
                    let observed = window.values.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
                    let observed = tape.constant(Tensor::new(shape, observed)?);
                    let fill = tape.constant(Tensor::new(shape, fill)?);
                    let part = tape.mul(y, fill)?;
                    tape.add(observed, part)?
                }
                None => tape.constant(window.values.clone()),
            };
            ChainOutput { value, recon: None, aux_loss: None }
        }
        Payload::Logits(y) => ChainOutput { value: y, recon: None, aux_loss: None },
        Payload::Scores(s) => ChainOutput { value: s.scores, recon: Some(s.recon), aux_loss: s.aux_loss },
        other => return Err(Error::Contract(format!("chain ended on a {:?} payload", other.kind()))),
    })
}

/// Apply the chain's tools left to right to the normalized series.
pub fn run_chain(
    tape: &mut Tape,
    store: &ParamStore,
    tools: &ToolRegistry,
    chain: &Chain,
    input: Var,
    ctx: &ToolContext,
    window: &TimeSeriesWindow,
) -> (Result<ChainOutput>, ChainTrace) {
    let mut trace = ChainTrace { chain_id: chain.id(), tools: Vec::new(), error: None };
    let mut payload = Payload::Series(input);
    for id in &chain.tools {
        let start = Instant::now();
        let step = match tools.get(id) {
            Some(t) if tools.is_available(id) => t.forward(tape, store, payload, ctx),
            _ => Err(Error::Registry(format!("tool `{id}` is not available"))),
        };
        trace.tools.push(ToolTiming { tool_id: id.clone(), millis: start.elapsed().as_secs_f64() * 1e3 });
        match step {
            Ok(p) => payload = p,
            Err(e) => {
                trace.error = Some(format!("{id}: {e}"));
                return (Err(e), trace);
            }
        }
    }
    let out = post_op(tape, payload, window, ctx.norm).and_then(|o| {
        if tape.value(o.value).all_finite() {
            Ok(o)
        } else {
            Err(Error::Tensor(crate::autodiff::TensorError::Numeric { op: chain.id() }))
        }
    });
    if let Err(e) = &out {
        trace.error = Some(e.to_string());
    }
    (out, trace)
}

/// Softmax-weighted sum of same-shaped results.
pub fn ensemble(results: &[Tensor], scores: &[f64]) -> Result<Tensor> {
    let first = results.first().ok_or_else(|| Error::Contract("ensemble of no results".into()))?;
    if results.len() != scores.len() {
        return Err(Error::Contract("one score per result required".into()));
    }
    if let Some(bad) = results.iter().find(|r| r.shape() != first.shape()) {
        return Err(Error::Tensor(crate::autodiff::TensorError::Shape {
            op: "ensemble",
            detail: format!("{:?} vs {:?}", bad.shape(), first.shape()),
        }));
    }
    let w = softmax(scores);
    let mut out = vec![0.0; first.numel()];
    for (r, wi) in results.iter().zip(&w) {
        for (o, x) in out.iter_mut().zip(r.data()) {
            *o += wi * x;
        }
    }
    Ok(Tensor::new(first.shape(), out)?)
}

/// Combined output of the routed chains on the tape.
#[derive(Debug)]
pub struct Execution {
    pub decision: RoutingDecision,
    pub output: Result<ChainOutput>,
    pub traces: Vec<ChainTrace>,
}

/// Route, run and combine. Greedy mode scales the chosen output by `p / detach(p)` so the
/// router receives a gradient; ensemble mode weights successful chains by a softmax of
/// their router scores.
#[allow(clippy::too_many_arguments)]
pub fn execute(
    tape: &mut Tape,
    store: &ParamStore,
    tools: &ToolRegistry,
    chains: &[Chain],
    logits: Var,
    input: Var,
    ctx: &ToolContext,
    window: &TimeSeriesWindow,
    cfg: &ExecutorConfig,
) -> Result<Execution> {
    let scores = tape.value(logits).data().to_vec();
    let decision = decide(&scores, cfg.greedy_threshold, cfg.max_ensemble)?;
    let mut traces = Vec::new();
    let mut done: Vec<(usize, ChainOutput)> = Vec::new();
    let mut last_err = None;
    for &i in &decision.selected {
        let (out, trace) = run_chain(tape, store, tools, &chains[i], input, ctx, window);
        traces.push(trace);
        match out {
            Ok(o) => done.push((i, o)),
            Err(e) => last_err = Some(e),
        }
    }
    if done.is_empty() {
        let err = last_err.unwrap_or_else(|| Error::Registry("no chain selected".into()));
        return Ok(Execution { decision, output: Err(err), traces });
    }
    let output = if decision.mode == RoutingMode::Greedy {
        let (i, o) = done[0];
        let p = tape.softmax(logits)?;
        let pi = tape.slice(p, 0, i, i + 1)?;
        let held = tape.detach(pi);
        let st = tape.div(pi, held)?;
        let scale = |tape: &mut Tape, v: Var| -> Result<Var> { Ok(tape.mul(v, st)?) };
        ChainOutput {
            value: scale(tape, o.value)?,
            recon: o.recon.map(|r| scale(tape, r)).transpose()?,
            aux_loss: o.aux_loss,
        }
    } else {
        let idx: Vec<usize> = done.iter().map(|d| d.0).collect();
        let parts: Vec<Var> = idx.iter().map(|&i| tape.slice(logits, 0, i, i + 1)).collect::<std::result::Result<_, _>>()?;
        let sel = tape.concat(&parts, 0)?;
        let w = tape.softmax(sel)?;
        let mut value: Option<Var> = None;
        let mut recon: Option<Var> = None;
        let mut aux: Option<Var> = None;
        for (k, (_, o)) in done.iter().enumerate() {
            let wk = tape.slice(w, 0, k, k + 1)?;
            let v = tape.mul(o.value, wk)?;
            value = Some(match value {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
            if let Some(r) = o.recon {
                let r = tape.mul(r, wk)?;
                recon = Some(match recon {
                    Some(a) => tape.add(a, r)?,
                    None => r,
                });
            }
            if let Some(a) = o.aux_loss {
                let a = tape.mul(a, wk)?;
                aux = Some(match aux {
                    Some(b) => tape.add(b, a)?,
                    None => a,
                });
            }
        }
        ChainOutput { value: value.expect("at least one result"), recon, aux_loss: aux }
    };
    Ok(Execution { decision, output: Ok(output), traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{Mask, Task};
    use crate::tools::{default_chains, ChainRegistry, TaskDims, Tool, ToolSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ensemble_examples() {
        let a = Tensor::from_vec(vec![1.0, 3.0]);
        let b = Tensor::from_vec(vec![3.0, 5.0]);
        assert_eq!(ensemble(&[a.clone(), b.clone()], &[0.7, 0.7]).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(ensemble(&[a.clone()], &[4.0]).unwrap(), a);
        let one = Tensor::from_vec(vec![1.0]);
        let zero = Tensor::from_vec(vec![0.0]);
        assert!((ensemble(&[one, zero], &[3f64.ln(), 0.0]).unwrap().data()[0] - 0.75).abs() < 1e-12);
        assert!(ensemble(&[a, Tensor::from_vec(vec![1.0])], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pre_op_zeroes_masked_cells() {
        let mut w = TimeSeriesWindow::new(Tensor::new(&[4, 1], vec![1.0, 2.0, 99.0, 3.0]).unwrap()).unwrap();
        let mut m = Mask::empty(4, 1);
        m.set(2, 0, true);
        w.mask = Some(m);
        let (x, norm) = pre_op(&w, NormStrategy::Revin);
        assert_eq!(norm.location[0], 2.0);
        assert_eq!(x.data()[2], 0.0);
    }

    #[derive(Debug)]
    struct Failing(ToolSpec);

    impl Tool for Failing {
        fn spec(&self) -> &ToolSpec {
            &self.0
        }
        fn forward(&self, _: &mut Tape, _: &ParamStore, _: Payload, _: &ToolContext) -> Result<Payload> {
            Err(Error::Contract("stub failure".into()))
        }
    }

    #[test]
    fn failing_tool_named_in_trace() {
        let mut tools = ToolRegistry::new();
        tools.register(Box::new(crate::tools::DecompositionTool::new(5, 16).unwrap())).unwrap();
        let spec = ToolSpec::new(
            "stub",
            &[Task::Forecast],
            &[crate::tools::SchemaKind::Decomposed],
            crate::tools::SchemaKind::Forecast,
        );
        tools.register(Box::new(Failing(spec))).unwrap();
        let chains = ChainRegistry::from_lists(Task::Forecast, &[vec!["decomposition".into(), "stub".into()]], &tools).unwrap();
        let w = TimeSeriesWindow::new(Tensor::ones(&[16, 1])).unwrap();
        let (x, norm) = pre_op(&w, NormStrategy::Revin);
        let ctx = ToolContext::new(Task::Forecast, 16, 4, 1, &norm);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (out, trace) = run_chain(&mut tape, &ParamStore::new(), &tools, &chains.chains()[0], xv, &ctx, &w);
        assert!(out.is_err());
        assert!(trace.error.unwrap().starts_with("stub"));
        assert_eq!(trace.tools.len(), 2);
    }

    #[test]
    fn forecast_chain_end_to_end_shape() {
        let cfg = ModelConfig { d_model: 8, d_ff: 8, n_heads: 2, e_layers: 1, ..Default::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = TaskDims { seq_len: 96, pred_len: 96, channels: 7, classes: 0 };
        let tools = ToolRegistry::for_task(&mut store, &mut rng, &cfg, Task::Forecast, dims, true).unwrap();
        let chains = ChainRegistry::from_lists(Task::Forecast, &default_chains(Task::Forecast, true), &tools).unwrap();
        let data: Vec<f64> = (0..96 * 7).map(|i| (i as f64 * 0.01).sin()).collect();
        let w = TimeSeriesWindow::new(Tensor::new(&[96, 7], data).unwrap()).unwrap();
        let (x, norm) = pre_op(&w, NormStrategy::Revin);
        let ctx = ToolContext::new(Task::Forecast, 96, 96, 7, &norm);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = tape.constant(Tensor::zeros(&[3]));
        let ex = execute(&mut tape, &store, &tools, chains.chains(), logits, xv, &ctx, &w, &ExecutorConfig::default()).unwrap();
        assert_eq!(ex.decision.mode, RoutingMode::Ensemble(3));
        let out = ex.output.unwrap();
        assert_eq!(tape.shape(out.value), &[96, 7]);
    }

    #[test]
    fn constant_series_zero_head_forecasts_constant() {
        let cfg = ModelConfig { d_model: 8, d_ff: 8, n_heads: 2, e_layers: 1, ..Default::default() };
        let mut store = ParamStore::new();
        let f = crate::tools::PatchForecaster::new(&mut store, &mut ChaCha8Rng::seed_from_u64(3), &cfg, 32, 8).unwrap();
        f.head.zero_out(&mut store);
        let mut tools = ToolRegistry::new();
        tools.register(Box::new(f)).unwrap();
        let chain = Chain { tools: vec!["patch_transformer".into()] };
        let w = TimeSeriesWindow::new(Tensor::full(&[32, 2], 7.25)).unwrap();
        let (x, norm) = pre_op(&w, NormStrategy::Revin);
        let ctx = ToolContext::new(Task::Forecast, 32, 8, 2, &norm);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (out, _) = run_chain(&mut tape, &store, &tools, &chain, xv, &ctx, &w);
        assert!(tape.value(out.unwrap().value).data().iter().all(|&v| v == 7.25));
    }
}
