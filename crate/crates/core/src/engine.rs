//! The assembled model and the per-window pipeline around it.
//!
//! Preparation is non-differentiable and runs once per window: normalization, priors and
//! anchors. The forward pass then records analyzer, reasoner and executor agents, the
//! latent trajectory, fusion, routing and the selected chains on one tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsagent_autodiff::Var;

use crate::analyzer::{compute_statistics, render_plot, PriorBundle};
use crate::config::{AnchorSource, RunConfig};
use crate::coordination::{Agent, AgentId, MemoryGate, SharedMemory};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::executor::{
    execute, pre_op, prior_features, verify, ChainTrace, Execution, Router, RoutingDecision, VerifiedPrediction, VerifyContext,
};
use crate::nn::{sinusoidal, Linear};
use crate::reasoner::numeric::{AnchorContext, CompletionStrategy, NumericReasoner};
use crate::reasoner::visual::{build_prompt, oracle_anchors, parse_anchor_response, AnchorSet, ParseConfig, VlmRequest};
use crate::tools::{default_chains, ChainRegistry, TaskDims, ToolContext, ToolRegistry};
use crate::{NormState, ParamStore, Tape, Tensor, TimeSeriesWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorOrigin {
    /// Visual reasoning switched off; the anchor set is empty.
    Disabled,
    Oracle,
    Vlm,
    /// The model response was rejected and the oracle was used instead.
    OracleFallback,
}

/// Everything computed once per window before the forward pass.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub window: TimeSeriesWindow,
    /// Normalized `L × D` input with masked cells zeroed.
    pub x_norm: Tensor,
    pub norm: NormState,
    pub priors: PriorBundle,
    pub anchors: AnchorSet,
    pub origin: AnchorOrigin,
    pub anchor_ctx: AnchorContext,
    pub features: Vec<f64>,
}

fn horizon(cfg: &RunConfig) -> usize {
    if cfg.task == Task::Forecast {
        cfg.data.pred_len
    } else {
        0
    }
}

fn parse_config(cfg: &RunConfig) -> ParseConfig {
    ParseConfig {
        confidence_threshold: cfg.anchors.confidence_threshold,
        max_anchors: cfg.anchors.max_anchors,
        tau: cfg.anchors.tau.clone(),
    }
}

fn finish(cfg: &RunConfig, window: &TimeSeriesWindow, priors: PriorBundle, anchors: AnchorSet, origin: AnchorOrigin) -> Prepared {
    let (x_norm, norm) = pre_op(window, cfg.data.normalization);
    let anchor_ctx = AnchorContext::new(&anchors, &priors, window.len(), horizon(cfg), cfg.ode.kernel_bandwidth);
    let features = prior_features(cfg.task, &priors, anchors.confidence);
    Prepared { window: window.clone(), x_norm, norm, priors, anchors, origin, anchor_ctx, features }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Priors and anchors for every window. Offline mode uses the signal-processing oracle;
/// VLM mode queries the endpoint and falls back to the oracle on unusable responses.
/// Transport failures are returned as errors.
pub fn prepare_windows(cfg: &RunConfig, windows: &[TimeSeriesWindow]) -> Result<Vec<Prepared>> {
    let task = cfg.task;
    let range = cfg.anchors.ranges.get(task);
    let pool = worker_pool(cfg.workers)?;
    let priors: Vec<PriorBundle> = pool.install(|| {
        windows.par_iter().map(|w| compute_statistics(w, &cfg.analyzer, range)).collect::<Result<Vec<_>>>()
    })?;
    let oracle = |w: &TimeSeriesWindow, p: &PriorBundle| {
        oracle_anchors(w, p, task, range, &cfg.anchors.tau, cfg.anchors.max_anchors)
    };
    if !cfg.ablation.enable_visual_reasoner {
        return Ok(windows
            .iter()
            .zip(priors)
            .map(|(w, p)| finish(cfg, w, p, AnchorSet::empty(task), AnchorOrigin::Disabled))
            .collect());
    }
    if cfg.anchors.source == AnchorSource::Offline {
        return Ok(pool.install(|| {
            windows
                .par_iter()
                .zip(priors)
                .map(|(w, p)| {
                    let a = oracle(w, &p);
                    finish(cfg, w, p, a, AnchorOrigin::Oracle)
                })
                .collect()
        }));
    }
    let mut requests = Vec::new();
    let mut slots = Vec::with_capacity(windows.len());
    for (w, p) in windows.iter().zip(&priors) {
        let prompt = match build_prompt(task, w, p, range) {
            Ok(prompt) => prompt,
            Err(e) => {
                log::warn!("window at {}: no prompt ({e}); using the oracle", w.start);
                slots.push(None);
                continue;
            }
        };
        let image = render_plot(w, p, &cfg.plot)?;
        slots.push(Some(requests.len()));
        requests.push(VlmRequest::new(prompt, image.base64(), &cfg.vlm)?);
    }
    let responses = crate::reasoner::visual::vlm::query_many(&requests, cfg.vlm.max_concurrent_requests);
    let parse_cfg = parse_config(cfg);
    let mut out = Vec::with_capacity(windows.len());
    for ((w, p), slot) in windows.iter().zip(priors).zip(slots) {
        let (anchors, origin) = match slot {
            None => (oracle(w, &p), AnchorOrigin::OracleFallback),
            Some(i) => {
                let raw = match &responses[i] {
                    Ok(raw) => raw,
                    Err(Error::Transport(m)) => return Err(Error::Transport(m.clone())),
                    Err(Error::Endpoint { status, body }) => {
                        return Err(Error::Endpoint { status: *status, body: body.clone() })
                    }
                    Err(e) => return Err(Error::Transport(e.to_string())),
                };
                match parse_anchor_response(raw, task, w, &p, &parse_cfg) {
                    Ok(set) => (set, AnchorOrigin::Vlm),
                    Err(e) => {
                        log::warn!("window at {}: response rejected ({e}); using the oracle", w.start);
                        (oracle(w, &p), AnchorOrigin::OracleFallback)
                    }
                }
            }
        };
        out.push(finish(cfg, w, p, anchors, origin));
    }
    Ok(out)
}

/// Tape outputs of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub execution: Execution,
    pub memory_initial: Var,
    pub memory_final: Var,
    /// Confidence of each agent write, in execution order.
    pub memory_log: Vec<(AgentId, f64)>,
    /// Decoded reference trajectory `[L+H]` in data units.
    pub decoded: Option<Var>,
    pub gate_values: Vec<f64>,
    pub completion: Option<(CompletionStrategy, usize)>,
}

/// Model parameters and components for one task and window geometry.
#[derive(Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub dims: TaskDims,
    pub store: ParamStore,
    pub agents: Vec<Agent>,
    pub gate: MemoryGate,
    pub input_embed: Linear,
    pub numeric: NumericReasoner,
    pub tools: ToolRegistry,
    pub chains: ChainRegistry,
    pub router: Router,
    /// Class used by the classification fallback.
    pub majority_class: usize,
}

impl Model {
    pub fn new(cfg: &RunConfig, dims: TaskDims) -> Result<Self> {
        let task = cfg.task;
        let m = &cfg.model;
        let ab = &cfg.ablation;
        if task == Task::Classify && dims.classes == 0 {
            return Err(Error::Config("classification needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let agents = AgentId::ORDER
            .iter()
            .map(|&id| {
                let carrier = match id {
                    AgentId::Analyzer => dims.channels,
                    AgentId::Reasoner => 2 + m.hidden_dim,
                    AgentId::Executor => m.d_model,
                };
                Agent::new(&mut store, &mut rng, id, carrier, m.d_memory, m.n_heads, m.e_layers, ab.enable_gated_attention)
            })
            .collect();
        let gate = MemoryGate::new(&mut store, &mut rng, m.d_memory);
        let input_embed = Linear::new(&mut store, &mut rng, "input.embed", dims.channels, m.d_model);
        let numeric = NumericReasoner::new(&mut store, &mut rng, m, cfg.ode.clone())?;
        let mut tools = ToolRegistry::for_task(&mut store, &mut rng, m, task, dims, ab.enable_tools)?;
        let explicit = ab.enable_tools.then(|| cfg.tools.chains.get(&task).cloned()).flatten();
        if ab.enable_tools {
            for id in &cfg.tools.unavailable {
                tools.disable(id)?;
            }
        }
        let mut chains = ChainRegistry::new(task);
        match &explicit {
            Some(lists) => {
                for ids in lists {
                    chains.register(ids.clone(), &tools)?;
                }
            }
            None => {
                for ids in default_chains(task, ab.enable_tools) {
                    if let Err(e) = chains.register(ids.clone(), &tools) {
                        log::warn!("default chain {} skipped: {e}", ids.join("+"));
                    }
                }
            }
        }
        if chains.is_empty() {
            return Err(Error::Registry(format!("no usable chains for {task}")));
        }
        let router = Router::new(&mut store, &mut rng, m.d_memory, m.router_hidden, chains.len());
        Ok(Model { cfg: cfg.clone(), dims, store, agents, gate, input_embed, numeric, tools, chains, router, majority_class: 0 })
    }

    pub fn task(&self) -> Task {
        self.cfg.task
    }

    fn horizon(&self) -> usize {
        horizon(&self.cfg)
    }

    /// Record the full pipeline for one window.
    pub fn forward(&self, tape: &mut Tape, p: &Prepared, noise_seed: u64) -> Result<Forward> {
        let store = &self.store;
        let m = &self.cfg.model;
        let ab = &self.cfg.ablation;
        let (l, h) = (p.window.len(), self.horizon());
        if l != self.dims.seq_len || p.window.channels() != self.dims.channels {
            return Err(Error::Contract(format!(
                "window is {l} x {}, model expects {} x {}",
                p.window.channels(),
                self.dims.seq_len,
                self.dims.channels
            )));
        }
        let mut mem = SharedMemory::zeros(tape, l, m.d_memory, ab.enable_shared_memory);
        let x = tape.constant(p.x_norm.clone());
        self.agents[0].step(tape, store, x, &mut mem, &self.gate)?;

        let embedded = self.input_embed.forward(tape, store, x)?;
        let embedded = if h > 0 {
            let pad = tape.constant(Tensor::zeros(&[h, m.d_model]));
            tape.concat(&[embedded, pad], 0)?
        } else {
            embedded
        };
        let pe = tape.constant(sinusoidal(l + h, m.d_model));
        let e_ext = tape.add(embedded, pe)?;

        let traj = if ab.enable_numeric_reasoner {
            let e = tape.slice(e_ext, 0, 0, l)?;
            let memory = ab.enable_shared_memory.then(|| mem.read());
            let u0 = self.numeric.init_latent(tape, store, e, memory, h)?;
            Some(self.numeric.complete(tape, store, u0, &p.anchor_ctx, ab.completion_strategy)?)
        } else {
            None
        };
        let cond = tape.constant(p.anchor_ctx.cond.clone());
        let cond = tape.slice(cond, 0, 0, l)?;
        let latent = match &traj {
            Some(t) => tape.slice(t.states, 0, 0, l)?,
            None => tape.constant(Tensor::zeros(&[l, self.numeric.d_hidden])),
        };
        let carrier = tape.concat(&[cond, latent], 1)?;
        self.agents[1].step(tape, store, carrier, &mut mem, &self.gate)?;

        let fused = self.numeric.fuse(tape, store, e_ext, traj.as_ref())?;
        let z_obs = tape.slice(fused.z, 0, 0, l)?;
        self.agents[2].step(tape, store, z_obs, &mut mem, &self.gate)?;

        let logits = self.router.scores(tape, store, &p.features, Some(mem.read()))?;
        let decoded = match &traj {
            Some(t) => {
                let d = self.numeric.decode(tape, t)?;
                let d = tape.scale(d, p.anchor_ctx.ref_scale)?;
                Some(tape.add_scalar(d, p.anchor_ctx.ref_mean)?)
            }
            None => None,
        };
        let mut ctx = ToolContext::new(self.task(), l, h, self.dims.channels, &p.norm);
        ctx.classes = self.dims.classes;
        ctx.mask = p.window.mask.as_ref();
        ctx.priors = Some(&p.priors);
        ctx.anchors = Some(&p.anchors);
        ctx.fused = Some(fused.z);
        ctx.trajectory = decoded;
        ctx.noise_seed = noise_seed;
        let input = tape.constant(p.x_norm.clone());
        let execution =
            execute(tape, store, &self.tools, self.chains.chains(), logits, input, &ctx, &p.window, &self.cfg.executor)?;
        Ok(Forward {
            execution,
            memory_initial: mem.initial,
            memory_final: mem.read(),
            memory_log: mem.update_log.clone(),
            decoded,
            gate_values: fused.gate_values,
            completion: traj.map(|t| (t.strategy, t.steps_used)),
        })
    }

    fn verify_context<'a>(&'a self, p: &'a Prepared) -> VerifyContext<'a> {
        VerifyContext {
            task: self.task(),
            window: &p.window,
            anchors: Some(&p.anchors),
            priors: Some(&p.priors),
            pred_len: self.horizon(),
            classes: self.dims.classes,
            majority_class: self.majority_class,
            cfg: &self.cfg.executor.verify,
        }
    }

    fn candidate(&self, p: &Prepared) -> (Result<Tensor>, Option<Forward>, Tape) {
        let mut tape = Tape::new();
        match self.forward(&mut tape, p, 0) {
            Ok(f) => {
                let value = match &f.execution.output {
                    Ok(o) => Ok(tape.value(o.value).clone()),
                    Err(e) => Err(Error::Contract(e.to_string())),
                };
                (value, Some(f), tape)
            }
            Err(e) => (Err(e), None, tape),
        }
    }

    /// Evaluation-mode prediction followed by verification; never fails.
    pub fn predict(&self, p: &Prepared) -> WindowResult {
        let (candidate, fwd, tape) = self.candidate(p);
        let mut recompute = || self.candidate(p).0;
        let prediction = verify(candidate, Some(&mut recompute), &self.verify_context(p));
        let (decision, traces, decoded, gate_mean) = match &fwd {
            Some(f) => (
                Some(f.execution.decision.clone()),
                f.execution.traces.clone(),
                f.decoded.map(|d| tape.value(d).data().to_vec()),
                Some(crate::stats::mean(&f.gate_values)),
            ),
            None => (None, Vec::new(), None, None),
        };
        WindowResult { prediction, decision, traces, decoded, gate_mean, anchors: p.anchors.anchors.len(), origin: p.origin }
    }

    /// Predictions for many windows on the configured worker count, in input order.
    pub fn predict_all(&self, prepared: &[Prepared]) -> Result<Vec<WindowResult>> {
        let pool = worker_pool(self.cfg.workers)?;
        Ok(pool.install(|| prepared.par_iter().map(|p| self.predict(p)).collect()))
    }
}

/// Verified output of one window with its routing and trajectory diagnostics.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub prediction: VerifiedPrediction,
    pub decision: Option<RoutingDecision>,
    pub traces: Vec<ChainTrace>,
    pub decoded: Option<Vec<f64>>,
    pub gate_mean: Option<f64>,
    pub anchors: usize,
    pub origin: AnchorOrigin,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;
    use crate::data::{build_dataset, SynthKind};

    fn small(task: Task) -> RunConfig {
        let mut cfg = RunConfig { task, ..RunConfig::default() };
        cfg.data.synthetic = Some(SyntheticConfig { rows: 300, ..SyntheticConfig::default() });
        cfg.data.seq_len = 32;
        cfg.data.pred_len = 16;
        cfg.data.train_stride = 16;
        cfg.data.eval_stride = Some(16);
        cfg.model.d_model = 8;
        cfg.model.d_memory = 8;
        cfg.model.hidden_dim = 8;
        cfg.model.d_ff = 8;
        cfg.model.n_heads = 2;
        cfg.model.e_layers = 1;
        cfg.model.patch_len = 8;
        cfg.model.stride = 4;
        cfg.model.moving_avg = 5;
        cfg.model.vae_hidden = 8;
        cfg.model.vae_latent = 4;
        cfg.model.router_hidden = 8;
        cfg
    }

    fn build(cfg: &RunConfig) -> (Model, Vec<Prepared>) {
        let ds = build_dataset(cfg).unwrap();
        let dims = TaskDims { seq_len: cfg.data.seq_len, pred_len: cfg.data.pred_len, channels: ds.channels(), classes: ds.classes() };
        let model = Model::new(cfg, dims).unwrap();
        let prepared = prepare_windows(cfg, &ds.test).unwrap();
        (model, prepared)
    }

    #[test]
    fn every_task_predicts_task_shapes() {
        for task in Task::ALL {
            let mut cfg = small(task);
            if task == Task::Detect {
                cfg.data.synthetic.as_mut().unwrap().signal =
                    SynthKind::SpikeAnomaly { period: 12.0, amplitude: 1.0, positions: vec![40, 100], magnitude: 5.0, noise: 0.0 };
            }
            if task == Task::Classify {
                cfg.data.synthetic.as_mut().unwrap().samples = 20;
            }
            let (model, prepared) = build(&cfg);
            let r = model.predict(&prepared[0]);
            let want = match task {
                Task::Forecast => vec![16, 1],
                Task::Impute => vec![32, 1],
                Task::Classify => vec![4],
                Task::Detect => vec![32],
            };
            assert_eq!(r.prediction.value.shape(), want.as_slice(), "{task}");
            assert!(r.prediction.value.all_finite());
            assert!(r.decision.is_some(), "{task}");
        }
    }

    #[test]
    fn numeric_off_means_no_trajectory() {
        let mut cfg = small(Task::Forecast);
        cfg.ablation.enable_numeric_reasoner = false;
        let (model, prepared) = build(&cfg);
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &prepared[0], 0).unwrap();
        assert!(f.decoded.is_none());
        assert!(f.gate_values.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn visual_off_gives_empty_anchor_set() {
        let mut cfg = small(Task::Forecast);
        cfg.ablation.enable_visual_reasoner = false;
        let (model, prepared) = build(&cfg);
        assert!(prepared.iter().all(|p| p.anchors.is_empty() && p.origin == AnchorOrigin::Disabled));
        assert!(prepared[0].anchor_ctx.cond.data().iter().all(|&v| v == 0.0));
        assert!(model.predict(&prepared[0]).prediction.value.all_finite());
    }

    #[test]
    fn mlp_heads_replace_tools() {
        let mut cfg = small(Task::Forecast);
        cfg.ablation.enable_tools = false;
        let (model, prepared) = build(&cfg);
        assert_eq!(model.chains.len(), 1);
        assert_eq!(model.chains.chains()[0].id(), "mlp_forecast");
        assert_eq!(model.predict(&prepared[0]).prediction.value.shape(), &[16, 1]);
    }

    #[test]
    fn disabled_tool_drops_default_chains() {
        let mut cfg = small(Task::Forecast);
        cfg.tools.unavailable = vec!["patch_transformer".into()];
        let (model, _) = build(&cfg);
        let ids: Vec<String> = model.chains.chains().iter().map(|c| c.id()).collect();
        assert_eq!(ids, vec!["ode_reconstruct".to_string()]);
    }

    #[test]
    fn prediction_is_deterministic_across_workers() {
        let mut cfg = small(Task::Forecast);
        let (model, prepared) = build(&cfg);
        let a: Vec<Vec<f64>> = model.predict_all(&prepared).unwrap().iter().map(|r| r.prediction.value.data().to_vec()).collect();
        cfg.workers = 3;
        let (model, prepared) = build(&cfg);
        let b: Vec<Vec<f64>> = model.predict_all(&prepared).unwrap().iter().map(|r| r.prediction.value.data().to_vec()).collect();
        assert_eq!(a, b);
    }
}
