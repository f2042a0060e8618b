use rand::Rng;
use tsagent_autodiff::{TensorError, Var};

use super::ode::{CompletionStrategy, OdeConfig};
use crate::analyzer::PriorBundle;
use crate::config::ModelConfig;
use crate::data::normalize::SCALE_FLOOR;
use crate::error::{Error, Result};
use crate::nn::{Linear, MultiHeadAttention};
use crate::reasoner::visual::AnchorSet;
use crate::{ParamStore, Tape, Tensor};

/// Per-window constants derived from the anchors and priors.
#[derive(Debug, Clone)]
pub struct AnchorContext {
    pub seq_len: usize,
    pub pred_len: usize,
    /// Anchor rows, ascending.
    pub rows: Vec<usize>,
    /// `K × 2`: normalized value and direction per anchor; `None` without anchors.
    pub values: Option<Tensor>,
    /// `(L+H) × 2` kernel-weighted anchor summary per row.
    pub cond: Tensor,
    /// `(L+H) × 3`: relative position and a sine/cosine pair at the detected period.
    pub time: Tensor,
    pub ref_mean: f64,
    pub ref_scale: f64,
}

impl AnchorContext {
    pub fn new(anchors: &AnchorSet, bundle: &PriorBundle, seq_len: usize, pred_len: usize, bandwidth: f64) -> Self {
        let n = seq_len + pred_len;
        let ref_mean = bundle.reference_stats.mean;
        let ref_scale = bundle.reference_stats.std.max(SCALE_FLOOR);
        let kept: Vec<_> = anchors.anchors.iter().filter(|a| a.t < n).collect();
        let rows: Vec<usize> = kept.iter().map(|a| a.t).collect();
        let vals: Vec<f64> = kept.iter().flat_map(|a| [(a.v - ref_mean) / ref_scale, a.tau as f64]).collect();
        let mut cond = vec![0.0; n * 2];
        if !rows.is_empty() {
            for t in 0..n {
                let logits: Vec<f64> = rows.iter().map(|&tk| -(t as f64 - tk as f64).abs() / bandwidth).collect();
                let m = crate::stats::max(&logits);
                let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for (k, wk) in w.iter().enumerate() {
                    cond[t * 2] += wk / z * vals[k * 2];
                    cond[t * 2 + 1] += wk / z * vals[k * 2 + 1];
                }
            }
        }
        let period = bundle.period().unwrap_or(n.max(1)) as f64;
        let denom = (n.max(2) - 1) as f64;
        let time = (0..n)
            .flat_map(|t| {
                let a = std::f64::consts::TAU * t as f64 / period;
                [t as f64 / denom, a.sin(), a.cos()]
            })
            .collect();
        AnchorContext {
            seq_len,
            pred_len,
            values: (!rows.is_empty()).then(|| Tensor::new(&[rows.len(), 2], vals).expect("consistent shape")),
            rows,
            cond: Tensor::new(&[n, 2], cond).expect("consistent shape"),
            time: Tensor::new(&[n, 3], time).expect("consistent shape"),
            ref_mean,
            ref_scale,
        }
    }

    pub fn len(&self) -> usize {
        self.seq_len + self.pred_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized latent value back to reference units.
    pub fn decode_value(&self, v: f64) -> f64 {
        v * self.ref_scale + self.ref_mean
    }
}

/// Sequence latent after completion.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    /// `(L+H) × d_h`.
    pub states: Var,
    pub steps_used: usize,
    pub strategy: CompletionStrategy,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    /// `(L+H) × d_model`.
    pub z: Var,
    pub gate_values: Vec<f64>,
}

/// Latent initialisation, anchor-conditioned dynamics and fusion. Coordinate 0 of an anchor
/// latent is the anchor's normalized value, so pinned rows decode to anchor values.
#[derive(Debug, Clone)]
pub struct NumericReasoner {
    pub proj_in: Linear,
    pub mem_in: Linear,
    pub anchor_embed: Linear,
    pub f1: Linear,
    pub f2: Linear,
    pub proj_back: Linear,
    pub gate: Linear,
    pub attn: MultiHeadAttention,
    pub d_hidden: usize,
    pub d_model: usize,
    pub ode: OdeConfig,
}

fn name_step(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(TensorError::Numeric { op }) => Error::Tensor(TensorError::Numeric { op: format!("ode step {step} ({op})") }),
        e => e,
    }
}

impl NumericReasoner {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, ode: OdeConfig) -> Result<Self> {
        let (dm, dh) = (cfg.d_model, cfg.hidden_dim);
        if dh < 2 {
            return Err(Error::Config("hidden_dim must be at least 2".into()));
        }
        ode.steps()?;
        Ok(NumericReasoner {
            proj_in: Linear::new(store, rng, "numeric.proj_in", dm, dh),
            mem_in: Linear::no_bias(store, rng, "numeric.mem_in", cfg.d_memory, dm),
            anchor_embed: Linear::new(store, rng, "numeric.anchor_embed", 2, dh - 1),
            f1: Linear::new(store, rng, "numeric.f1", dh + 5, dh),
            f2: Linear::new(store, rng, "numeric.f2", dh, dh),
            proj_back: Linear::new(store, rng, "numeric.proj_back", dh, dm),
            gate: Linear::new(store, rng, "numeric.gate", 2 * dm, 1),
            attn: MultiHeadAttention::new(store, rng, "numeric.attn", dm, cfg.n_heads),
            d_hidden: dh,
            d_model: dm,
            ode,
        })
    }

    /// `Proj(E + W·M)` over the `L` observed rows, extended to `L+H` by repeating the last row.
    pub fn init_latent(&self, tape: &mut Tape, store: &ParamStore, e: Var, memory: Option<Var>, pred_len: usize) -> Result<Var> {
        let l = tape.shape(e)[0];
        let x = match memory {
            Some(m) => {
                let wm = self.mem_in.forward(tape, store, m)?;
                tape.add(e, wm)?
            }
            None => e,
        };
        let u = self.proj_in.forward(tape, store, x)?;
        if pred_len == 0 {
            return Ok(u);
        }
        let idx: Vec<usize> = (0..l).chain(std::iter::repeat_n(l - 1, pred_len)).collect();
        Ok(tape.embedding(u, &idx)?)
    }

    /// `K × d_h` anchor latents `[v ; W_a[v ; τ] + b_a]`, or `None` without anchors.
    pub fn anchor_latents(&self, tape: &mut Tape, store: &ParamStore, ctx: &AnchorContext) -> Result<Option<Var>> {
        let Some(values) = &ctx.values else {
            return Ok(None);
        };
        let vals = tape.constant(values.clone());
        let v = tape.slice(vals, 1, 0, 1)?;
        let rest = self.anchor_embed.forward(tape, store, vals)?;
        Ok(Some(tape.concat(&[v, rest], 1)?))
    }

    fn dynamics(&self, tape: &mut Tape, store: &ParamStore, u: Var, extra: Var) -> Result<Var> {
        let x = tape.concat(&[u, extra], 1)?;
        let h = self.f1.forward(tape, store, x)?;
        let h = tape.tanh(h)?;
        let o = self.f2.forward(tape, store, h)?;
        Ok(tape.tanh(o)?)
    }

    /// Scatter matrix `(L+H) × K` and keep-mask `(L+H) × 1` for the anchor pull.
    fn pull_operands(&self, ctx: &AnchorContext, lambda: f64) -> (Tensor, Tensor) {
        let (n, k) = (ctx.len(), ctx.rows.len());
        let mut scatter = vec![0.0; n * k];
        let mut keep = vec![1.0; n];
        for (j, &t) in ctx.rows.iter().enumerate() {
            scatter[t * k + j] = lambda;
            keep[t] = 1.0 - lambda;
        }
        (Tensor::new(&[n, k], scatter).expect("shape"), Tensor::new(&[n, 1], keep).expect("shape"))
    }

    /// RK4 over solver time with a soft anchor pull after every step.
    pub fn integrate(&self, tape: &mut Tape, store: &ParamStore, u0: Var, ctx: &AnchorContext) -> Result<LatentTrajectory> {
        let steps = self.ode.steps()?;
        let h = self.ode.step_size;
        let extra = Tensor::new(
            &[ctx.len(), 5],
            (0..ctx.len()).flat_map(|t| ctx.time.row(t).iter().chain(ctx.cond.row(t)).copied().collect::<Vec<_>>()).collect(),
        )?;
        let extra = tape.constant(extra);
        let anchors = self.anchor_latents(tape, store, ctx)?;
        let pull = match anchors {
            Some(ae) if self.ode.anchor_pull > 0.0 => {
                let (s, keep) = self.pull_operands(ctx, self.ode.anchor_pull);
                let s = tape.constant(s);
                let target = tape.matmul(s, ae)?;
                Some((target, tape.constant(keep)))
            }
            _ => None,
        };
        let mut u = u0;
        for step in 1..=steps {
            let advance = |tape: &mut Tape, u: Var| -> Result<Var> {
                let k1 = self.dynamics(tape, store, u, extra)?;
                let a = tape.scale(k1, h / 2.0)?;
                let u2 = tape.add(u, a)?;
                let k2 = self.dynamics(tape, store, u2, extra)?;
                let a = tape.scale(k2, h / 2.0)?;
                let u3 = tape.add(u, a)?;
                let k3 = self.dynamics(tape, store, u3, extra)?;
                let a = tape.scale(k3, h)?;
                let u4 = tape.add(u, a)?;
                let k4 = self.dynamics(tape, store, u4, extra)?;
                let mid = tape.add(k2, k3)?;
                let mid = tape.scale(mid, 2.0)?;
                let s = tape.add(k1, mid)?;
                let s = tape.add(s, k4)?;
                let s = tape.scale(s, h / 6.0)?;
                let mut next = tape.add(u, s)?;
                if let Some((target, keep)) = pull {
                    let kept = tape.mul(next, keep)?;
                    next = tape.add(kept, target)?;
                }
                Ok(next)
            };
            u = advance(tape, u).map_err(|e| name_step(e, step))?;
        }
        Ok(LatentTrajectory { states: u, steps_used: steps, strategy: CompletionStrategy::Ode, trace: Vec::new() })
    }

    /// Fill the sequence latent with the chosen strategy.
    pub fn complete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u0: Var,
        ctx: &AnchorContext,
        strategy: CompletionStrategy,
    ) -> Result<LatentTrajectory> {
        let mut trace = Vec::new();
        let strategy = match strategy {
            CompletionStrategy::Ode => return self.integrate(tape, store, u0, ctx),
            CompletionStrategy::Repeat => {
                return Ok(LatentTrajectory { states: u0, steps_used: 0, strategy, trace });
            }
            CompletionStrategy::Quadratic if knots(ctx).len() < 3 => {
                trace.push("quadratic completion needs three knots; used linear".to_string());
                CompletionStrategy::Linear
            }
            s => s,
        };
        let (wu, wa) = interpolation_weights(ctx, strategy == CompletionStrategy::Quadratic);
        let wu = tape.constant(wu);
        let mut states = tape.matmul(wu, u0)?;
        if let (Some(ae), Some(wa)) = (self.anchor_latents(tape, store, ctx)?, wa) {
            let wa = tape.constant(wa);
            let part = tape.matmul(wa, ae)?;
            states = tape.add(states, part)?;
        }
        Ok(LatentTrajectory { states, steps_used: 0, strategy, trace })
    }

    /// Coordinate 0 of every row, `(L+H)`.
    pub fn decode(&self, tape: &mut Tape, traj: &LatentTrajectory) -> Result<Var> {
        let n = tape.shape(traj.states)[0];
        let c = tape.slice(traj.states, 1, 0, 1)?;
        Ok(tape.reshape(c, &[n])?)
    }

    /// Gate the extended embedding against the projected trajectory, then self-attend.
    /// Without a trajectory the embedding passes through unchanged before attention.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, e_ext: Var, traj: Option<&LatentTrajectory>) -> Result<FusedRepresentation> {
        let n = tape.shape(e_ext)[0];
        let (f, gate_values) = match traj {
            Some(traj) => {
                let p = self.proj_back.forward(tape, store, traj.states)?;
                let cat = tape.concat(&[e_ext, p], 1)?;
                let g = self.gate.forward(tape, store, cat)?;
                let g = tape.sigmoid(g)?;
                let gv = tape.value(g).data().to_vec();
                let ge = tape.mul(e_ext, g)?;
                let ng = tape.neg(g)?;
                let rest = tape.add_scalar(ng, 1.0)?;
                let rp = tape.mul(p, rest)?;
                (tape.add(ge, rp)?, gv)
            }
            None => (e_ext, vec![1.0; n]),
        };
        let a = self.attn.forward(tape, store, f, f)?;
        Ok(FusedRepresentation { z: tape.add(f, a)?, gate_values })
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Row(usize),
    Anchor(usize),
}

/// Horizon knots: the last observed row, then anchors inside the horizon.
fn knots(ctx: &AnchorContext) -> Vec<(usize, Source)> {
    let l = ctx.seq_len;
    let mut out = Vec::new();
    if l > 0 {
        out.push((l - 1, Source::Row(l - 1)));
    }
    out.extend(ctx.rows.iter().enumerate().filter(|&(_, &t)| t >= l).map(|(k, &t)| (t, Source::Anchor(k))));
    out
}

/// `(W_u, W_a)` with `states = W_u·u0 + W_a·anchor_latents`; observed rows stay fixed.
fn interpolation_weights(ctx: &AnchorContext, quadratic: bool) -> (Tensor, Option<Tensor>) {
    let (n, k, l) = (ctx.len(), ctx.rows.len(), ctx.seq_len);
    let mut wu = vec![0.0; n * n];
    let mut wa = vec![0.0; n * k];
    for t in 0..l.min(n) {
        wu[t * n + t] = 1.0;
    }
    let kn = knots(ctx);
    let mut put = |t: usize, src: Source, w: f64| match src {
        Source::Row(r) => wu[t * n + r] += w,
        Source::Anchor(j) => wa[t * k + j] += w,
    };
    for t in l..n {
        let Some(i) = kn.iter().rposition(|&(p, _)| p <= t) else {
            continue;
        };
        if i + 1 == kn.len() {
            put(t, kn[i].1, 1.0);
        } else if quadratic {
            let j0 = i.saturating_sub(1).min(kn.len() - 3);
            let xs: Vec<f64> = (j0..j0 + 3).map(|j| kn[j].0 as f64).collect();
            for a in 0..3 {
                let mut w = 1.0;
                for b in 0..3 {
                    if a != b {
                        w *= (t as f64 - xs[b]) / (xs[a] - xs[b]);
                    }
                }
                put(t, kn[j0 + a].1, w);
            }
        } else {
            let (p0, p1) = (kn[i].0 as f64, kn[i + 1].0 as f64);
            let a = (t as f64 - p0) / (p1 - p0);
            put(t, kn[i].1, 1.0 - a);
            put(t, kn[i + 1].1, a);
        }
    }
    (Tensor::new(&[n, n], wu).expect("shape"), (k > 0).then(|| Tensor::new(&[n, k], wa).expect("shape")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{compute_statistics, AnalyzerConfig};
    use crate::data::Task;
    use crate::reasoner::visual::{Anchor, AnchorExtras};
    use crate::TimeSeriesWindow;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(dm: usize, dh: usize) -> ModelConfig {
        ModelConfig { d_model: dm, d_memory: dm, hidden_dim: dh, n_heads: 2, ..Default::default() }
    }

    fn bundle(l: usize) -> PriorBundle {
        let xs: Vec<f64> = (0..l).map(|t| (t as f64 * 0.5).sin()).collect();
        compute_statistics(&TimeSeriesWindow::from_series(&xs).unwrap(), &AnalyzerConfig::default(), (8, 15)).unwrap()
    }

    fn anchors(pts: &[(usize, f64)]) -> AnchorSet {
        AnchorSet {
            task: Task::Forecast,
            anchors: pts.iter().map(|&(t, v)| Anchor { t, v, tau: 0, label: "peak".into() }).collect(),
            confidence: 0.9,
            extras: AnchorExtras::None,
            warnings: vec![],
        }
    }

    fn setup(dm: usize, dh: usize, ode: OdeConfig) -> (ParamStore, NumericReasoner) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nr = NumericReasoner::new(&mut store, &mut rng, &cfg(dm, dh), ode).unwrap();
        (store, nr)
    }

    #[test]
    fn init_latent_shapes_and_zeros() {
        let (mut store, nr) = setup(8, 6, OdeConfig::default());
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[10, 8]));
        let u = nr.init_latent(&mut tape, &store, e, None, 0).unwrap();
        assert_eq!(tape.shape(u), &[10, 6]);
        let u = nr.init_latent(&mut tape, &store, e, None, 5).unwrap();
        assert_eq!(tape.shape(u), &[15, 6]);
        // zero input and zero bias give a zero latent
        assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
        store.value_mut(nr.proj_in.b.unwrap()).data_mut().fill(0.5);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[4, 8]));
        let u = nr.init_latent(&mut tape, &store, e, None, 2).unwrap();
        assert_eq!(tape.value(u).row(5), tape.value(u).row(3));
    }

    #[test]
    fn hard_pull_decodes_to_anchor_values() {
        let (l, h) = (12, 6);
        let ode = OdeConfig { anchor_pull: 1.0, ..Default::default() };
        let (store, nr) = setup(8, 4, ode);
        let b = bundle(l);
        let set = anchors(&[(13, 0.7), (16, -0.4)]);
        let ctx = AnchorContext::new(&set, &b, l, h, 4.0);
        let mut tape = Tape::new();
        let e = tape.constant(crate::nn::sinusoidal(l, 8));
        let u0 = nr.init_latent(&mut tape, &store, e, None, h).unwrap();
        let traj = nr.integrate(&mut tape, &store, u0, &ctx).unwrap();
        assert_eq!(traj.steps_used, 20);
        let d = nr.decode(&mut tape, &traj).unwrap();
        let d = tape.value(d).data().to_vec();
        assert!((ctx.decode_value(d[13]) - 0.7).abs() < 1e-9);
        assert!((ctx.decode_value(d[16]) + 0.4).abs() < 1e-9);
    }

    #[test]
    fn empty_anchors_condition_to_zero() {
        let ctx = AnchorContext::new(&anchors(&[]), &bundle(8), 8, 4, 4.0);
        assert!(ctx.cond.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeat_and_linear_completion() {
        let (l, h) = (100, 8);
        let (store, nr) = setup(8, 4, OdeConfig::default());
        let b = bundle(l);
        let ctx = AnchorContext::new(&anchors(&[(100, 0.2), (104, -0.6)]), &b, l, h, 4.0);
        let mut tape = Tape::new();
        let e = tape.constant(crate::nn::sinusoidal(l, 8));
        let u0 = nr.init_latent(&mut tape, &store, e, None, h).unwrap();
        let rep = nr.complete(&mut tape, &store, u0, &ctx, CompletionStrategy::Repeat).unwrap();
        let rv = tape.value(rep.states).clone();
        for t in l..l + h {
            assert_eq!(rv.row(t), rv.row(l - 1));
        }
        let lin = nr.complete(&mut tape, &store, u0, &ctx, CompletionStrategy::Linear).unwrap();
        let ae = nr.anchor_latents(&mut tape, &store, &ctx).unwrap().unwrap();
        let (lv, av) = (tape.value(lin.states).clone(), tape.value(ae).clone());
        for c in 0..4 {
            assert!((lv.at(&[102, c]) - (av.at(&[0, c]) + av.at(&[1, c])) / 2.0).abs() < 1e-12);
            assert_eq!(lv.at(&[50, c]), rv.at(&[50, c]));
        }
    }

    #[test]
    fn quadratic_on_collinear_knots_matches_linear() {
        let (l, h) = (20, 12);
        let (mut store, nr) = setup(8, 3, OdeConfig::default());
        // anchor latent = [v, 0, 0] and a last observed row on the same line
        nr.anchor_embed.zero_out(&mut store);
        nr.proj_in.zero_out(&mut store);
        let b = bundle(l);
        let m = b.reference_stats.mean;
        let s = b.reference_stats.std;
        let ctx = AnchorContext::new(&anchors(&[(23, m + 4.0 * 0.1 * s), (27, m + 8.0 * 0.1 * s), (31, m + 12.0 * 0.1 * s)]), &b, l, h, 4.0);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[l, 8]));
        let u0 = nr.init_latent(&mut tape, &store, e, None, h).unwrap();
        let q = nr.complete(&mut tape, &store, u0, &ctx, CompletionStrategy::Quadratic).unwrap();
        let li = nr.complete(&mut tape, &store, u0, &ctx, CompletionStrategy::Linear).unwrap();
        assert!(q.trace.is_empty());
        for (a, b) in tape.value(q.states).data().iter().zip(tape.value(li.states).data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let few = AnchorContext::new(&anchors(&[(25, m)]), &b, l, h, 4.0);
        let q = nr.complete(&mut tape, &store, u0, &few, CompletionStrategy::Quadratic).unwrap();
        assert_eq!(q.strategy, CompletionStrategy::Linear);
        assert_eq!(q.trace.len(), 1);
    }

    #[test]
    fn fuse_gate_saturation() {
        let (l, h, dm) = (6, 3, 8);
        let (mut store, nr) = setup(dm, 4, OdeConfig::default());
        nr.attn.o.zero_out(&mut store);
        nr.gate.zero_out(&mut store);
        store.value_mut(nr.gate.b.unwrap()).data_mut()[0] = 1e3;
        let ctx = AnchorContext::new(&anchors(&[]), &bundle(l), l, h, 4.0);
        let mut tape = Tape::new();
        let e = tape.constant(crate::nn::sinusoidal(l, dm));
        let zeros = tape.constant(Tensor::zeros(&[h, dm]));
        let e_ext = tape.concat(&[e, zeros], 0).unwrap();
        let u0 = nr.init_latent(&mut tape, &store, e, None, h).unwrap();
        let traj = nr.integrate(&mut tape, &store, u0, &ctx).unwrap();
        let fused = nr.fuse(&mut tape, &store, e_ext, Some(&traj)).unwrap();
        assert_eq!(tape.shape(fused.z), &[l + h, dm]);
        assert_eq!(tape.value(fused.z).data(), tape.value(e_ext).data());
        assert!(fused.gate_values.iter().all(|&g| g == 1.0));
    }
}
