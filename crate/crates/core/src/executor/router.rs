use rand::Rng;
use serde::{Deserialize, Serialize};
use tsagent_autodiff::Var;

use crate::analyzer::PriorBundle;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::{ParamStore, Tape, Tensor};

/// Number of non-memory router features: task one-hot plus five prior summaries.
pub const PRIOR_FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum RoutingMode {
    Greedy,
    Ensemble(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mode: RoutingMode,
    pub selected: Vec<usize>,
    pub ensemble_weights: Option<Vec<f64>>,
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Greedy when the top probability reaches `threshold`, otherwise an ensemble over the
/// `min(max_k, n)` most probable chains weighted by a softmax of their scores.
pub fn decide(scores: &[f64], threshold: f64, max_k: usize) -> Result<RoutingDecision> {
    if scores.is_empty() {
        return Err(Error::Registry("no candidate chains".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("router produced non-finite scores".into()));
    }
    let probabilities = softmax(scores);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    let top = probabilities[order[0]];
    let (mode, selected, ensemble_weights) = if top >= threshold {
        (RoutingMode::Greedy, vec![order[0]], None)
    } else {
        let k = max_k.clamp(1, 3).min(scores.len());
        let sel: Vec<usize> = order[..k].to_vec();
        let w = softmax(&sel.iter().map(|&i| scores[i]).collect::<Vec<_>>());
        (RoutingMode::Ensemble(k), sel, Some(w))
    };
    Ok(RoutingDecision { scores: scores.to_vec(), probabilities, mode, selected, ensemble_weights })
}

/// `[one-hot(task) ; slope ; periodicity strength ; mask ratio ; std ; anchor confidence]`.
pub fn prior_features(task: Task, priors: &PriorBundle, anchor_confidence: f64) -> Vec<f64> {
    let mut f = vec![0.0; 4];
    f[task.index()] = 1.0;
    f.extend([
        priors.reference_slope,
        priors.strength(),
        priors.mask_ratio,
        priors.reference_stats.std,
        anchor_confidence,
    ]);
    f.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect()
}

/// Two-layer scorer over prior features and pooled memory; the output layer starts at
/// zero so untrained routing is uniform.
#[derive(Debug, Clone)]
pub struct Router {
    pub hidden: Linear,
    pub head: Linear,
    pub d_memory: usize,
}

impl Router {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_memory: usize, hidden: usize, chains: usize) -> Self {
        Router {
            hidden: Linear::new(store, rng, "router.hidden", PRIOR_FEATURES + d_memory, hidden),
            head: Linear::zeros(store, "router.head", hidden, chains),
            d_memory,
        }
    }

    /// Chain logits `[n]`; `memory` is pooled over rows, zeros when absent.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, features: &[f64], memory: Option<Var>) -> Result<Var> {
        let f = tape.constant(Tensor::from_vec(features.to_vec()));
        let pooled = match memory {
            Some(m) => tape.mean_axis(m, 0)?,
            None => tape.constant(Tensor::zeros(&[self.d_memory])),
        };
        let x = tape.concat(&[f, pooled], 0)?;
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.tanh(h)?;
        self.head.forward(tape, store, h)
    }
}
