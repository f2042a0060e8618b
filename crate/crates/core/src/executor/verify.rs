use serde::{Deserialize, Serialize};

use super::fallback;
use crate::analyzer::PriorBundle;
use crate::data::Task;
use crate::error::Result;
use crate::reasoner::visual::AnchorSet;
use crate::stats;
use crate::{Tensor, TimeSeriesWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Envelope half-width in channel standard deviations.
    pub envelope_sigma: f64,
    /// Width of the soft band beyond the envelope, in channel standard deviations.
    pub soft_margin: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { envelope_sigma: 3.0, soft_margin: 1.0 }
    }
}

/// Everything the verifier needs besides the candidate, all in data units.
#[derive(Debug, Clone, Copy)]
pub struct VerifyContext<'a> {
    pub task: Task,
    pub window: &'a TimeSeriesWindow,
    pub anchors: Option<&'a AnchorSet>,
    pub priors: Option<&'a PriorBundle>,
    pub pred_len: usize,
    pub classes: usize,
    pub majority_class: usize,
    pub cfg: &'a VerifyConfig,
}

impl VerifyContext<'_> {
    /// Required output shape.
    pub fn shape(&self) -> Vec<usize> {
        let (l, d) = (self.window.len(), self.window.channels());
        match self.task {
            Task::Forecast => vec![self.pred_len, d],
            Task::Impute => vec![l, d],
            Task::Classify => vec![self.classes],
            Task::Detect => vec![l],
        }
    }

    fn fallback(&self) -> Result<Tensor> {
        match self.task {
            Task::Forecast => fallback::repeat_last(self.window, self.pred_len),
            Task::Impute => Ok(fallback::interpolate(self.window)),
            Task::Classify => fallback::majority_logits(self.classes, self.majority_class),
            Task::Detect => Ok(fallback::zscore(self.window)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifiedPrediction {
    #[serde(skip)]
    pub value: Tensor,
    pub corrections: Vec<String>,
    pub fallback_used: bool,
}

/// Coerce to the required shape: truncate, or pad by repeating the last row. `None` when
/// the candidate cannot be mapped (wrong width, empty, or a resized logit vector).
fn coerce(t: &Tensor, want: &[usize], resize: bool, notes: &mut Vec<String>) -> Option<Tensor> {
    let s = t.shape();
    if s == want {
        return Some(t.clone());
    }
    let (rows, width) = if want.len() == 1 {
        let vector = s.len() == 1 || (s.len() == 2 && (s[0] == 1 || s[1] == 1));
        (vector.then_some(t.numel())?, 1)
    } else {
        if s.len() != 2 || s[1] != want[1] {
            return None;
        }
        (s[0], want[1])
    };
    let target = want[0];
    if rows == 0 || (rows != target && !resize) {
        return None;
    }
    let mut data = t.data().to_vec();
    if rows > target {
        data.truncate(target * width);
        notes.push(format!("truncated {rows} rows to {target}"));
    } else if rows < target {
        let last = data[(rows - 1) * width..].to_vec();
        for _ in rows..target {
            data.extend_from_slice(&last);
        }
        notes.push(format!("padded {rows} rows to {target} by repeating the last"));
    } else {
        notes.push(format!("reshaped {s:?} to {want:?}"));
    }
    Tensor::new(want, data).ok()
}

struct Envelope {
    lo: Vec<f64>,
    hi: Vec<f64>,
    margin: Vec<f64>,
}

/// Bounds for each output cell: an envelope through the anchors (shifted to each
/// channel's level) of half-width `envelope_sigma · std_c`, or the history range widened
/// by the same amount when there are no usable anchors.
fn envelope(ctx: &VerifyContext, rows: usize, offset: usize) -> Envelope {
    let w = ctx.window;
    let d = w.channels();
    let moments: Vec<(f64, f64, f64, f64)> = (0..d)
        .map(|c| {
            let obs = w.observed(c);
            if obs.is_empty() {
                return (0.0, 1.0, 0.0, 0.0);
            }
            (stats::mean(&obs), stats::std(&obs).max(1e-8), stats::min(&obs), stats::max(&obs))
        })
        .collect();
    let ref_mean = ctx
        .priors
        .map(|p| p.reference_stats.mean)
        .unwrap_or_else(|| moments.iter().map(|m| m.0).sum::<f64>() / d as f64);
    let anchors: Vec<(f64, f64)> = ctx
        .anchors
        .map(|a| a.anchors.iter().filter(|a| a.v.is_finite()).map(|a| (a.t as f64, a.v)).collect())
        .unwrap_or_default();
    let k = ctx.cfg.envelope_sigma;
    let mut env = Envelope { lo: Vec::with_capacity(rows * d), hi: Vec::with_capacity(rows * d), margin: Vec::new() };
    for r in 0..rows {
        let t = (r + offset) as f64;
        let centre = interpolate(&anchors, t);
        for &(mean, std, mn, mx) in &moments {
            let (lo, hi) = match centre {
                Some(a) => {
                    let m = a - ref_mean + mean;
                    (m - k * std, m + k * std)
                }
                None => (mn - k * std, mx + k * std),
            };
            env.lo.push(lo);
            env.hi.push(hi);
            env.margin.push(ctx.cfg.soft_margin.max(1e-6) * std);
        }
    }
    env
}

/// Piecewise-linear through `(t, v)` points sorted by time, held beyond the ends.
fn interpolate(points: &[(f64, f64)], t: f64) -> Option<f64> {
    let first = points.first()?;
    let last = points.last()?;
    if t <= first.0 {
        return Some(first.1);
    }
    if t >= last.0 {
        return Some(last.1);
    }
    let i = points.windows(2).position(|w| w[0].0 <= t && t <= w[1].0)?;
    let (a, b) = (points[i], points[i + 1]);
    Some(if b.0 > a.0 { a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0) } else { a.1 })
}

/// `bound ± m·tanh(excess/m)` for values beyond `[lo − m, hi + m]`; a fixed point on its own
/// output since the result lies within that band.
fn soft_project(y: f64, lo: f64, hi: f64, m: f64) -> f64 {
    if y > hi + m {
        hi + m * ((y - hi) / m).tanh()
    } else if y < lo - m {
        lo + m * ((y - lo) / m).tanh()
    } else {
        y
    }
}

/// Shape correction, one recompute then fallback on failure or non-finite output,
/// constraint projection and task-specific clean-up. Never fails.
pub fn verify(
    candidate: Result<Tensor>,
    recompute: Option<&mut dyn FnMut() -> Result<Tensor>>,
    ctx: &VerifyContext,
) -> VerifiedPrediction {
    let want = ctx.shape();
    let resize = ctx.task != Task::Classify;
    let mut notes = Vec::new();
    let accept = |c: Result<Tensor>, notes: &mut Vec<String>| -> std::result::Result<Tensor, String> {
        let t = c.map_err(|e| e.to_string())?;
        let t = coerce(&t, &want, resize, notes).ok_or_else(|| format!("cannot coerce shape {:?} to {want:?}", t.shape()))?;
        if !t.all_finite() {
            return Err("non-finite values".into());
        }
        Ok(t)
    };
    let mut fallback_used = false;
    let mut value = match accept(candidate, &mut notes) {
        Ok(t) => t,
        Err(first) => {
            let retried = recompute.map(|f| accept(f(), &mut notes));
            match retried {
                Some(Ok(t)) => {
                    notes.push(format!("recomputed after: {first}"));
                    t
                }
                other => {
                    let why = match other {
                        Some(Err(e)) => format!("{first}; recompute: {e}"),
                        _ => first,
                    };
                    notes.push(format!("fallback after: {why}"));
                    fallback_used = true;
                    match ctx.fallback() {
                        Ok(t) if t.shape() == want.as_slice() && t.all_finite() => t,
                        _ => Tensor::zeros(&want),
                    }
                }
            }
        }
    };
    match ctx.task {
        Task::Forecast | Task::Impute => {
            let (rows, offset) = if ctx.task == Task::Forecast { (ctx.pred_len, ctx.window.len()) } else { (ctx.window.len(), 0) };
            let env = envelope(ctx, rows, offset);
            let mut moved = 0;
            for (i, y) in value.data_mut().iter_mut().enumerate() {
                let p = soft_project(*y, env.lo[i], env.hi[i], env.margin[i]);
                if p != *y {
                    moved += 1;
                    *y = p;
                }
            }
            if moved > 0 {
                notes.push(format!("projected {moved} values into the anchor envelope"));
            }
            if ctx.task == Task::Impute {
                let d = ctx.window.channels();
                let mut restored = 0;
                for (i, y) in value.data_mut().iter_mut().enumerate() {
                    let (t, c) = (i / d, i % d);
                    let x = ctx.window.get(t, c);
                    if ctx.window.is_observed(t, c) && y.to_bits() != x.to_bits() {
                        *y = x;
                        restored += 1;
                    }
                }
                if restored > 0 {
                    notes.push(format!("restored {restored} observed cells"));
                }
            }
        }
        Task::Detect => {
            let mut clipped = 0;
            for y in value.data_mut() {
                if *y < 0.0 {
                    *y = 0.0;
                    clipped += 1;
                }
            }
            if clipped > 0 {
                notes.push(format!("clipped {clipped} negative scores"));
            }
        }
        Task::Classify => {}
    }
    VerifiedPrediction { value, corrections: notes, fallback_used }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::reasoner::visual::{Anchor, AnchorExtras};

    fn window() -> TimeSeriesWindow {
        let v: Vec<f64> = (0..20).flat_map(|t| [(t as f64 * 0.5).sin(), 2.0 + (t as f64 * 0.5).cos()]).collect();
        TimeSeriesWindow::new(Tensor::new(&[20, 2], v).unwrap()).unwrap()
    }

    fn ctx<'a>(w: &'a TimeSeriesWindow, task: Task, cfg: &'a VerifyConfig) -> VerifyContext<'a> {
        VerifyContext { task, window: w, anchors: None, priors: None, pred_len: 4, classes: 3, majority_class: 2, cfg }
    }

    #[test]
    fn in_bounds_candidate_is_untouched() {
        let w = window();
        let cfg = VerifyConfig::default();
        let y = Tensor::new(&[4, 2], vec![0.1, 2.0, 0.2, 2.1, 0.0, 1.9, -0.1, 2.2]).unwrap();
        let v = verify(Ok(y.clone()), None, &ctx(&w, Task::Forecast, &cfg));
        assert_eq!(v.value, y);
        assert!(v.corrections.is_empty());
        assert!(!v.fallback_used);
    }

    #[test]
    fn nan_triggers_fallback() {
        let w = window();
        let cfg = VerifyConfig::default();
        let y = Tensor::new(&[4, 2], vec![f64::NAN, 2.0, 0.2, 2.1, 0.0, 1.9, -0.1, 2.2]).unwrap();
        let v = verify(Ok(y), None, &ctx(&w, Task::Forecast, &cfg));
        assert!(v.fallback_used);
        assert!(v.value.all_finite());
        assert_eq!(v.value.row(0), w.values.row(19));
    }

    #[test]
    fn recompute_is_tried_once() {
        let w = window();
        let cfg = VerifyConfig::default();
        let mut calls = 0;
        let mut again = || {
            calls += 1;
            Ok(Tensor::zeros(&[4, 2]).map(|_| 1.0))
        };
        let v = verify(Err(Error::Contract("boom".into())), Some(&mut again), &ctx(&w, Task::Forecast, &cfg));
        assert_eq!(calls, 1);
        assert!(!v.fallback_used);
        assert!(v.corrections[0].contains("recomputed"));
    }

    #[test]
    fn short_forecast_is_padded() {
        let w = window();
        let cfg = VerifyConfig::default();
        let y = Tensor::new(&[3, 2], vec![0.1, 2.0, 0.2, 2.1, 0.3, 1.9]).unwrap();
        let v = verify(Ok(y), None, &ctx(&w, Task::Forecast, &cfg));
        assert_eq!(v.value.shape(), &[4, 2]);
        assert_eq!(v.value.row(3), &[0.3, 1.9]);
        assert!(v.corrections[0].contains("padded"));
    }

    #[test]
    fn outliers_are_projected_idempotently() {
        let w = window();
        let cfg = VerifyConfig::default();
        let mut a = AnchorSet::empty(Task::Forecast);
        a.anchors = vec![Anchor { t: 21, v: 1.0, tau: 1, label: "peak".into() }];
        a.extras = AnchorExtras::None;
        let mut c = ctx(&w, Task::Forecast, &cfg);
        c.anchors = Some(&a);
        let y = Tensor::new(&[4, 2], vec![1e6, 2.0, -1e6, 2.1, 0.0, 1.9, 0.1, 2.2]).unwrap();
        let v1 = verify(Ok(y), None, &c);
        assert!(v1.value.data()[0] < 20.0 && v1.value.data()[2] > -20.0);
        let v2 = verify(Ok(v1.value.clone()), None, &c);
        assert_eq!(v1.value, v2.value);
        assert!(v2.corrections.is_empty());
    }

    #[test]
    fn impute_restores_observed_and_detect_clips() {
        let mut w = window();
        let mut m = crate::data::Mask::empty(20, 2);
        m.set(3, 1, true);
        w.mask = Some(m);
        let cfg = VerifyConfig::default();
        let v = verify(Ok(Tensor::full(&[20, 2], 0.5)), None, &ctx(&w, Task::Impute, &cfg));
        for t in 0..20 {
            for c in 0..2 {
                let want = if (t, c) == (3, 1) { 0.5 } else { w.get(t, c) };
                assert_eq!(v.value.row(t)[c], want);
            }
        }
        let s = verify(Ok(Tensor::from_vec(vec![-1.0; 20])), None, &ctx(&w, Task::Detect, &cfg));
        assert!(s.value.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn classification_shape_fallback() {
        let w = window();
        let cfg = VerifyConfig::default();
        let v = verify(Ok(Tensor::from_vec(vec![0.3; 5])), None, &ctx(&w, Task::Classify, &cfg));
        assert!(v.fallback_used);
        assert_eq!(v.value.data(), &[0.0, 0.0, 1.0]);
    }
}
