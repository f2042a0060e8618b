//! Deterministic signal-processing substitute for the VLM.

use super::anchor::{enforce, time_range, value_bound, Anchor, AnchorExtras, AnchorSet, AnomalyScore, ImputedValue, TauMap};
use crate::analyzer::{compute_statistics, AnalyzerConfig, PriorBundle, SemanticTag};
use crate::data::Task;
use crate::error::Result;
use crate::{stats, TimeSeriesWindow};

pub const ORACLE_CONFIDENCE: f64 = 0.99;
const SMOOTHING: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Peak,
    Valley,
}

fn extrema(s: &[f64], range: std::ops::Range<usize>) -> Vec<(usize, Kind)> {
    range
        .filter(|&t| t >= 1 && t + 1 < s.len())
        .filter_map(|t| {
            if s[t] > s[t - 1] && s[t] >= s[t + 1] {
                Some((t, Kind::Peak))
            } else if s[t] < s[t - 1] && s[t] <= s[t + 1] {
                Some((t, Kind::Valley))
            } else {
                None
            }
        })
        .collect()
}

fn inflections(s: &[f64], range: std::ops::Range<usize>) -> Vec<usize> {
    let d2 = |t: usize| s[t + 1] - 2.0 * s[t] + s[t - 1];
    range.filter(|&t| t >= 2 && t + 1 < s.len()).filter(|&t| d2(t - 1) * d2(t) < 0.0).collect()
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting; `None` if singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least-squares `x_t ≈ b·t + s[t mod p]`; returns `(b, s)`.
pub fn seasonal_trend_fit(xs: &[f64], period: usize) -> Option<(f64, Vec<f64>)> {
    let p = period;
    if p == 0 || xs.len() < p + 2 {
        return None;
    }
    let n = p + 1;
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    for (t, &x) in xs.iter().enumerate() {
        let tf = t as f64;
        let ph = 1 + t % p;
        ata[0][0] += tf * tf;
        ata[0][ph] += tf;
        ata[ph][0] += tf;
        ata[ph][ph] += 1.0;
        atb[0] += tf * x;
        atb[ph] += x;
    }
    let sol = solve(ata, atb)?;
    Some((sol[0], sol[1..].to_vec()))
}

/// Trend-plus-cycle extension of the reference series over `0..len`.
pub fn extrapolate(reference: &[f64], period: Option<usize>, len: usize) -> Vec<f64> {
    if let Some((b, s)) = period.and_then(|p| seasonal_trend_fit(reference, p)) {
        let p = s.len();
        return (0..len).map(|t| b * t as f64 + s[t % p]).collect();
    }
    let ts: Vec<f64> = (0..reference.len()).map(|t| t as f64).collect();
    let b = stats::slope_at(&ts, reference);
    let a = stats::mean(reference) - b * stats::mean(&ts);
    (0..len).map(|t| a + b * t as f64).collect()
}

/// Ranked candidates: must-keep points, then extrema by prominence, then inflections.
fn pick(tiers: Vec<Vec<Anchor>>, n: usize) -> Vec<Anchor> {
    let mut out: Vec<Anchor> = Vec::new();
    for tier in tiers {
        for a in tier {
            if out.len() >= n {
                break;
            }
            if !out.iter().any(|b| b.t == a.t) {
                out.push(a);
            }
        }
    }
    out.sort_by_key(|a| a.t);
    out
}

fn by_prominence(mut xs: Vec<Anchor>, center: f64) -> Vec<Anchor> {
    xs.sort_by(|a, b| (b.v - center).abs().total_cmp(&(a.v - center).abs()).then(a.t.cmp(&b.t)));
    xs
}

fn anchor(t: usize, v: f64, label: &str, tau: &TauMap) -> Anchor {
    Anchor { t, v, tau: tau.tau(label), label: label.to_string() }
}

/// Oracle anchors from an existing prior bundle.
pub fn oracle_anchors(
    window: &TimeSeriesWindow,
    bundle: &PriorBundle,
    task: Task,
    anchor_range: (usize, usize),
    tau: &TauMap,
    max_anchors: usize,
) -> AnchorSet {
    let l = window.len();
    let reference = &bundle.reference;
    let (lo, hi) = anchor_range;
    let n = (bundle.anchor_density_hint.round() as usize).clamp(lo, hi.max(lo)).min(max_anchors);
    let center = stats::mean(reference);
    let mut extras = AnchorExtras::None;
    let anchors = if task == Task::Forecast {
        let h = window.horizon;
        let ext = extrapolate(reference, bundle.period(), l + h + 1);
        let range = l..l + h;
        let must = vec![anchor(l, ext[l], "start", tau), anchor(l + h - 1, ext[l + h - 1], "end", tau)];
        let ext_center = stats::mean(&ext[range.clone()]);
        let ex: Vec<Anchor> = extrema(&ext, range.clone())
            .into_iter()
            .map(|(t, k)| anchor(t, ext[t], if k == Kind::Peak { "peak" } else { "valley" }, tau))
            .collect();
        let inf = inflections(&ext, range).into_iter().map(|t| anchor(t, ext[t], "inflection", tau)).collect();
        if h == 0 {
            Vec::new()
        } else {
            pick(vec![must, by_prominence(ex, ext_center), inf], n)
        }
    } else {
        let smooth = stats::moving_average(reference, SMOOTHING);
        let periodic = bundle.has_tag(SemanticTag::Periodic);
        let (peak, valley) = match task {
            Task::Classify if periodic => ("period_peak", "period_valley"),
            Task::Detect => ("normal", "normal"),
            _ => ("peak", "valley"),
        };
        let edge = |label: &str| if task == Task::Detect { "normal".to_string() } else { label.to_string() };
        let mut must = vec![anchor(0, reference[0], &edge("start"), tau), anchor(l - 1, reference[l - 1], &edge("end"), tau)];
        let std = stats::std(reference);
        match task {
            Task::Impute => {
                let missing = window.mask.as_ref().map(|m| m.missing_steps()).unwrap_or_default();
                let observed: Vec<usize> = (0..l).filter(|t| missing.binary_search(t).is_err()).collect();
                let mut boundary = Vec::new();
                for &t in &missing {
                    if t > 0 && missing.binary_search(&(t - 1)).is_err() {
                        boundary.push(t - 1);
                    }
                    if t + 1 < l && missing.binary_search(&(t + 1)).is_err() {
                        boundary.push(t + 1);
                    }
                }
                must.extend(boundary.into_iter().map(|t| anchor(t, reference[t], "observed", tau)));
                let imputed = missing
                    .iter()
                    .map(|&t| {
                        let before = observed.first().is_some_and(|&o| o < t);
                        let after = observed.last().is_some_and(|&o| o > t);
                        let reason = if before && after { "interpolation" } else { "extrapolation" };
                        ImputedValue { t, v: reference[t], reason: reason.into() }
                    })
                    .collect();
                extras = AnchorExtras::Imputed(imputed);
            }
            Task::Detect => {
                let z: Vec<f64> = if std > 1e-12 { reference.iter().map(|v| (v - center).abs() / std).collect() } else { vec![0.0; l] };
                let zmax = stats::max(&z);
                let scores = z
                    .iter()
                    .enumerate()
                    .map(|(t, &zt)| AnomalyScore {
                        t,
                        score: if zmax > 0.0 { zt / zmax } else { 0.0 },
                        reason: if zt > 3.0 { "spike".into() } else { "normal".into() },
                    })
                    .collect();
                let flagged: Vec<Anchor> = (0..l).filter(|&t| z[t] > 3.0).map(|t| anchor(t, reference[t], "anomaly", tau)).collect();
                must.splice(0..0, flagged);
                extras = AnchorExtras::Anomalies(scores);
            }
            Task::Classify => {
                let pattern = if periodic {
                    "periodic"
                } else if bundle.has_tag(SemanticTag::Trending) {
                    "trending"
                } else if bundle.has_tag(SemanticTag::Volatile) {
                    "volatile"
                } else {
                    "stationary"
                };
                extras = AnchorExtras::Pattern(pattern.into());
            }
            Task::Forecast => unreachable!(),
        }
        let ex: Vec<Anchor> = extrema(&smooth, 0..l)
            .into_iter()
            .map(|(t, k)| anchor(t, reference[t], if k == Kind::Peak { peak } else { valley }, tau))
            .collect();
        let inf_label = if task == Task::Detect { "normal" } else { "inflection" };
        let inf = inflections(&smooth, 0..l).into_iter().map(|t| anchor(t, reference[t], inf_label, tau)).collect();
        pick(vec![must, by_prominence(ex, center), inf], n)
    };
    let mut set = AnchorSet { task, anchors, confidence: ORACLE_CONFIDENCE, extras, warnings: Vec::new() };
    if set.anchors.len() < lo {
        set.warnings.push(format!("oracle produced {} anchors, below the requested minimum {lo}", set.anchors.len()));
    }
    enforce(&mut set, time_range(task, l, window.horizon), value_bound(bundle), max_anchors);
    set
}

/// Oracle anchors with default analyzer settings.
pub fn offline_anchor_oracle(window: &TimeSeriesWindow, task: Task, anchor_range: (usize, usize)) -> Result<AnchorSet> {
    let bundle = compute_statistics(window, &AnalyzerConfig::default(), anchor_range)?;
    Ok(oracle_anchors(window, &bundle, task, anchor_range, &TauMap::default(), 20))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine_window(l: usize, h: usize, period: f64, phase: f64) -> TimeSeriesWindow {
        let xs: Vec<f64> = (0..l).map(|t| (TAU * t as f64 / period + phase).sin()).collect();
        let mut w = TimeSeriesWindow::from_series(&xs).unwrap();
        w.horizon = h;
        w
    }

    #[test]
    fn sine_forecast_anchors_hit_analytic_extrema() {
        let (l, h) = (96, 24);
        let w = sine_window(l, h, 12.0, 0.0);
        let set = offline_anchor_oracle(&w, Task::Forecast, (8, 15)).unwrap();
        let truth = |t: usize| (TAU * t as f64 / 12.0).sin();
        let brute: Vec<usize> = (l..l + h).filter(|&t| truth(t) > truth(t - 1) && truth(t) >= truth(t + 1)).collect();
        let peaks: Vec<usize> = set.anchors.iter().filter(|a| a.label == "peak").map(|a| a.t).collect();
        assert_eq!(peaks, brute);
        for a in &set.anchors {
            assert!((a.v - truth(a.t)).abs() < 0.05, "t={} v={} truth={}", a.t, a.v, truth(a.t));
        }
        assert_eq!(set.confidence, ORACLE_CONFIDENCE);
    }

    #[test]
    fn seasonal_fit_recovers_trend_and_cycle() {
        let xs: Vec<f64> = (0..60).map(|t| 0.1 * t as f64 + [1.0, -2.0, 0.5, 0.5][t % 4]).collect();
        let (b, s) = seasonal_trend_fit(&xs, 4).unwrap();
        assert!((b - 0.1).abs() < 1e-9);
        assert!((s[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_detect_scores_are_zero() {
        let w = TimeSeriesWindow::from_series(&[2.0; 64]).unwrap();
        let set = offline_anchor_oracle(&w, Task::Detect, (8, 12)).unwrap();
        match &set.extras {
            AnchorExtras::Anomalies(s) => assert!(s.iter().all(|a| a.score == 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let w = sine_window(64, 0, 9.0, 0.3);
        for task in [Task::Classify, Task::Detect] {
            assert_eq!(offline_anchor_oracle(&w, task, (5, 8)).unwrap(), offline_anchor_oracle(&w, task, (5, 8)).unwrap());
        }
    }

    #[test]
    fn impute_marks_boundaries() {
        let mut w = sine_window(48, 0, 12.0, 0.0);
        let mut m = crate::data::Mask::empty(48, 1);
        m.set(20, 0, true);
        m.set(21, 0, true);
        w.values.data_mut()[20] = 0.0;
        w.values.data_mut()[21] = 0.0;
        w.mask = Some(m);
        let set = offline_anchor_oracle(&w, Task::Impute, (5, 7)).unwrap();
        let obs: Vec<usize> = set.anchors.iter().filter(|a| a.label == "observed").map(|a| a.t).collect();
        assert_eq!(obs, vec![19, 22]);
        match &set.extras {
            AnchorExtras::Imputed(v) => assert_eq!(v.iter().map(|i| i.t).collect::<Vec<_>>(), vec![20, 21]),
            other => panic!("{other:?}"),
        }
    }
}
