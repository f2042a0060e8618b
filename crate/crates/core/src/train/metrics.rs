use serde::{Deserialize, Serialize};
use tsagent_autodiff::TensorError;

use crate::error::{Error, Result};

fn shape_err(op: &'static str, a: usize, b: usize) -> Error {
    Error::Tensor(TensorError::Shape { op, detail: format!("{a} vs {b} elements") })
}

/// Mean squared and mean absolute error over all elements.
pub fn mse_mae(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() {
        return Err(shape_err("mse_mae", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::Contract("mse_mae of empty input".into()));
    }
    let n = pred.len() as f64;
    let (se, ae) = pred.iter().zip(target).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let d = p - t;
        (se + d * d, ae + d.abs())
    });
    Ok((se / n, ae / n))
}

/// Percentage of matching labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err("accuracy", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Contract("accuracy of empty input".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Index of the largest value, first on ties.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, &v)| if v > xs[best] { i } else { best })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn of(pred: &[bool], labels: &[bool]) -> Self {
        let mut c = Counts::default();
        for (&p, &l) in pred.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `(precision, recall, f1)`; zero denominators give zero.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMetrics {
    pub threshold: f64,
    pub point_adjust: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub raw: Counts,
    pub adjusted: Counts,
    pub raw_f1: f64,
}

/// Mark every labelled segment that contains at least one prediction as fully predicted.
pub fn point_adjust(pred: &[bool], labels: &[bool]) -> Vec<bool> {
    let mut out = pred.to_vec();
    let mut t = 0;
    while t < labels.len() {
        if !labels[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < labels.len() && labels[t] {
            t += 1;
        }
        if pred[start..t].iter().any(|&p| p) {
            out[start..t].iter_mut().for_each(|p| *p = true);
        }
    }
    out
}

/// Binarize at `score >= threshold`, point-adjust, then score.
pub fn point_adjust_f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<AnomalyMetrics> {
    if scores.len() != labels.len() {
        return Err(shape_err("point_adjust_f1", scores.len(), labels.len()));
    }
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let adjusted_pred = point_adjust(&pred, labels);
    let raw = Counts::of(&pred, labels);
    let adjusted = Counts::of(&adjusted_pred, labels);
    let (precision, recall, f1) = adjusted.prf();
    Ok(AnomalyMetrics { threshold, point_adjust: true, precision, recall, f1, raw, adjusted, raw_f1: raw.prf().2 })
}

/// Threshold maximizing point-adjusted F1 over every distinct score; ties keep the higher
/// threshold.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> Result<AnomalyMetrics> {
    if scores.len() != labels.len() {
        return Err(shape_err("best_threshold", scores.len(), labels.len()));
    }
    let mut candidates: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let mut best: Option<AnomalyMetrics> = None;
    for th in candidates {
        let m = point_adjust_f1(scores, labels, th)?;
        if best.as_ref().is_none_or(|b| m.f1 > b.f1) {
            best = Some(m);
        }
    }
    match best {
        Some(b) => Ok(b),
        None => point_adjust_f1(scores, labels, f64::INFINITY),
    }
}

/// Threshold at the given percentile (0..=100) of `scores`.
pub fn percentile_threshold(scores: &[f64], pct: f64) -> f64 {
    crate::stats::quantile(scores, (pct / 100.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mse_mae(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), (4.0, 2.0));
        assert_eq!(mse_mae(&[-3.0], &[0.0]).unwrap(), (9.0, 3.0));
        assert!(mse_mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        let truth = [0usize; 10];
        let pred = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        assert_eq!(accuracy(&pred, &truth).unwrap(), 50.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_hit_credits_segment() {
        let labels: Vec<bool> = (0..10).map(|t| (3..=6).contains(&t)).collect();
        let scores: Vec<f64> = (0..10).map(|t| if t == 4 { 1.0 } else { 0.0 }).collect();
        let m = point_adjust_f1(&scores, &labels, 0.5).unwrap();
        assert_eq!((m.adjusted.tp, m.adjusted.fp, m.adjusted.fn_), (4, 0, 0));
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.raw.tp, 1);
    }

    #[test]
    fn nothing_labelled_nothing_flagged() {
        let m = point_adjust_f1(&[0.0; 5], &[false; 5], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn stray_flag_is_false_positive() {
        let labels = [false, false, true, true, false];
        let scores = [1.0, 0.0, 1.0, 0.0, 0.0];
        let m = point_adjust_f1(&scores, &labels, 0.5).unwrap();
        assert_eq!((m.adjusted.tp, m.adjusted.fp, m.adjusted.fn_), (2, 1, 0));
    }

    #[test]
    fn sweep_finds_separating_threshold() {
        let labels = [false, true, false, false];
        let scores = [0.1, 0.9, 0.3, 0.2];
        let m = best_threshold(&scores, &labels).unwrap();
        assert_eq!(m.threshold, 0.9);
        assert_eq!(m.f1, 1.0);
    }

    proptest! {
        #[test]
        fn adjusted_f1_dominates_raw(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
            let scores: Vec<f64> = bits.iter().map(|b| if b.0 { 1.0 } else { 0.0 }).collect();
            let labels: Vec<bool> = bits.iter().map(|b| b.1).collect();
            let m = point_adjust_f1(&scores, &labels, 0.5).unwrap();
            prop_assert!(m.f1 >= m.raw_f1);
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
        }
    }
}
