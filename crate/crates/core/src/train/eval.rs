use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, argmax, best_threshold, mse_mae, percentile_threshold, point_adjust_f1, AnomalyMetrics};
use crate::config::ThresholdRule;
use crate::data::{Target, Task};
use crate::engine::{AnchorOrigin, Model, Prepared, WindowResult};
use crate::error::{Error, Result};
use crate::executor::{fallback, RoutingMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnchorStats {
    pub by_origin: BTreeMap<AnchorOrigin, usize>,
    pub mean_anchors: f64,
    pub mean_confidence: f64,
}

impl AnchorStats {
    pub fn of(prepared: &[Prepared]) -> Self {
        let mut by_origin = BTreeMap::new();
        for p in prepared {
            *by_origin.entry(p.origin).or_insert(0) += 1;
        }
        let n = prepared.len().max(1) as f64;
        AnchorStats {
            by_origin,
            mean_anchors: prepared.iter().map(|p| p.anchors.anchors.len() as f64).sum::<f64>() / n,
            mean_confidence: prepared.iter().map(|p| p.anchors.confidence).sum::<f64>() / n,
        }
    }
}

/// Test-split metrics. Continuous errors are in the dataset's standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub windows: usize,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    /// Detection at the threshold chosen on validation scores.
    pub anomaly: Option<AnomalyMetrics>,
    /// Detection at the best threshold over the test scores themselves.
    pub anomaly_best: Option<AnomalyMetrics>,
    pub masked_cells: Option<usize>,
    /// The same metrics for the conservative per-task baselines.
    pub baselines: BTreeMap<String, ErrorPair>,
    pub baseline_accuracy: Option<f64>,
    pub fallback_windows: usize,
    pub corrected_windows: usize,
    pub greedy_windows: usize,
    pub chain_selections: BTreeMap<String, usize>,
    pub anchors: AnchorStats,
}

fn labels_of(p: &Prepared) -> Vec<bool> {
    match &p.window.target {
        Target::Anomaly(l) => l.iter().map(|&v| v != 0).collect(),
        _ => vec![false; p.window.len()],
    }
}

fn detection_threshold(model: &Model, rule: ThresholdRule, val: &[Prepared], test_scores: &[f64], test_labels: &[bool]) -> Result<f64> {
    let (scores, labels) = if val.is_empty() {
        (test_scores.to_vec(), test_labels.to_vec())
    } else {
        let rs = model.predict_all(val)?;
        let s: Vec<f64> = rs.iter().flat_map(|r| r.prediction.value.data().to_vec()).collect();
        let l: Vec<bool> = val.iter().flat_map(labels_of).collect();
        (s, l)
    };
    Ok(match rule {
        ThresholdRule::Percentile(p) => percentile_threshold(&scores, p),
        ThresholdRule::BestF1 if labels.iter().any(|&l| l) => best_threshold(&scores, &labels)?.threshold,
        // No labelled anomaly to tune on: fall back to the 99th percentile.
        ThresholdRule::BestF1 => percentile_threshold(&scores, 99.0),
    })
}

/// Predict every test window and score the verified outputs.
pub fn evaluate(model: &Model, test: &[Prepared], val: &[Prepared], rule: ThresholdRule) -> Result<(MetricsReport, Vec<WindowResult>)> {
    if test.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let task = model.task();
    let results = model.predict_all(test)?;
    let mut report = MetricsReport {
        task,
        windows: test.len(),
        mse: None,
        mae: None,
        accuracy: None,
        anomaly: None,
        anomaly_best: None,
        masked_cells: None,
        baselines: BTreeMap::new(),
        baseline_accuracy: None,
        fallback_windows: results.iter().filter(|r| r.prediction.fallback_used).count(),
        corrected_windows: results.iter().filter(|r| !r.prediction.corrections.is_empty()).count(),
        greedy_windows: results.iter().filter(|r| r.decision.as_ref().is_some_and(|d| d.mode == RoutingMode::Greedy)).count(),
        chain_selections: BTreeMap::new(),
        anchors: AnchorStats::of(test),
    };
    let ids: Vec<String> = model.chains.chains().iter().map(|c| c.id()).collect();
    for d in results.iter().filter_map(|r| r.decision.as_ref()) {
        for &i in &d.selected {
            *report.chain_selections.entry(ids[i].clone()).or_insert(0) += 1;
        }
    }
    let pair = |p: &[f64], t: &[f64]| mse_mae(p, t).map(|(mse, mae)| ErrorPair { mse, mae });
    match task {
        Task::Forecast => {
            let h = model.dims.pred_len;
            let (mut pred, mut truth, mut rep, mut lin) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (p, r) in test.iter().zip(&results) {
                let Target::Forecast(y) = &p.window.target else {
                    return Err(Error::Contract("forecast window without a target".into()));
                };
                pred.extend_from_slice(r.prediction.value.data());
                truth.extend_from_slice(y.data());
                rep.extend_from_slice(fallback::repeat_last(&p.window, h)?.data());
                lin.extend_from_slice(fallback::linear_extrapolation(&p.window, h)?.data());
            }
            let e = pair(&pred, &truth)?;
            (report.mse, report.mae) = (Some(e.mse), Some(e.mae));
            report.baselines.insert("repeat_last".into(), pair(&rep, &truth)?);
            report.baselines.insert("linear_extrapolation".into(), pair(&lin, &truth)?);
        }
        Task::Impute => {
            let (mut pred, mut truth, mut interp) = (Vec::new(), Vec::new(), Vec::new());
            for (p, r) in test.iter().zip(&results) {
                let (Some(t), Some(m)) = (&p.window.truth, &p.window.mask) else { continue };
                let base = fallback::interpolate(&p.window);
                for (i, &missing) in m.bits().iter().enumerate() {
                    if missing {
                        pred.push(r.prediction.value.data()[i]);
                        truth.push(t.data()[i]);
                        interp.push(base.data()[i]);
                    }
                }
            }
            report.masked_cells = Some(truth.len());
            if !truth.is_empty() {
                let e = pair(&pred, &truth)?;
                (report.mse, report.mae) = (Some(e.mse), Some(e.mae));
                report.baselines.insert("linear_interpolation".into(), pair(&interp, &truth)?);
            }
        }
        Task::Classify => {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (p, r) in test.iter().zip(&results) {
                if let Target::Class(k) = p.window.target {
                    pred.push(argmax(r.prediction.value.data()));
                    truth.push(k);
                }
            }
            report.accuracy = Some(accuracy(&pred, &truth)?);
            report.baseline_accuracy = Some(accuracy(&vec![model.majority_class; truth.len()], &truth)?);
        }
        Task::Detect => {
            let scores: Vec<f64> = results.iter().flat_map(|r| r.prediction.value.data().to_vec()).collect();
            let labels: Vec<bool> = test.iter().flat_map(labels_of).collect();
            let th = detection_threshold(model, rule, val, &scores, &labels)?;
            report.anomaly = Some(point_adjust_f1(&scores, &labels, th)?);
            report.anomaly_best = Some(best_threshold(&scores, &labels)?);
            let z: Vec<f64> = test.iter().flat_map(|p| fallback::zscore(&p.window).data().to_vec()).collect();
            let zb = best_threshold(&z, &labels)?;
            report.baselines.insert("zscore_best_f1".into(), ErrorPair { mse: zb.f1, mae: zb.threshold });
        }
    }
    Ok((report, results))
}
