use serde::{Deserialize, Serialize};

use crate::analyzer::PriorBundle;
use crate::data::Task;

/// One semantic key point on the reference series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub t: usize,
    pub v: f64,
    /// Trend direction: +1 rising, −1 falling, 0 otherwise.
    pub tau: i8,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedValue {
    pub t: usize,
    pub v: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub t: usize,
    pub score: f64,
    pub reason: String,
}

/// Task-specific fields carried beside the anchors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum AnchorExtras {
    #[default]
    None,
    Pattern(String),
    Imputed(Vec<ImputedValue>),
    Anomalies(Vec<AnomalyScore>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub task: Task,
    pub anchors: Vec<Anchor>,
    pub confidence: f64,
    pub extras: AnchorExtras,
    /// Non-fatal notes (dropped or clipped anchors, short sets).
    pub warnings: Vec<String>,
}

impl AnchorSet {
    pub fn empty(task: Task) -> Self {
        AnchorSet { task, anchors: Vec::new(), confidence: 0.0, extras: AnchorExtras::None, warnings: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn times(&self) -> Vec<usize> {
        self.anchors.iter().map(|a| a.t).collect()
    }

    /// Serialize in the per-task response schema understood by the parser.
    pub fn to_response_json(&self) -> serde_json::Value {
        use serde_json::json;
        let anchors: Vec<_> = self.anchors.iter().map(|a| json!({"t": a.t, "v": a.v, "type": a.label})).collect();
        match self.task {
            Task::Forecast => json!({"confidence": self.confidence, "anchors": anchors}),
            Task::Classify => {
                let pattern = match &self.extras {
                    AnchorExtras::Pattern(p) => p.clone(),
                    _ => "unknown".to_string(),
                };
                json!({"confidence": self.confidence, "pattern_type": pattern, "key_anchors": anchors})
            }
            Task::Impute => {
                let imputed: Vec<_> = match &self.extras {
                    AnchorExtras::Imputed(v) => v.iter().map(|i| json!({"t": i.t, "v": i.v, "reason": i.reason})).collect(),
                    _ => Vec::new(),
                };
                json!({"confidence": self.confidence, "imputed_values": imputed, "key_anchors": anchors})
            }
            Task::Detect => {
                let scores: Vec<_> = match &self.extras {
                    AnchorExtras::Anomalies(v) => {
                        v.iter().map(|s| json!({"t": s.t, "score": s.score, "reason": s.reason})).collect()
                    }
                    _ => Vec::new(),
                };
                json!({"confidence": self.confidence, "anomaly_scores": scores, "key_anchors": anchors})
            }
        }
    }
}

/// Label → direction table. Matching ignores ASCII case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauMap {
    pub rising: Vec<String>,
    pub falling: Vec<String>,
}

impl Default for TauMap {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        TauMap {
            rising: s(&["rising", "rise", "increase", "up", "peak", "period_peak", "peak_approach"]),
            falling: s(&["falling", "fall", "decrease", "down", "valley", "period_valley", "trough"]),
        }
    }
}

impl TauMap {
    pub fn tau(&self, label: &str) -> i8 {
        if self.rising.iter().any(|r| r.eq_ignore_ascii_case(label)) {
            1
        } else if self.falling.iter().any(|f| f.eq_ignore_ascii_case(label)) {
            -1
        } else {
            0
        }
    }
}

/// Admissible anchor times: the horizon for forecasting, the window otherwise.
pub fn time_range(task: Task, seq_len: usize, pred_len: usize) -> std::ops::Range<usize> {
    match task {
        Task::Forecast => seq_len..seq_len + pred_len,
        _ => 0..seq_len,
    }
}

/// Value bound `[min − 3σ, max + 3σ]` of the reference series.
pub fn value_bound(bundle: &PriorBundle) -> (f64, f64) {
    let s = &bundle.reference_stats;
    (s.min - 3.0 * s.std, s.max + 3.0 * s.std)
}

/// Enforce the set invariants in place: admissible times, bounded values, ascending unique
/// times and at most `max_anchors` entries.
pub fn enforce(set: &mut AnchorSet, range: std::ops::Range<usize>, bound: (f64, f64), max_anchors: usize) {
    let before = set.anchors.len();
    set.anchors.retain(|a| range.contains(&a.t) && a.v.is_finite());
    if set.anchors.len() < before {
        set.warnings.push(format!("dropped {} anchors outside t in [{}, {})", before - set.anchors.len(), range.start, range.end));
    }
    let mut clipped = 0;
    for a in &mut set.anchors {
        let v = a.v.clamp(bound.0, bound.1);
        if v != a.v {
            clipped += 1;
            a.v = v;
        }
    }
    if clipped > 0 {
        set.warnings.push(format!("clipped {clipped} anchor values to [{:.4}, {:.4}]", bound.0, bound.1));
    }
    set.anchors.sort_by_key(|a| a.t);
    set.anchors.dedup_by_key(|a| a.t);
    if set.anchors.len() > max_anchors {
        set.warnings.push(format!("truncated {} anchors to {max_anchors}", set.anchors.len()));
        set.anchors.truncate(max_anchors);
    }
    match &mut set.extras {
        AnchorExtras::Imputed(v) => {
            v.retain(|i| range.contains(&i.t) && i.v.is_finite());
            for i in v.iter_mut() {
                i.v = i.v.clamp(bound.0, bound.1);
            }
        }
        AnchorExtras::Anomalies(v) => {
            v.retain(|s| range.contains(&s.t) && s.score.is_finite());
            for s in v.iter_mut() {
                s.score = s.score.clamp(0.0, 1.0);
            }
        }
        _ => {}
    }
    set.confidence = set.confidence.clamp(0.0, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor(t: usize, v: f64) -> Anchor {
        Anchor { t, v, tau: 0, label: "x".into() }
    }

    #[test]
    fn tau_labels() {
        let m = TauMap::default();
        assert_eq!(m.tau("Peak"), 1);
        assert_eq!(m.tau("valley"), -1);
        assert_eq!(m.tau("inflection"), 0);
    }

    #[test]
    fn enforce_orders_clips_and_truncates() {
        let mut s = AnchorSet::empty(Task::Forecast);
        s.anchors = (0..30).rev().map(|i| anchor(100 + i, i as f64)).collect();
        s.anchors.push(anchor(5, 0.0));
        s.anchors.push(anchor(101, 0.5));
        enforce(&mut s, 96..192, (0.0, 10.0), 20);
        assert_eq!(s.anchors.len(), 20);
        assert!(s.anchors.windows(2).all(|w| w[0].t < w[1].t));
        assert!(s.anchors.iter().all(|a| a.v <= 10.0));
        assert_eq!(s.anchors[0].t, 100);
    }
}
