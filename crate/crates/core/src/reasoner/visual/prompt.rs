use serde::{Deserialize, Serialize};

use crate::analyzer::PriorBundle;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::TimeSeriesWindow;

/// Per-task `(min, max)` anchor counts requested from the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorRanges {
    pub forecast: (usize, usize),
    pub classify: (usize, usize),
    pub impute: (usize, usize),
    pub detect: (usize, usize),
}

impl Default for AnchorRanges {
    fn default() -> Self {
        AnchorRanges { forecast: (8, 15), classify: (5, 8), impute: (5, 7), detect: (8, 12) }
    }
}

impl AnchorRanges {
    pub fn get(&self, task: Task) -> (usize, usize) {
        match task {
            Task::Forecast => self.forecast,
            Task::Classify => self.classify,
            Task::Impute => self.impute,
            Task::Detect => self.detect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

const FORECAST_SYSTEM: &str = "You are a senior time-series forecasting expert. Analyze the time series plot and provide predictions in strict JSON format. Always include a confidence score (0.00-1.00) based on pattern consistency.";
const CLASSIFY_SYSTEM: &str = "You are a senior time-series classification expert. Analyze the time series plot and classify the sequence pattern. Provide strict JSON with confidence score.";
const IMPUTE_SYSTEM: &str = "You are a senior time-series imputation expert. Analyze the time series plot and impute MISSING VALUES in the INPUT sequence. Provide JSON with confidence score.";
const DETECT_SYSTEM: &str = "You are a senior time-series anomaly detection expert. Analyze the time series plot and identify anomalous time steps in the INPUT sequence. Provide strict JSON with confidence scores.";

const FORECAST_EXAMPLE: &str = r#"{
  "confidence": 0.85,
  "anchors": [
    {"t": 96, "v": 0.342, "type": "start"},
    {"t": 120, "v": 0.456, "type": "peak"},
    ...
  ]
}"#;

const CLASSIFY_EXAMPLE: &str = r#"{
  "confidence": 0.78,
  "pattern_type": "periodic",
  "key_anchors": [
    {"t": 12, "v": 0.89, "type": "period_peak"},
    {"t": 36, "v": -0.45, "type": "period_valley"}
  ]
}"#;

const IMPUTE_EXAMPLE: &str = r#"{
  "confidence": 0.88,
  "imputed_values": [
    {"t": 25, "v": 0.34, "reason": "interpolation"},
  ],
  "key_anchors": [
    {"t": 20, "v": 0.28, "type": "observed"},
  ]
}"#;

const DETECT_EXAMPLE: &str = r#"{
  "confidence": 0.82,
  "anomaly_scores": [
    {"t": 45, "score": 0.91, "reason": "spike"},
    {"t": 78, "score": 0.85, "reason": "level_shift"}
  ],
  "key_anchors": [
    {"t": 10, "v": 0.23, "type": "normal"},
    {"t": 45, "v": 1.82, "type": "anomaly"}
  ]
}"#;

/// Example response bodies embedded in each user template.
pub fn example_response(task: Task) -> &'static str {
    match task {
        Task::Forecast => FORECAST_EXAMPLE,
        Task::Classify => CLASSIFY_EXAMPLE,
        Task::Impute => IMPUTE_EXAMPLE,
        Task::Detect => DETECT_EXAMPLE,
    }
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

/// Fill the task template from the window and its priors.
pub fn build_prompt(task: Task, window: &TimeSeriesWindow, bundle: &PriorBundle, anchor_range: (usize, usize)) -> Result<Prompt> {
    let l = window.len();
    let s = &bundle.reference_stats;
    let (lo, hi) = anchor_range;
    let (min, max, mean, std) = (num(s.min), num(s.max), num(s.mean), num(s.std));
    let (system, user) = match task {
        Task::Forecast => (
            FORECAST_SYSTEM,
            format!(
                "Analyze this time series plot for FORECASTING task (predict {h} future steps).\n\
                 Input sequence: {l} steps (t=0 to {last_t}), last value={last}\n\
                 Historical stats: range=[{min}, {max}], std={std}\n\
                 Requirements:\n\
                 1. Output ONLY {lo}-{hi} key anchor points (peaks/valleys/inflections) for the PREDICTION WINDOW\n\
                 2. Anchor types: 'start', 'peak', 'valley', 'inflection', 'end'\n\
                 3. All values MUST stay within reasonable bounds\n\
                 4. Confidence score reflects pattern continuity\n\
                 Output JSON:\n{FORECAST_EXAMPLE}",
                h = window.horizon,
                last_t = l.saturating_sub(1),
                last = num(s.last_value),
            ),
        ),
        Task::Classify => (
            CLASSIFY_SYSTEM,
            format!(
                "Analyze this time series plot for CLASSIFICATION (input length={l}).\n\
                 Input stats: range=[{min}, {max}], mean={mean}\n\
                 Requirements:\n\
                 1. Identify the dominant pattern type (periodic, trending, stationary, etc.)\n\
                 2. Key anchors: {lo}-{hi} points that define the class signature\n\
                 3. Confidence score reflects pattern uniqueness\n\
                 Output JSON:\n{CLASSIFY_EXAMPLE}"
            ),
        ),
        Task::Impute => {
            let missing = window.mask.as_ref().map(|m| m.missing_steps()).unwrap_or_default();
            if missing.is_empty() {
                return Err(Error::Contract("imputation prompt needs at least one missing value".into()));
            }
            let positions = format!("[{}]", missing.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", "));
            (
                IMPUTE_SYSTEM,
                format!(
                    "Analyze this time series plot for IMPUTATION (input length={l}).\n\
                     Missing values: marked at positions {positions}\n\
                     Input stats: range=[{min}, {max}], mean={mean}\n\
                     Requirements:\n\
                     1. Impute ONLY marked missing positions\n\
                     2. Specify reasoning: 'interpolation' or 'extrapolation'\n\
                     3. Key anchors: {lo}-{hi} critical points guiding imputation\n\
                     Output JSON:\n{IMPUTE_EXAMPLE}"
                ),
            )
        }
        Task::Detect => (
            DETECT_SYSTEM,
            format!(
                "Analyze this time series plot for ANOMALY DETECTION (input length={l}).\n\
                 Input stats: range=[{min}, {max}], mean={mean}, std={std}\n\
                 Requirements:\n\
                 1. Focus ONLY on INPUT SEQUENCE (t=0 to {last_t})\n\
                 2. Anomaly scores: 0.0-1.0 (higher = more anomalous)\n\
                 3. For consecutive anomalies, report ONLY the most significant one\n\
                 4. Key anchors: {lo}-{hi} points including normal patterns as reference\n\
                 Output JSON:\n{DETECT_EXAMPLE}",
                last_t = l.saturating_sub(1),
            ),
        ),
    };
    Ok(Prompt { system: system.to_string(), user })
}

/// True when `text` still holds a `{identifier}` placeholder.
pub fn has_placeholder(text: &str) -> bool {
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'{' {
            let mut j = i + 1;
            while j < b.len() && (b[j].is_ascii_alphanumeric() || b[j] == b'_' || b[j] == b'-') {
                j += 1;
            }
            if j > i + 1 && j < b.len() && b[j] == b'}' {
                return true;
            }
        }
        i += 1;
    }
    false
}
