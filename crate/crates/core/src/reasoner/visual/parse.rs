use serde_json::{Map, Value};

use super::anchor::{
    enforce, time_range, value_bound, Anchor, AnchorExtras, AnchorSet, AnomalyScore, ImputedValue, TauMap,
};
use crate::analyzer::PriorBundle;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::TimeSeriesWindow;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseConfig {
    pub confidence_threshold: f64,
    pub max_anchors: usize,
    pub tau: TauMap,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig { confidence_threshold: 0.7, max_anchors: 20, tau: TauMap::default() }
    }
}

/// First balanced `{…}` object in `raw`, honouring string literals.
pub fn extract_json_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let (mut in_str, mut esc) = (false, false);
    for (i, ch) in raw[start..].char_indices() {
        if in_str {
            match ch {
                _ if esc => esc = false,
                '\\' => esc = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drop `...` placeholders and trailing commas outside string literals, as found in
/// hand-written example bodies.
fn relax(body: &str) -> String {
    let chars: Vec<char> = body.chars().collect();
    let mut out = String::with_capacity(body.len());
    let (mut in_str, mut esc) = (false, false);
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if in_str {
            out.push(ch);
            match ch {
                _ if esc => esc = false,
                '\\' => esc = true,
                '"' => in_str = false,
                _ => {}
            }
            i += 1;
            continue;
        }
        match ch {
            '"' => {
                in_str = true;
                out.push(ch);
            }
            '.' if chars[i..].starts_with(&['.', '.', '.']) => {
                i += 3;
                continue;
            }
            '…' => {}
            _ => out.push(ch),
        }
        i += 1;
    }
    // trailing commas, again skipping strings
    let chars: Vec<char> = out.chars().collect();
    let mut res = String::with_capacity(out.len());
    let (mut in_str, mut esc) = (false, false);
    for (i, &ch) in chars.iter().enumerate() {
        if in_str {
            res.push(ch);
            match ch {
                _ if esc => esc = false,
                '\\' => esc = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        if ch == '"' {
            in_str = true;
        }
        if ch == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some(']') | Some('}') | None) {
                continue;
            }
        }
        res.push(ch);
    }
    res
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Schema(name.to_string()))
}

fn number(obj: &Map<String, Value>, name: &str, path: &str) -> Result<f64> {
    field(obj, name)
        .map_err(|_| Error::Schema(format!("{path}.{name}")))?
        .as_f64()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Schema(format!("{path}.{name}")))
}

/// Non-negative integral time index; `None` for negative or fractional values.
fn time(obj: &Map<String, Value>, path: &str) -> Result<Option<usize>> {
    let t = number(obj, "t", path)?;
    Ok((t >= 0.0 && t.fract() == 0.0).then_some(t as usize))
}

fn string(obj: &Map<String, Value>, name: &str, path: &str) -> Result<String> {
    field(obj, name)
        .map_err(|_| Error::Schema(format!("{path}.{name}")))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Schema(format!("{path}.{name}")))
}

fn array<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Vec<Value>> {
    field(obj, name)?.as_array().ok_or_else(|| Error::Schema(name.to_string()))
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::Schema(path.to_string()))
}

fn anchors(obj: &Map<String, Value>, name: &str, tau: &TauMap, warnings: &mut Vec<String>) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for (i, item) in array(obj, name)?.iter().enumerate() {
        let path = format!("{name}[{i}]");
        let a = object(item, &path)?;
        let v = number(a, "v", &path)?;
        let label = string(a, "type", &path)?;
        match time(a, &path)? {
            Some(t) => out.push(Anchor { t, v, tau: tau.tau(&label), label }),
            None => warnings.push(format!("{path}: invalid time index")),
        }
    }
    Ok(out)
}

/// Within each run of adjacent steps keep only the highest-scoring entry.
fn collapse_runs(mut scores: Vec<AnomalyScore>) -> Vec<AnomalyScore> {
    scores.sort_by_key(|s| s.t);
    scores.dedup_by(|b, a| {
        if a.t == b.t {
            if b.score > a.score {
                std::mem::swap(a, b);
            }
            true
        } else {
            false
        }
    });
    let mut out: Vec<AnomalyScore> = Vec::new();
    let mut run_end = None;
    for s in scores {
        match (out.last_mut(), run_end) {
            (Some(best), Some(end)) if s.t == end + 1 => {
                run_end = Some(s.t);
                if s.score > best.score {
                    *best = s;
                }
            }
            _ => {
                run_end = Some(s.t);
                out.push(s);
            }
        }
    }
    out
}

/// Validate a raw model response against the task schema and the window.
pub fn parse_anchor_response(
    raw: &str,
    task: Task,
    window: &TimeSeriesWindow,
    bundle: &PriorBundle,
    cfg: &ParseConfig,
) -> Result<AnchorSet> {
    let body = extract_json_object(raw).ok_or_else(|| Error::ResponseParse("no balanced JSON object".into()))?;
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(_) => serde_json::from_str(&relax(body)).map_err(|e| Error::ResponseParse(e.to_string()))?,
    };
    let obj = object(&value, "response")?;
    let confidence = field(obj, "confidence")?.as_f64().filter(|c| c.is_finite()).ok_or_else(|| Error::Schema("confidence".into()))?;
    let mut warnings = Vec::new();
    let anchor_field = if task == Task::Forecast { "anchors" } else { "key_anchors" };
    let parsed = anchors(obj, anchor_field, &cfg.tau, &mut warnings)?;
    let extras = match task {
        Task::Forecast => AnchorExtras::None,
        Task::Classify => AnchorExtras::Pattern(string(obj, "pattern_type", "response")?),
        Task::Impute => {
            let mut vals = Vec::new();
            for (i, item) in array(obj, "imputed_values")?.iter().enumerate() {
                let path = format!("imputed_values[{i}]");
                let o = object(item, &path)?;
                let v = number(o, "v", &path)?;
                let reason = string(o, "reason", &path)?;
                if reason != "interpolation" && reason != "extrapolation" {
                    return Err(Error::Schema(format!("{path}.reason")));
                }
                if let Some(t) = time(o, &path)? {
                    vals.push(ImputedValue { t, v, reason });
                }
            }
            AnchorExtras::Imputed(vals)
        }
        Task::Detect => {
            let mut scores = Vec::new();
            for (i, item) in array(obj, "anomaly_scores")?.iter().enumerate() {
                let path = format!("anomaly_scores[{i}]");
                let o = object(item, &path)?;
                let score = number(o, "score", &path)?;
                let reason = string(o, "reason", &path)?;
                if let Some(t) = time(o, &path)? {
                    scores.push(AnomalyScore { t, score, reason });
                }
            }
            AnchorExtras::Anomalies(collapse_runs(scores))
        }
    };
    let mut set = AnchorSet { task, anchors: parsed, confidence, extras, warnings };
    enforce(&mut set, time_range(task, window.len(), window.horizon), value_bound(bundle), cfg.max_anchors);
    if set.anchors.is_empty() {
        return Err(Error::Schema(format!("{anchor_field}: no admissible anchors")));
    }
    if confidence < cfg.confidence_threshold {
        return Err(Error::LowConfidence(confidence));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{compute_statistics, AnalyzerConfig};

    fn setup(l: usize, h: usize) -> (TimeSeriesWindow, PriorBundle) {
        let xs: Vec<f64> = (0..l).map(|t| (t as f64 * 0.3).sin()).collect();
        let mut w = TimeSeriesWindow::from_series(&xs).unwrap();
        w.horizon = h;
        let b = compute_statistics(&w, &AnalyzerConfig::default(), (8, 15)).unwrap();
        (w, b)
    }

    fn parse(raw: &str, task: Task) -> Result<AnchorSet> {
        let (w, b) = setup(96, 96);
        parse_anchor_response(raw, task, &w, &b, &ParseConfig::default())
    }

    const SAMPLE: &str = r#"{"confidence":0.85,"anchors":[{"t":96,"v":0.342,"type":"start"},{"t":120,"v":0.456,"type":"peak"}]}"#;

    #[test]
    fn forecast_sample() {
        let s = parse(SAMPLE, Task::Forecast).unwrap();
        assert_eq!(s.anchors.len(), 2);
        assert_eq!(s.confidence, 0.85);
        assert_eq!(s.anchors[1].tau, 1);
        assert_eq!(s.anchors[0].tau, 0);
    }

    #[test]
    fn fenced_and_prose_wrapped() {
        let fenced = format!("Here you go:\n```json\n{SAMPLE}\n```\nthanks");
        assert_eq!(parse(&fenced, Task::Forecast).unwrap(), parse(SAMPLE, Task::Forecast).unwrap());
    }

    #[test]
    fn out_of_range_anchor_dropped() {
        let raw = r#"{"confidence":0.9,"anchors":[{"t":50,"v":0.1,"type":"peak"},{"t":100,"v":0.2,"type":"valley"}]}"#;
        let s = parse(raw, Task::Forecast).unwrap();
        assert_eq!(s.times(), vec![100]);
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn errors() {
        assert!(matches!(parse("nothing here", Task::Forecast), Err(Error::ResponseParse(_))));
        assert!(matches!(parse(r#"{"anchors":[]}"#, Task::Forecast), Err(Error::Schema(f)) if f == "confidence"));
        assert!(matches!(parse(r#"{"confidence":0.9}"#, Task::Forecast), Err(Error::Schema(f)) if f == "anchors"));
        let low = r#"{"confidence":0.5,"anchors":[{"t":100,"v":0.2,"type":"peak"}]}"#;
        assert!(matches!(parse(low, Task::Forecast), Err(Error::LowConfidence(c)) if c == 0.5));
        let bad_reason = r#"{"confidence":0.9,"imputed_values":[{"t":3,"v":0.1,"reason":"guess"}],"key_anchors":[{"t":1,"v":0.1,"type":"observed"}]}"#;
        assert!(matches!(parse(bad_reason, Task::Impute), Err(Error::Schema(f)) if f == "imputed_values[0].reason"));
    }

    #[test]
    fn values_clipped_to_bound() {
        let raw = r#"{"confidence":0.9,"anchors":[{"t":100,"v":1e6,"type":"peak"}]}"#;
        let s = parse(raw, Task::Forecast).unwrap();
        let (w, b) = setup(96, 96);
        let _ = w;
        assert_eq!(s.anchors[0].v, value_bound(&b).1);
    }

    #[test]
    fn consecutive_anomalies_collapse() {
        let raw = r#"{"confidence":0.9,"anomaly_scores":[
            {"t":10,"score":0.3,"reason":"spike"},{"t":11,"score":0.8,"reason":"spike"},
            {"t":12,"score":0.5,"reason":"spike"},{"t":40,"score":0.7,"reason":"spike"}],
            "key_anchors":[{"t":5,"v":0.0,"type":"normal"}]}"#;
        let s = parse(raw, Task::Detect).unwrap();
        match s.extras {
            AnchorExtras::Anomalies(v) => {
                assert_eq!(v.iter().map(|a| (a.t, a.score)).collect::<Vec<_>>(), vec![(11, 0.8), (40, 0.7)]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn braces_inside_strings_are_ignored() {
        let raw = r#"{"confidence":0.9,"pattern_type":"a}b{","key_anchors":[{"t":3,"v":0.1,"type":"peak"}]} trailing }"#;
        let s = parse(raw, Task::Classify).unwrap();
        assert_eq!(s.extras, AnchorExtras::Pattern("a}b{".into()));
    }

    #[test]
    fn round_trip() {
        let s = parse(SAMPLE, Task::Forecast).unwrap();
        let again = parse(&s.to_response_json().to_string(), Task::Forecast).unwrap();
        assert_eq!(s, again);
    }
}
