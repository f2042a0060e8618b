use serde_json::Value;

use crate::config::AblationFlags;
use crate::error::{Error, Result};

/// One row of an ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub flags: AblationFlags,
}

fn parse_value(raw: &str) -> Value {
    match raw.trim() {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        s => Value::String(s.to_string()),
    }
}

fn with_field(base: &AblationFlags, key: &str, value: Value) -> Result<AblationFlags> {
    let mut v = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    let Value::Object(map) = &mut v else { unreachable!("flags serialize to an object") };
    if !map.contains_key(key) {
        return Err(Error::Config(format!("unknown ablation flag `{key}`")));
    }
    map.insert(key.to_string(), value);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("ablation flag `{key}`: {e}")))
}

/// Expand `name=value` items into variants. `name=a|b|c` sweeps one flag over several
/// values. The baseline row always comes first and duplicates of it are dropped, so an
/// empty item list yields the baseline alone.
pub fn plan(base: &AblationFlags, items: &[String]) -> Result<Vec<Variant>> {
    let mut rows = vec![Variant { label: "baseline".into(), flags: base.clone() }];
    for item in items.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation item `{item}` is not name=value")))?;
        let key = key.trim();
        for raw in values.split('|') {
            let flags = with_field(base, key, parse_value(raw))?;
            if rows.iter().any(|r| r.flags == flags) {
                continue;
            }
            rows.push(Variant { label: format!("{key}={}", raw.trim()), flags });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::numeric::CompletionStrategy;

    #[test]
    fn empty_plan_is_baseline_only() {
        let rows = plan(&AblationFlags::default(), &[]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, "baseline");
    }

    #[test]
    fn tools_off_gives_two_rows() {
        let rows = plan(&AblationFlags::default(), &["enable_tools=false".into()]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(!rows[1].flags.enable_tools);
        assert!(rows[1].flags.enable_shared_memory);
    }

    #[test]
    fn strategy_sweep_gives_four_rows() {
        let rows = plan(&AblationFlags::default(), &["completion_strategy=ode|linear|quadratic|repeat".into()]).unwrap();
        let s: Vec<CompletionStrategy> = rows.iter().map(|r| r.flags.completion_strategy).collect();
        assert_eq!(s, [CompletionStrategy::Ode, CompletionStrategy::Linear, CompletionStrategy::Quadratic, CompletionStrategy::Repeat]);
    }

    #[test]
    fn bad_items_are_config_errors() {
        let base = AblationFlags::default();
        for bad in ["enable_tool=false", "enable_tools", "completion_strategy=spline", "enable_tools=maybe"] {
            assert!(matches!(plan(&base, &[bad.into()]), Err(Error::Config(_))), "{bad}");
        }
    }
}
