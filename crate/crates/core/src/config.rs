//! Scenario configuration files.
//!
//! A config is a JSON object merged over a base scenario. Objects merge key by
//! key, everything else (numbers, strings, arrays) replaces the base value.
//! Two keys are reserved:
//!
//! - `preset`: name of the built-in scenario used as the base (default `blackstart`).
//! - `overrides`: map of sweep-style parameter paths to numbers, applied last,
//!   e.g. `{"gamma": 500}` or `{"converters[1].droop.p_star": 960}`.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::ConfigError;
use crate::presets::{preset, PresetOptions};
use crate::sim::{with_parameter, ScenarioSpec};

/// Recursively overlays `patch` on `base`.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

fn parse_error(e: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let message = inner.to_string();
    if message.starts_with("unknown field `") {
        return ConfigError::UnknownKey { path };
    }
    ConfigError::Parse { path, message }
}

/// Parses and validates a config document with `opts` applied to the preset base.
pub fn load_config_str(text: &str, opts: &PresetOptions) -> Result<ScenarioSpec, ConfigError> {
    let doc: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?
    };
    let Value::Object(mut obj) = doc else {
        return Err(ConfigError::invalid("<root>", "config must be a JSON object"));
    };
    let base_name = match obj.remove("preset") {
        None => "blackstart".to_string(),
        Some(Value::String(s)) => s,
        Some(_) => return Err(ConfigError::invalid("preset", "must be a scenario name")),
    };
    let overrides = match obj.remove("overrides") {
        None => Map::new(),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(ConfigError::invalid("overrides", "must be an object of parameter: number")),
    };
    let base = preset(&base_name, opts).map_err(|e| match e {
        ConfigError::Invalid { message, .. } => ConfigError::invalid("preset", message),
        other => other,
    })?;
    let mut merged = serde_json::to_value(&base).map_err(|e| ConfigError::invalid("<root>", e.to_string()))?;
    merge(&mut merged, &Value::Object(obj));
    let mut spec: ScenarioSpec = serde_path_to_error::deserialize(merged).map_err(parse_error)?;
    for (param, v) in overrides {
        let value = v
            .as_f64()
            .ok_or_else(|| ConfigError::invalid(format!("overrides.{param}"), "value must be a number"))?;
        let name = spec.name.clone();
        spec = with_parameter(&spec, &param, value)?;
        spec.name = name;
    }
    spec.validate()?;
    Ok(spec)
}

/// Reads a config file. See the module docs for the format.
pub fn load_config(path: &Path, opts: &PresetOptions) -> Result<ScenarioSpec, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    load_config_str(&text, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default_scenario() {
        let s = load_config_str("{}", &PresetOptions::default()).unwrap();
        assert_eq!(s, ScenarioSpec::default());
        assert_eq!(load_config_str("", &PresetOptions::default()).unwrap(), ScenarioSpec::default());
    }

    #[test]
    fn nested_override_keeps_other_defaults() {
        let s = load_config_str(r#"{"duration": 0.5, "converters": [{"droop": {"alpha": 1000}}]}"#, &Default::default())
            .unwrap();
        assert_eq!(s.duration, 0.5);
        assert_eq!(s.converters[0].droop.alpha, 1000.0);
        assert_eq!(s.converters[0].droop.gamma, 5e4);
    }

    #[test]
    fn gamma_override_gives_sharing_gains() {
        let s = load_config_str(r#"{"preset": "sync", "overrides": {"gamma": 500}}"#, &Default::default()).unwrap();
        assert!(s.converters.iter().all(|c| c.droop.gamma == 500.0));
        assert_eq!(s.name, "sync");
    }

    #[test]
    fn negative_alpha_names_the_constraint() {
        let e = load_config_str(r#"{"converters": [{"droop": {"alpha": -1}}]}"#, &Default::default()).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("alpha > 0"), "{msg}");
        assert!(msg.contains("converters[0].droop.alpha"), "{msg}");
    }

    #[test]
    fn unknown_key_is_path_qualified() {
        let e = load_config_str(r#"{"converters": [{"droop": {"beta": 1}}]}"#, &Default::default()).unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey { path } if path.contains("droop") && path.contains("beta")), "{e}");
        let e = load_config_str(r#"{"bogus": 1}"#, &Default::default()).unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey { path } if path == "bogus"), "{e}");
    }

    #[test]
    fn parse_and_type_errors() {
        assert!(matches!(load_config_str("{", &Default::default()), Err(ConfigError::Parse { .. })));
        let e = load_config_str(r#"{"duration": "long"}"#, &Default::default()).unwrap_err();
        assert!(matches!(&e, ConfigError::Parse { path, .. } if path == "duration"), "{e}");
        assert!(load_config_str("[]", &Default::default()).is_err());
        assert!(load_config_str(r#"{"preset": "nope"}"#, &Default::default()).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = load_config(Path::new("/nonexistent/x.json"), &Default::default()).unwrap_err();
        assert!(matches!(e, ConfigError::Io { .. }));
    }
}
