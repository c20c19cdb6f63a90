//! Configuration resolution: defaults, then a JSON file, then command-line flags.
//!
//! A config file is a JSON object whose keys are the fields of the command's config struct.
//! Nested objects merge field by field, so a file may set `{"optimizer": {"learning_rate": 0.01}}`
//! without restating the other optimizer fields. Unknown keys are errors.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Overlays `patch` onto `base`; every key in `patch` must already exist in `base`.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| CliError::Config(format!("{here}: unknown field")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Sets a dotted field such as `optimizer.learning_rate`.
pub fn set_path(base: &mut Value, dotted: &str, value: Value) -> Result<(), CliError> {
    let mut patch = value;
    for key in dotted.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(base, &patch, "")
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Config(format!("{}: config must be a JSON object", path.display())));
    }
    Ok(v)
}

/// Merges `file` and then `flags` onto `defaults` and deserializes the result.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>, flags: &[(&str, Value)]) -> Result<T, CliError> {
    let mut v = serde_json::to_value(defaults).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(f) = file {
        merge(&mut v, f, "")?;
    }
    for (path, value) in flags {
        set_path(&mut v, path, value.clone())?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_merge_and_flags() {
        let d = larft::trainer::TrainConfig::desk();
        let file = json!({"seed": 4, "optimizer": {"learning_rate": 0.5}});
        let r = resolve(&d, Some(&file), &[("optimizer.learning_rate", json!(0.25)), ("lambda_max", json!(0.0))]).unwrap();
        assert_eq!(r.seed, 4);
        assert_eq!(r.optimizer.learning_rate, 0.25);
        assert_eq!(r.optimizer.beta1, d.optimizer.beta1);
        assert_eq!(r.lambda_max, 0.0);
    }

    #[test]
    fn unknown_and_ill_typed_fields_are_config_errors() {
        let d = larft::trainer::TrainConfig::desk();
        let e = resolve(&d, Some(&json!({"optimizer": {"lr": 1}})), &[]).unwrap_err();
        assert!(matches!(&e, CliError::Config(m) if m.contains("optimizer.lr")));
        assert!(matches!(resolve(&d, Some(&json!({"seed": "x"})), &[]), Err(CliError::Config(_))));
    }
}
