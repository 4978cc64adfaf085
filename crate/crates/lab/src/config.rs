//! Reading and writing experiment configs as JSON.

use std::fs;
use std::path::Path;

use flowrl_core::config::ExperimentConfig;

use crate::error::{LabError, LabResult};

/// Parses and validates a config. Errors carry the dotted field path.
pub fn parse_config(text: &str) -> LabResult<ExperimentConfig> {
    let cfg = parse_unvalidated(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_unvalidated(text: &str) -> LabResult<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner().to_string();
        let mut path = e.path().to_string();
        if path == "." {
            path.clear();
        }
        // serde reports a missing field at its parent; name the field itself
        if let Some(field) = missing_field(&inner) {
            path = if path.is_empty() {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        if path.is_empty() {
            path.push('.');
        }
        LabError::config(path, inner)
    })
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}

pub fn load_config(path: &Path) -> LabResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_config(&text)
}

pub fn to_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("configs serialize")
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> LabResult<()> {
    fs::write(path, to_json(cfg) + "\n").map_err(|e| LabError::io(path, e))
}
