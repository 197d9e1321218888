//! Run configuration: one JSON document with `model`, `train`, and `data`
//! sections. Every field is optional and falls back to the documented
//! default, unknown keys are rejected, and `section.key=value` overrides
//! can be applied on top before the resolved document is echoed back into
//! the run directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arch::ModelConfig;
use crate::distill::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub split_ratio: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            count: 500,
            size: 64,
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Applies one `section.key=value` override. The value is parsed as
    /// JSON when possible (numbers, booleans, arrays) and taken as a bare
    /// string otherwise; unknown sections or keys are rejected.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::config(format!("override `{assignment}` is not of the form key=value"))
        })?;
        let value: Value = serde_json::from_str(raw.trim())
            .unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut doc;
        let segments: Vec<&str> = path.trim().split('.').collect();
        if segments.len() < 2 {
            return Err(Error::config(format!(
                "override path `{path}` needs a section, like train.lr"
            )));
        }
        for seg in &segments[..segments.len() - 1] {
            node = node
                .get_mut(*seg)
                .ok_or_else(|| Error::config(format!("unknown config section `{seg}`")))?;
        }
        let last = segments[segments.len() - 1];
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{path}` does not address a field")))?;
        if !obj.contains_key(last) {
            return Err(Error::config(format!("unknown config key `{path}`")));
        }
        obj.insert(last.to_string(), value);
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.count < 4 {
            return Err(Error::config("data.count must be at least 4"));
        }
        if self.data.size < 32 {
            return Err(Error::config("data.size must be at least 32"));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::config("data.split_ratio must lie in (0,1)"));
        }
        Ok(())
    }

    /// Writes the fully resolved document (defaults filled in) as pretty
    /// JSON, so a run directory records exactly what it ran with.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }
}
