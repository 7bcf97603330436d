//! Run configuration files: a preset, data source, split and model overrides.

use std::path::{Path, PathBuf};

use amd_core::config::{preset, Ablation, ModelConfig};
use amd_core::data::{gen_synthetic, load_csv, Series, SplitSpec, SynthSpec};
use amd_core::{AmdError, Result};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub has_header: bool,
    #[serde(default)]
    pub date_column: Option<usize>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DataSource {
    Csv(CsvSource),
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    /// Partial model configuration merged over the preset.
    #[serde(default)]
    pub model: Option<Value>,
    #[serde(default)]
    pub ablations: Vec<String>,
}

/// A fully resolved run.
#[derive(Debug, Clone)]
pub struct Run {
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub series: Series,
}

/// Recursively overlays `patch` on `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: &Value, path: &str) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key),
                    _ => {
                        log::info!("override {key} = {v}");
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub fn read(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| AmdError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| AmdError::config(format!("{}: {e}", path.display())))
}

pub fn load_series(src: &DataSource) -> Result<Series> {
    match src {
        DataSource::Csv(c) => load_csv(&c.path, c.has_header, c.date_column),
        DataSource::Synthetic(s) => gen_synthetic(s),
    }
}

/// Resolves the file plus command-line overrides into a concrete run.
pub fn resolve(file: &RunConfigFile, preset_flag: Option<&str>, data_flag: Option<&CsvSource>) -> Result<Run> {
    let preset_name = preset_flag.or(file.preset.as_deref()).unwrap_or("toy");
    let p = preset(preset_name)?;
    let mut value = serde_json::to_value(&p.model)?;
    let explicit_channels = file
        .model
        .as_ref()
        .and_then(|m| m.get("channels"))
        .is_some();
    if let Some(patch) = &file.model {
        if !patch.is_object() {
            return Err(AmdError::config("`model` must be a JSON object"));
        }
        merge(&mut value, patch, "");
    }
    let mut model: ModelConfig =
        serde_json::from_value(value).map_err(|e| AmdError::config(format!("model overrides: {e}")))?;
    for a in &file.ablations {
        let ab: Ablation = a.parse()?;
        log::info!("ablation {ab}");
        ab.apply(&mut model);
    }

    let series = match (data_flag, &file.data) {
        (Some(c), _) => load_csv(&c.path, c.has_header, c.date_column)?,
        (None, Some(src)) => load_series(src)?,
        (None, None) => return Err(AmdError::config("no data source: pass --data or set `data` in the config")),
    };
    if series.channels() != model.channels {
        if explicit_channels {
            return Err(AmdError::data(format!(
                "config declares {} channels but the data has {}",
                model.channels,
                series.channels()
            )));
        }
        log::info!("channels set to {} from the data", series.channels());
        model.channels = series.channels();
    }
    model.validate()?;
    let split = file.split.unwrap_or(p.split);
    Ok(Run { model, split, series })
}
