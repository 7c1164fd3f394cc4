//! Run configuration: a TOML file merged with `--set key=value` overrides.
//!
//! Resolution order, later wins: built-in defaults, the model preset named by
//! `preset`, the file, then the overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use countnet::data::{ResizePolicy, SyntheticSceneSpec};
use countnet::train_eval::TrainConfig;
use countnet::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `default`, `tiny` or `desk`.
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub resize: ResizePolicy,
    pub synth: SyntheticSceneSpec,
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "tiny" => Ok(ModelConfig::tiny()),
        "desk" => Ok(ModelConfig::desk()),
        other => bail!("unknown preset `{other}` (expected default, tiny or desk)"),
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

fn apply_set(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    table.insert(last.to_string(), parse_literal(value.trim()));
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loads and resolves a run configuration. Schema errors in the file are
/// reported with their line and column.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut user = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            if let Err(e) = toml::from_str::<RunConfig>(&text) {
                bail!("{}: {e}", p.display());
            }
            toml::from_str::<Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_set(&mut user, s)?;
    }
    let preset_name = match user.get("preset") {
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => bail!("preset must be a string, got {other}"),
        None => None,
    };
    let base = RunConfig {
        preset: preset_name.clone(),
        model: preset(preset_name.as_deref().unwrap_or("default"))?,
        ..Default::default()
    };
    let mut resolved = Table::try_from(&base).context("serializing defaults")?;
    merge(&mut resolved, user);
    let cfg: RunConfig = resolved
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("invalid configuration after overrides: {}", e.message()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}
