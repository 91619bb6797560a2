//! Experiment configuration files and `--set` overrides.

use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use klue::model::Variant;
use klue::train::ExperimentConfig;
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Noiseless desk-scale task with a linear backbone.
    Reference,
    /// 15% label noise with an MLP backbone.
    Noisy,
}

/// `key.path=value`; the value is read as JSON, falling back to a string.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

pub fn parse_override(s: &str) -> Result<Override, String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("malformed key `{key}`"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(Override {
        path: key.split('.').map(String::from).collect(),
        value,
    })
}

fn apply(doc: &mut Value, o: &Override) -> Result<(), CliError> {
    let mut node = doc;
    for (i, seg) in o.path.iter().enumerate() {
        let key = o.path[..=i].join(".");
        node = match node {
            Value::Object(map) => map
                .get_mut(seg)
                .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?,
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| CliError::Usage(format!("`{key}`: expected an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Usage(format!("`{key}`: index out of range (length {len})")))?
            }
            _ => return Err(CliError::Usage(format!("`{key}` is not a section"))),
        };
    }
    *node = o.value.clone();
    Ok(())
}

/// Reads `path` (or the preset when absent) and applies the overrides in
/// order. Overriding `variant` also switches the operator semantics unless
/// `dku.semantics` is overridden explicitly.
pub fn load(path: Option<&Path>, preset: Preset, sets: &[Override]) -> Result<ExperimentConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config `{}`", p.display()))?;
            let mut v: Value = serde_json::from_str(&text).with_context(|| format!("config `{}`", p.display()))?;
            if let Value::Object(map) = &mut v {
                map.remove("header");
            }
            v
        }
        None => {
            let cfg = match preset {
                Preset::Reference => ExperimentConfig::reference(Variant::V1),
                Preset::Noisy => ExperimentConfig::noisy(Variant::V1),
            };
            serde_json::to_value(cfg).expect("config serializes")
        }
    };
    for o in sets {
        apply(&mut doc, o)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(doc).context("invalid config")?;
    let variant_set = sets.iter().any(|o| o.path == ["variant"]);
    let semantics_set = sets
        .iter()
        .any(|o| o.path.len() >= 2 && o.path[0] == "dku" && o.path[1] == "semantics");
    if variant_set && !semantics_set {
        cfg = cfg.clone().with_variant(cfg.variant);
    }
    cfg.check().map_err(anyhow::Error::from)?;
    Ok(cfg)
}

/// The config as written next to run outputs: its own fields plus a
/// `header` object.
pub fn to_document(cfg: &ExperimentConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Value::Object(map) = &mut v {
        map.insert(
            "header".into(),
            serde_json::to_value(cfg.header()).expect("header serializes"),
        );
    }
    v
}
