//! Pipeline configuration loading: a TOML file with one `[section]` per
//! module, merged key by key over the built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use ultr_core::experiment::PipelineConfig;

/// Recursively overlays `user` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse(text: &str) -> Result<PipelineConfig> {
    let user: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
    let mut base = toml::Value::try_from(PipelineConfig::default()).context("serializing defaults")?;
    merge(&mut base, user);
    let cfg: PipelineConfig = base.try_into().context("invalid config")?;
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

/// Single-line JSON for the log; derived seeds can exceed TOML's integer range.
pub fn to_json(cfg: &PipelineConfig) -> String {
    serde_json::to_string(cfg).unwrap_or_else(|e| format!("<unprintable config: {e}>"))
}
