//! Config resolution: defaults < config file < command-line flags.
//!
//! `--config` takes either a built-in name (see `ghl::trainer::NAMED_CONFIGS`)
//! or a TOML file. A file may start from a built-in with `base = "<name>"`
//! and override any subset of keys; nested tables merge key by key.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use ghl::plasticity::RuleKind;
use ghl::trainer::TrainConfig;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Update rule for plastic layers (ghl, hebb_swta, hebb_oja, sign_only, backprop_sgd).
    #[arg(long)]
    pub rule: Option<String>,
    /// Learning rate of plastic layers.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Softmax temperature of the competition.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl Overrides {
    fn apply(&self, v: &mut Map<String, Value>) -> Result<()> {
        if let Some(seed) = self.seed {
            v.insert("seed".into(), seed.into());
        }
        if let Some(rule) = &self.rule {
            let rule: RuleKind = rule.parse()?;
            v.insert("rule".into(), rule.name().into());
        }
        if let Some(eta) = self.eta {
            v.insert("eta".into(), eta.into());
        }
        if let Some(tau) = self.tau {
            v.insert("tau".into(), tau.into());
        }
        if let Some(epochs) = self.epochs {
            v.insert("epochs".into(), epochs.into());
        }
        if let Some(b) = self.batch_size {
            v.insert("batch_size".into(), b.into());
        }
        Ok(())
    }
}

fn merge(into: &mut Map<String, Value>, from: Map<String, Value>) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Object(a)), Value::Object(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn named(name: &str) -> Result<Map<String, Value>> {
    let cfg = TrainConfig::named(name)?;
    match serde_json::to_value(cfg)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("configs serialize as objects"),
    }
}

/// Set a dotted key such as `dataset.spread`, creating tables on the way.
pub fn set_path(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = map;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let slot = cur.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        cur = match slot {
            Value::Object(m) => m,
            _ => bail!("cannot set `{key}`: `{part}` is not a table"),
        };
    }
    bail!("empty parameter name")
}

/// Resolve `--config` plus overrides. Returns the config and a short run name.
pub fn resolve(config: &str, overrides: &Overrides) -> Result<(TrainConfig, String)> {
    resolve_with(config, overrides, &[])
}

/// As [`resolve`], with extra `key = value` settings applied last.
pub fn resolve_with(config: &str, overrides: &Overrides, sets: &[(String, Value)]) -> Result<(TrainConfig, String)> {
    let path = Path::new(config);
    let (mut value, name) = if path.extension().is_some_and(|e| e == "toml") || path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut file = match serde_json::to_value(table)? {
            Value::Object(m) => m,
            _ => unreachable!("a TOML document is a table"),
        };
        let mut value = match file.remove("base") {
            Some(Value::String(base)) => named(&base)?,
            Some(other) => bail!("config key `base` must be a config name, got {other}"),
            None => Map::new(),
        };
        merge(&mut value, file);
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        (value, stem)
    } else {
        (named(config)?, config.to_string())
    };
    overrides.apply(&mut value)?;
    for (k, v) in sets {
        set_path(&mut value, k, v.clone())?;
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(value)).context("invalid config")?;
    cfg.validate()?;
    Ok((cfg, name))
}
