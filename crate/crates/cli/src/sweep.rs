//! One-parameter sweeps: every value × seed trains in its own subdirectory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{resolve_with, Overrides};
use crate::manifest::{canonical_json, content_hash};
use crate::rundir;
use crate::train::{self, TrainArgs};

/// A value as JSON when it parses, else as a string (`relu`, `mlp:16-8-3`).
pub fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

#[derive(Serialize)]
struct Row {
    param: String,
    value: String,
    seed: u64,
    train_acc: f64,
    test_acc: f64,
    val_acc: Option<f64>,
    dir: String,
}

pub struct SweepArgs<'a> {
    pub config: &'a str,
    pub overrides: &'a Overrides,
    pub param: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    pub deterministic: bool,
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub fn run(args: SweepArgs) -> Result<PathBuf> {
    anyhow::ensure!(!args.values.is_empty(), "a sweep needs at least one value");
    let mut jobs = Vec::new();
    for v in &args.values {
        for &seed in &args.seeds {
            let sets = [(args.param.clone(), parse_value(v)), ("seed".to_string(), seed.into())];
            let (cfg, _) = resolve_with(args.config, args.overrides, &sets)
                .with_context(|| format!("{} = {v}", args.param))?;
            jobs.push((v.clone(), seed, cfg));
        }
    }
    let all: Vec<_> = jobs.iter().map(|(_, _, c)| c).collect();
    let dir = args
        .out_dir
        .unwrap_or_else(|| rundir::default_dir("sweep", &content_hash(&canonical_json(&all).unwrap())));
    rundir::create(&dir)?;

    let rows = jobs
        .par_iter()
        .map(|(v, seed, cfg)| {
            let sub = dir.join(format!("{}={}-seed{seed}", slug(&args.param), slug(v)));
            let res = train::run(TrainArgs {
                config: cfg,
                name: "",
                out_dir: Some(sub),
                threads: args.threads,
                deterministic: args.deterministic,
                resume: false,
                quiet: true,
                stop_after: None,
            })?;
            Ok(Row {
                param: args.param.clone(),
                value: v.clone(),
                seed: *seed,
                train_acc: res.final_record.train_acc,
                test_acc: res.final_record.test_acc,
                val_acc: res.final_record.val_acc,
                dir: res.dir.strip_prefix(&dir).unwrap_or(Path::new("")).display().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let path = dir.join("sweep.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
        println!("{} = {:<12} seed {:<4} test_acc {:.4}", r.param, r.value, r.seed, r.test_acc);
    }
    w.flush()?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_json_or_string() {
        assert_eq!(parse_value("0.5"), Value::from(0.5));
        assert_eq!(parse_value("true"), Value::from(true));
        assert_eq!(parse_value("mlp:16-8-3"), Value::from("mlp:16-8-3"));
    }
}
