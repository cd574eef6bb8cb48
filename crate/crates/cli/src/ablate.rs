//! Rule ablation front end. The printed table marks which signals each rule
//! uses: the global gradient (direction or value) and the local Hebbian term.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ghl::datasets::data_dir;
use ghl::plasticity::RuleKind;
use ghl::trainer::ablation::{run_ablation, AblationPlan, AblationReport};
use ghl::trainer::{default_eta, DataSplits, TrainConfig};
use serde::Serialize;

use crate::manifest::{canonical_json, content_hash, RunManifest};
use crate::rundir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    /// Five-point log grid around each rule's default rate.
    Default,
    /// One rate per rule: `--eta` when given, else the rule's default.
    Fixed,
}

pub fn parse_rules(s: &str) -> Result<Vec<RuleKind>> {
    let rules = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.parse::<RuleKind>())
        .collect::<ghl::Result<Vec<_>>>()?;
    Ok(rules)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().with_context(|| format!("bad seed `{t}`")))
        .collect()
}

#[derive(Serialize)]
struct PlanEcho<'a> {
    base: &'a TrainConfig,
    rules: &'a [RuleKind],
    seeds: &'a [u64],
    grids: &'a BTreeMap<RuleKind, Vec<f64>>,
}

fn signals(rule: RuleKind) -> (&'static str, &'static str) {
    match rule {
        RuleKind::Ghl => ("sign", "yes"),
        RuleKind::SignOnly => ("sign", "no"),
        RuleKind::HebbSwta | RuleKind::HebbOja => ("no", "yes"),
        RuleKind::BackpropSgd => ("gradient", "no"),
    }
}

pub fn table(report: &AblationReport) -> String {
    let mut s = String::from("| rule | global | local | eta | test acc (mean ± std) | seeds |\n|---|---|---|---|---|---|\n");
    for &rule in &report.rules {
        let (g, l) = signals(rule);
        let (eta, acc) = match (report.selected.get(&rule), report.summary(rule)) {
            (Some(eta), Some((m, sd))) => (format!("{eta}"), format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd)),
            _ => ("-".into(), "diverged".into()),
        };
        let n = report.rows().iter().filter(|r| r.rule == rule).count();
        writeln!(s, "| {rule} | {g} | {l} | {eta} | {acc} | {n} |").unwrap();
    }
    s
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunRow {
    rule: RuleKind,
    eta: f64,
    seed: u64,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SummaryRow {
    rule: RuleKind,
    seed: u64,
    eta: f64,
    test_acc: Option<f64>,
}

pub struct AblateArgs {
    pub base: TrainConfig,
    pub rules: Vec<RuleKind>,
    pub seeds: Vec<u64>,
    pub grid: Grid,
    pub eta_given: bool,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
}

pub fn run(args: AblateArgs) -> Result<(PathBuf, AblationReport)> {
    let mut plan = AblationPlan::new(args.base, args.rules, args.seeds);
    if args.grid == Grid::Fixed {
        for (rule, grid) in plan.grids.iter_mut() {
            *grid = vec![if args.eta_given { plan.base.eta } else { default_eta(*rule) }];
        }
    }
    let data = DataSplits::load(&plan.base, &data_dir())?;
    plan.validate(data.val.is_some())?;

    let echo = PlanEcho {
        base: &plan.base,
        rules: &plan.rules,
        seeds: &plan.seeds,
        grids: &plan.grids,
    };
    let dir = args
        .out_dir
        .unwrap_or_else(|| rundir::default_dir("ablate", &content_hash(&canonical_json(&echo).unwrap())));
    rundir::create(&dir)?;
    RunManifest::new("ablate", &echo, &dir, args.threads)?.write(&dir)?;

    let report = run_ablation(&plan, &data)?;
    write_csv(
        &dir.join("runs.csv"),
        report.runs.iter().map(|r| RunRow {
            rule: r.rule,
            eta: r.eta,
            seed: r.seed,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            error: r.error.clone(),
        }),
    )?;
    write_csv(
        &dir.join("summary.csv"),
        report.rows().into_iter().map(|r| SummaryRow {
            rule: r.rule,
            seed: r.seed,
            eta: r.eta,
            test_acc: r.test_acc,
        }),
    )?;
    std::fs::write(dir.join("table.md"), table(&report))?;
    Ok((dir, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_rules("ghl, sign_only").unwrap(), vec![RuleKind::Ghl, RuleKind::SignOnly]);
        let err = parse_rules("ghl,adam").unwrap_err().to_string();
        assert!(err.contains("adam"), "{err}");
        assert_eq!(parse_seeds("0, 1,2").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("").unwrap().is_empty());
        assert!(parse_seeds("x").is_err());
    }
}
