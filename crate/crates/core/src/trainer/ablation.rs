//! Rule ablations: every rule is trained on the same data with its own
//! learning-rate grid; the rate with the best mean validation accuracy over
//! seeds is selected, and test accuracy at that rate is reported.
//!
//! Only the plastic layers' rule and rate vary. The classifier keeps the
//! base configuration's `head_eta` in every run. A run that hits a numeric
//! error is recorded as diverged, and its rate is not eligible for selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_on, DataSplits, TrainConfig};
use crate::error::{Error, Result};
use crate::plasticity::RuleKind;

/// Five-point log grid around [`super::default_eta`].
pub fn default_grid(rule: RuleKind) -> Vec<f64> {
    let c = super::default_eta(rule);
    [0.1, 0.3, 1.0, 3.0, 10.0].iter().map(|f| f * c).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub rules: Vec<RuleKind>,
    pub seeds: Vec<u64>,
    pub grids: BTreeMap<RuleKind, Vec<f64>>,
}

impl AblationPlan {
    /// Plan with [`default_grid`] for every rule.
    pub fn new(base: TrainConfig, rules: Vec<RuleKind>, seeds: Vec<u64>) -> Self {
        let grids = rules.iter().map(|&r| (r, default_grid(r))).collect();
        Self {
            base,
            rules,
            seeds,
            grids,
        }
    }

    pub fn validate(&self, has_val: bool) -> Result<()> {
        if self.rules.len() < 2 {
            return Err(Error::Config("an ablation needs at least two rules".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("an ablation needs at least one seed".into()));
        }
        for rule in &self.rules {
            let grid = self.grids.get(rule).map(Vec::as_slice).unwrap_or_default();
            if grid.is_empty() {
                return Err(Error::Config(format!("no learning rates given for rule {rule}")));
            }
            if grid.len() > 1 && !has_val {
                return Err(Error::Config(
                    "choosing among several learning rates needs a validation split (set val_fraction)".into(),
                ));
            }
        }
        self.base.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub rule: RuleKind,
    pub seed: u64,
    pub eta: f64,
    pub val_acc: Option<f64>,
    /// `None` when the run diverged.
    pub test_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Every (rule, η, seed) run, in plan order.
    pub runs: Vec<AblationRun>,
    /// Selected η per rule; absent when every rate diverged.
    pub selected: BTreeMap<RuleKind, f64>,
    pub rules: Vec<RuleKind>,
}

impl AblationReport {
    /// Runs at each rule's selected η: the rule × seed table.
    pub fn rows(&self) -> Vec<&AblationRun> {
        self.rules
            .iter()
            .filter_map(|r| self.selected.get(r).map(|&eta| (r, eta)))
            .flat_map(|(r, eta)| self.runs.iter().filter(move |run| run.rule == *r && run.eta == eta))
            .collect()
    }

    /// Mean and sample standard deviation of test accuracy at the selected η.
    pub fn summary(&self, rule: RuleKind) -> Option<(f64, f64)> {
        let accs: Vec<f64> = self.rows().iter().filter(|r| r.rule == rule).filter_map(|r| r.test_acc).collect();
        if accs.is_empty() {
            return None;
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = if accs.len() > 1 {
            accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }
}

pub fn run_ablation(plan: &AblationPlan, data: &DataSplits) -> Result<AblationReport> {
    plan.validate(data.val.is_some())?;
    let jobs: Vec<(RuleKind, f64, u64)> = plan
        .rules
        .iter()
        .flat_map(|&rule| {
            plan.grids[&rule]
                .iter()
                .flat_map(move |&eta| plan.seeds.iter().map(move |&seed| (rule, eta, seed)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(rule, eta, seed)| {
            let mut cfg = plan.base.clone();
            cfg.rule = rule;
            cfg.eta = eta;
            cfg.head_eta = Some(plan.base.head_eta());
            cfg.seed = seed;
            cfg.checkpoint_path = None;
            Ok(match train_on(&cfg, data, None, &mut |_| Ok(())) {
                Ok(out) => {
                    let last = out.records.last().expect("at least one epoch");
                    AblationRun {
                        rule,
                        seed,
                        eta,
                        val_acc: last.val_acc,
                        test_acc: Some(last.test_acc),
                        error: None,
                    }
                }
                Err(e @ Error::Numeric(_)) => AblationRun {
                    rule,
                    seed,
                    eta,
                    val_acc: None,
                    test_acc: None,
                    error: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut selected = BTreeMap::new();
    for &rule in &plan.rules {
        let mut best: Option<(f64, f64)> = None;
        for &eta in &plan.grids[&rule] {
            let group: Vec<&AblationRun> = runs.iter().filter(|r| r.rule == rule && r.eta == eta).collect();
            if group.iter().any(|r| r.error.is_some()) {
                continue;
            }
            let mean = group.iter().map(|r| r.val_acc.or(r.test_acc).unwrap()).sum::<f64>() / group.len() as f64;
            // strict improvement keeps the smaller rate on ties
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some((eta, mean));
            }
        }
        if let Some((eta, _)) = best {
            selected.insert(rule, eta);
        }
    }
    Ok(AblationReport {
        runs,
        selected,
        rules: plan.rules.clone(),
    })
}
