use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::datasets::{Augment, DatasetSpec};
use crate::error::{Error, Result};
use crate::plasticity::{HebbAggregation, RuleKind, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `every_n_epochs` epochs.
    Step { gamma: f64, every_n_epochs: usize },
    /// Half-cosine from the base rate at epoch 0 towards zero at `epochs`.
    Cosine,
}

impl LrSchedule {
    /// Factor on the base rate for zero-based `epoch` out of `epochs`.
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { gamma, every_n_epochs } => gamma.powi((epoch / every_n_epochs) as i32),
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }

    fn validate(&self) -> Result<()> {
        if let LrSchedule::Step { gamma, every_n_epochs } = *self {
            if !(gamma > 0.0 && gamma.is_finite()) || every_n_epochs == 0 {
                return Err(Error::Config(format!(
                    "step schedule needs gamma > 0 and every_n_epochs ≥ 1 (got {gamma}, {every_n_epochs})"
                )));
            }
        }
        Ok(())
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Update rule for plastic layers. Non-plastic layers always use
    /// gradient descent.
    pub rule: RuleKind,
    /// Learning rate of plastic layers.
    pub eta: f64,
    /// Learning rate of non-plastic layers; defaults to `eta`.
    #[serde(default)]
    pub head_eta: Option<f64>,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default = "one")]
    pub fixed_step: f64,
    #[serde(default)]
    pub literal_sign: bool,
    #[serde(default)]
    pub aggregation: HebbAggregation,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub arch: ArchSpec,
    pub dataset: DatasetSpec,
    /// Emit a metrics record every this many epochs (and after the last).
    #[serde(default = "one_usize")]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// Hold out this tail fraction of the training set for validation.
    #[serde(default)]
    pub val_fraction: Option<f64>,
    #[serde(default)]
    pub augment: Augment,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

pub const NAMED_CONFIGS: [&str; 9] = [
    "blobs_ghl",
    "blobs_sgd",
    "blobs_hebb_swta",
    "blobs_sign_only",
    "mnist_mlp_ghl",
    "mnist_mlp_sgd",
    "mnist_mlp_hebb_swta",
    "deephebb_cifar10",
    "fasthebb_cifar10",
];

/// The three-class blob task used by the small named configs and ablations.
pub fn blobs_task() -> DatasetSpec {
    DatasetSpec::Blobs {
        seed: 7,
        n_train: 300,
        n_test: 300,
        dim: 16,
        classes: 3,
        spread: 0.3,
    }
}

impl TrainConfig {
    pub fn new(rule: RuleKind, arch: ArchSpec, dataset: DatasetSpec) -> Self {
        Self {
            rule,
            eta: 0.01,
            head_eta: None,
            tau: 1.0,
            fixed_step: 1.0,
            literal_sign: false,
            aggregation: HebbAggregation::BatchMean,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            arch,
            dataset,
            eval_every: 1,
            checkpoint_path: None,
            val_fraction: None,
            augment: Augment::default(),
        }
    }

    /// Built-in configurations; see [`NAMED_CONFIGS`].
    pub fn named(name: &str) -> Result<Self> {
        if !NAMED_CONFIGS.contains(&name) {
            return Err(Error::Config(format!(
                "unknown config `{name}` (accepted: {})",
                NAMED_CONFIGS.join(", ")
            )));
        }
        let (base, rule) = if let Some(rule) = name.strip_prefix("blobs_") {
            ("blobs", rule)
        } else if let Some(rule) = name.strip_prefix("mnist_mlp_") {
            ("mnist", rule)
        } else {
            (name, "ghl")
        };
        let rule: RuleKind = rule.parse()?;
        let mut cfg = match base {
            "blobs" => {
                let mut c = Self::new(rule, ArchSpec::Named("mlp:16-32-3".into()), blobs_task());
                c.epochs = 30;
                c.batch_size = 16;
                c.head_eta = Some(0.1);
                c.val_fraction = Some(0.2);
                c
            }
            "mnist" => {
                let mut c = Self::new(rule, ArchSpec::Named("mlp:784-256-10".into()), DatasetSpec::Mnist { limit: None });
                c.epochs = 5;
                c.batch_size = 64;
                c.head_eta = Some(0.05);
                c
            }
            "deephebb_cifar10" | "fasthebb_cifar10" => {
                let arch = name.trim_end_matches("_cifar10");
                let mut c = Self::new(rule, ArchSpec::Named(arch.into()), DatasetSpec::Cifar10 { limit: None });
                c.epochs = 50;
                c.batch_size = 64;
                c.head_eta = Some(0.01);
                c.lr_schedule = LrSchedule::Cosine;
                c.augment = Augment { hflip: true, crop_pad: 4 };
                c
            }
            _ => unreachable!(),
        };
        cfg.eta = default_eta(rule);
        Ok(cfg)
    }

    pub fn update_rule(&self) -> UpdateRule {
        UpdateRule {
            kind: self.rule,
            tau: self.tau,
            fixed_step: self.fixed_step,
            literal_sign: self.literal_sign,
            aggregation: self.aggregation,
        }
    }

    pub fn head_eta(&self) -> f64 {
        self.head_eta.unwrap_or(self.eta)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a positive number, got {v}")))
            }
        };
        positive("eta", self.eta)?;
        positive("head_eta", self.head_eta())?;
        positive("tau", self.tau)?;
        positive("fixed_step", self.fixed_step)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(f) = self.val_fraction {
            if !(0.0 < f && f < 1.0) {
                return Err(Error::Config(format!("val_fraction must be in (0, 1), got {f}")));
            }
        }
        self.lr_schedule.validate()
    }
}

/// Per-rule starting learning rate for plastic layers. Sign-based rules take
/// unit steps per weight and need a much smaller rate than gradient descent.
pub fn default_eta(rule: RuleKind) -> f64 {
    match rule {
        RuleKind::Ghl | RuleKind::HebbSwta | RuleKind::HebbOja => 0.05,
        RuleKind::SignOnly => 1e-3,
        RuleKind::BackpropSgd => 0.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_configs_resolve_and_validate() {
        for name in NAMED_CONFIGS {
            let c = TrainConfig::named(name).unwrap();
            c.validate().unwrap();
        }
        assert_eq!(TrainConfig::named("blobs_hebb_swta").unwrap().rule, RuleKind::HebbSwta);
        assert_eq!(TrainConfig::named("mnist_mlp_sgd").unwrap().rule, RuleKind::BackpropSgd);
        let err = TrainConfig::named("nope").unwrap_err().to_string();
        assert!(err.contains("blobs_ghl"), "{err}");
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = TrainConfig::named("blobs_ghl").unwrap();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::named("blobs_ghl").unwrap();
        c.eta = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::named("blobs_ghl").unwrap();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        let s = LrSchedule::Step { gamma: 0.5, every_n_epochs: 2 };
        let f: Vec<f64> = (0..5).map(|e| s.factor(e, 5)).collect();
        assert_eq!(f, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
        assert_eq!(LrSchedule::Cosine.factor(0, 4), 1.0);
        assert!((LrSchedule::Cosine.factor(2, 4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(TrainConfig::named("blobs_ghl").unwrap()).unwrap();
        v["learning_rate"] = serde_json::json!(0.1);
        let err = serde_json::from_value::<TrainConfig>(v).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }
}
