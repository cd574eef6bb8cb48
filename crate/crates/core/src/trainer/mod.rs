//! Training loop.
//!
//! One step: forward (recording Hebbian traces when the rule needs them),
//! softmax cross-entropy, backward, per-layer rule dispatch, then
//! `W += η · ΔW`. Plastic layers follow the configured rule; the remaining
//! weighted layers (typically the classifier) use gradient descent with
//! `head_eta`.
//!
//! Randomness comes from three independent streams of one seed: weight
//! initialization, epoch shuffling and augmentation. All results are
//! independent of the rayon thread count.

pub mod ablation;
pub mod checkpoint;
pub mod metrics;
mod config;

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{blobs_task, default_eta, LrSchedule, TrainConfig, NAMED_CONFIGS};

use crate::autodiff::{backward_pass, forward_pass, softmax_cross_entropy, HebbianTrace, Network};
use crate::datasets::{data_dir, load_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::layers::NetworkSpec;
use crate::plasticity::{
    ghl_modulate, oja_update, sgd_update, sign_only_update, swta_magnitude_per_sample, swta_update, unit_norms,
    HebbAggregation, RuleKind, UpdateRule, UpdateTensor,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use checkpoint::Checkpoint;

pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;
pub const AUGMENT_STREAM: u64 = 2;

const EVAL_CHUNK: usize = 500;

/// Fan-in-scaled uniform initialization `U(−√(6/fan_in), √(6/fan_in))`.
///
/// Draws come from `SeededRng::derived(seed, INIT_STREAM)`, layer by layer in
/// index order and row-major within a tensor, each as `−b + 2b·uniform()`.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Result<Vec<Option<Tensor>>> {
    spec.shapes()?;
    let mut rng = SeededRng::derived(seed, INIT_STREAM);
    spec.layers
        .iter()
        .map(|layer| {
            let (Some(shape), Some(fan_in)) = (layer.weight_shape(), layer.fan_in()) else {
                return Ok(None);
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
            Tensor::new(shape, data).map(Some)
        })
        .collect()
}

pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    Network::new(spec.clone(), init_weights(spec, seed)?)
}

/// Everything one step computed for one weighted layer.
#[derive(Debug, Clone)]
pub struct LayerStep {
    pub layer: usize,
    pub plastic: bool,
    /// `∂L/∂W`.
    pub grad: Tensor,
    /// Local Hebbian delta for trace-based rules.
    pub hebb: Option<Tensor>,
    /// Unit-η update.
    pub update: UpdateTensor,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
    pub layers: Vec<LayerStep>,
    /// Hash of logits, loss and gradients. Identical across rules on the
    /// same weights and batch, because only the update differs.
    pub fingerprint: u64,
}

impl StepReport {
    pub fn layer(&self, id: usize) -> Option<&LayerStep> {
        self.layers.iter().find(|l| l.layer == id)
    }
}

fn hash_tensor(h: &mut DefaultHasher, t: &Tensor) {
    for &v in t.data() {
        h.write_u64(v.to_bits());
    }
}

fn layer_label(net: &Network, id: usize) -> String {
    format!("layer {id} ({})", net.layer(id).name())
}

fn plastic_update(rule: &UpdateRule, w: &Tensor, grad: &Tensor, trace: Option<&HebbianTrace>) -> Result<(Option<Tensor>, UpdateTensor)> {
    let need_trace = || trace.ok_or_else(|| Error::State("missing Hebbian trace".into()));
    Ok(match rule.kind {
        RuleKind::Ghl => {
            let hebb = swta_update(need_trace()?, w)?;
            let magnitude = match rule.aggregation {
                HebbAggregation::BatchMean => hebb.clone(),
                HebbAggregation::PerSample => UpdateTensor {
                    delta: swta_magnitude_per_sample(need_trace()?, w)?,
                    rule: RuleKind::HebbSwta,
                },
            };
            (Some(hebb.delta), ghl_modulate(&magnitude, grad, rule.literal_sign)?)
        }
        RuleKind::HebbSwta => {
            let hebb = swta_update(need_trace()?, w)?;
            (Some(hebb.delta.clone()), hebb)
        }
        RuleKind::HebbOja => {
            let hebb = oja_update(need_trace()?, w)?;
            (Some(hebb.delta.clone()), hebb)
        }
        RuleKind::SignOnly => (None, sign_only_update(grad)?),
        RuleKind::BackpropSgd => (None, sgd_update(grad)?),
    })
}

/// Forward, loss, backward and rule dispatch, without touching the weights.
/// `loss_scale` multiplies the loss (and therefore every gradient).
pub fn compute_step(net: &Network, x: &Tensor, labels: &[usize], rule: &UpdateRule, loss_scale: f64) -> Result<StepReport> {
    rule.validate()?;
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let capture = rule.kind.needs_traces().then_some(rule.tau);
    let out = forward_pass(net, x, capture)?;
    let (loss, logit_grad) = softmax_cross_entropy(&out.logits, labels)?;
    if !loss.loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", loss.loss)));
    }
    let logit_grad = logit_grad.scale(loss_scale);
    let grads = backward_pass(net, &out.caches, &logit_grad)?;

    let mut h = DefaultHasher::new();
    hash_tensor(&mut h, &out.logits);
    h.write_u64(loss.loss.to_bits());
    for (_, g) in grads.iter() {
        hash_tensor(&mut h, g);
    }

    let mut layers = Vec::new();
    for (id, grad) in grads.iter() {
        let label = || layer_label(net, id);
        grad.ensure_finite(&format!("gradient of {}", label()))?;
        let w = net.weight(id).expect("gradient implies weights");
        let plastic = net.layer(id).is_plastic();
        let (hebb, update) = if plastic {
            let trace = out.traces.iter().find(|t| t.layer_id == id);
            plastic_update(rule, w, grad, trace)?
        } else {
            (None, sgd_update(grad)?)
        };
        update.delta.ensure_finite(&format!("update of {}", label()))?;
        layers.push(LayerStep {
            layer: id,
            plastic,
            grad: grad.clone(),
            hebb,
            update,
        });
    }
    Ok(StepReport {
        loss: loss.loss * loss_scale,
        correct: count_correct(&out.logits, labels),
        batch: labels.len(),
        layers,
        fingerprint: h.finish(),
    })
}

/// `W += η · step_scale · ΔW` with `η = eta` for plastic layers and
/// `head_eta` otherwise. Returns the mean absolute applied change per layer.
pub fn apply_step(net: &mut Network, report: &StepReport, rule: &UpdateRule, eta: f64, head_eta: f64) -> Result<Vec<f64>> {
    let mut means = Vec::with_capacity(report.layers.len());
    for step in &report.layers {
        let scale = if step.plastic { eta * rule.step_scale() } else { head_eta };
        let label = layer_label(net, step.layer);
        let w = net
            .weight_mut(step.layer)
            .ok_or_else(|| Error::State(format!("{label} has no weights")))?;
        w.axpy(scale, &step.update.delta)?;
        if !w.all_finite() {
            return Err(Error::Numeric(format!("{label}: weights became non-finite")));
        }
        means.push(scale.abs() * step.update.delta.abs().mean());
    }
    Ok(means)
}

pub fn train_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    rule: &UpdateRule,
    eta: f64,
    head_eta: f64,
) -> Result<StepReport> {
    let report = compute_step(net, x, labels, rule, 1.0)?;
    apply_step(net, &report, rule, eta, head_eta)?;
    Ok(report)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and top-1 accuracy, without trace capture.
pub fn evaluate(net: &Network, ds: &LabeledDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let (x, labels) = ds.batch(&idx);
        let out = forward_pass(net, &x, None)?;
        let (loss, _) = softmax_cross_entropy(&out.logits, &labels)?;
        loss_sum += loss.loss * labels.len() as f64;
        correct += count_correct(&out.logits, &labels);
    }
    Ok(Evaluation {
        loss: loss_sum / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
    /// Mean absolute applied change per weight, averaged over the steps
    /// since the previous record.
    pub update_mean: f64,
}

/// One row of training metrics. Train loss and accuracy are running values
/// over the batches since the previous record, measured before each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub val_acc: Option<f64>,
    pub wall_seconds: f64,
    /// Plastic-layer learning rate in the last epoch of the interval.
    pub lr: f64,
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: LabeledDataset,
    pub val: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

impl DataSplits {
    pub fn new(train: LabeledDataset, test: LabeledDataset, val_fraction: Option<f64>) -> Result<Self> {
        match val_fraction {
            Some(f) => {
                let (train, val) = train.split_tail(f)?;
                Ok(Self { train, val: Some(val), test })
            }
            None => Ok(Self { train, val: None, test }),
        }
    }

    /// Load the configured dataset from `root`.
    pub fn load(config: &TrainConfig, root: &Path) -> Result<Self> {
        let (train, test) = load_dataset(&config.dataset, root)?;
        Self::new(train, test, config.val_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub records: Vec<MetricsRecord>,
    /// Optimizer steps taken by this call.
    pub steps: usize,
}

/// Load data from `$GHL_DATA_DIR` and train.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let data = DataSplits::load(config, &data_dir())?;
    train_on(config, &data, None, &mut |_| Ok(()))
}

/// Train on preloaded data, optionally continuing from a checkpoint.
/// `observer` sees every record as soon as it is produced. When
/// `config.checkpoint_path` is set a checkpoint is written after every
/// record.
pub fn train_on(
    config: &TrainConfig,
    data: &DataSplits,
    resume: Option<Checkpoint>,
    observer: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let rule = config.update_rule();
    let (mut net, start_epoch, mut shuffle_rng, mut augment_rng) = match resume {
        Some(ckpt) => {
            if ckpt.config != *config {
                return Err(Error::Config("checkpoint was written with a different configuration".into()));
            }
            (
                ckpt.network,
                ckpt.epoch,
                SeededRng::from_state(&ckpt.shuffle_rng),
                SeededRng::from_state(&ckpt.augment_rng),
            )
        }
        None => {
            let spec = config.arch.resolve(data.train.sample_shape(), data.train.classes)?;
            (
                init_network(&spec, config.seed)?,
                0,
                SeededRng::derived(config.seed, SHUFFLE_STREAM),
                SeededRng::derived(config.seed, AUGMENT_STREAM),
            )
        }
    };
    let weighted = net.weighted_layer_ids();
    let started = Instant::now();
    let mut records = Vec::new();

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut steps = 0usize;
    let mut total_steps = 0usize;
    let mut update_sums = vec![0.0; weighted.len()];

    for epoch in start_epoch..config.epochs {
        let factor = config.lr_schedule.factor(epoch, config.epochs);
        let (eta, head_eta) = (config.eta * factor, config.head_eta() * factor);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for idx in order.chunks(config.batch_size) {
            let (mut x, labels) = data.train.batch(idx);
            if config.augment.is_active() {
                x = config.augment.apply(&x, &mut augment_rng)?;
            }
            let report = compute_step(&net, &x, &labels, &rule, 1.0)?;
            let means = apply_step(&mut net, &report, &rule, eta, head_eta)?;
            loss_sum += report.loss * report.batch as f64;
            correct += report.correct;
            seen += report.batch;
            steps += 1;
            total_steps += 1;
            for (acc, m) in update_sums.iter_mut().zip(&means) {
                *acc += m;
            }
        }

        let done = epoch + 1;
        if done % config.eval_every == 0 || done == config.epochs {
            let layers = weighted
                .iter()
                .zip(&update_sums)
                .map(|(&id, &sum)| {
                    let norms = unit_norms(net.weight(id).unwrap());
                    LayerStats {
                        layer: id,
                        norm_min: norms.iter().cloned().fold(f64::INFINITY, f64::min),
                        norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
                        norm_max: norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        update_mean: sum / steps as f64,
                    }
                })
                .collect();
            let record = MetricsRecord {
                epoch: done,
                train_loss: loss_sum / seen as f64,
                train_acc: correct as f64 / seen as f64,
                test_acc: evaluate(&net, &data.test)?.accuracy,
                val_acc: data.val.as_ref().map(|v| evaluate(&net, v)).transpose()?.map(|e| e.accuracy),
                wall_seconds: started.elapsed().as_secs_f64(),
                lr: eta,
                layers,
            };
            if let Some(path) = &config.checkpoint_path {
                Checkpoint {
                    config: config.clone(),
                    epoch: done,
                    shuffle_rng: shuffle_rng.state(),
                    augment_rng: augment_rng.state(),
                    network: net.clone(),
                }
                .save(path)?;
            }
            observer(&record)?;
            records.push(record);
            loss_sum = 0.0;
            correct = 0;
            seen = 0;
            steps = 0;
            update_sums.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(TrainOutcome {
        network: net,
        records,
        steps: total_steps,
    })
}
