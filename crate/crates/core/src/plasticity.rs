//! Weight-update rules.
//!
//! Every kernel returns a unit-learning-rate delta; the trainer multiplies by
//! η exactly once when applying it.
//!
//! Local rules work on a [`HebbianTrace`] with one row per (sample, position):
//!
//! ```text
//! Oja:   Δw_ik = mean_n  y_nk · (x_ni − y_nk · w_ik)
//! SWTA:  Δw_ik = mean_n  u_nk · (x_ni − y_nk · w_ik),   u_n = softmax(y_n / τ)
//! ```
//!
//! The global rule keeps the SWTA magnitude and takes its direction from the
//! backpropagated gradient `G = ∂L/∂W`:
//!
//! ```text
//! GHL:   ΔW = sign(−G) ⊙ |ΔW_swta|
//! ```
//!
//! The minus sign makes the update descend the loss. Written literally as
//! `sign(G)` and added to the weights, the rule would ascend it; that variant
//! is still available through [`UpdateRule::literal_sign`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::HebbianTrace;
use crate::error::{Error, Result};
use crate::tensor::{sign_scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// SWTA-Hebbian magnitude, global gradient sign.
    Ghl,
    /// Local SWTA-Hebbian rule only.
    HebbSwta,
    /// Local Oja rule only.
    HebbOja,
    /// Gradient sign only, fixed step.
    SignOnly,
    /// Plain gradient descent.
    BackpropSgd,
}

impl RuleKind {
    pub const ALL: [RuleKind; 5] = [
        RuleKind::Ghl,
        RuleKind::HebbSwta,
        RuleKind::HebbOja,
        RuleKind::SignOnly,
        RuleKind::BackpropSgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Ghl => "ghl",
            RuleKind::HebbSwta => "hebb_swta",
            RuleKind::HebbOja => "hebb_oja",
            RuleKind::SignOnly => "sign_only",
            RuleKind::BackpropSgd => "backprop_sgd",
        }
    }

    /// Whether the rule reads Hebbian traces.
    pub fn needs_traces(self) -> bool {
        matches!(self, RuleKind::Ghl | RuleKind::HebbSwta | RuleKind::HebbOja)
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "ghl" => Ok(RuleKind::Ghl),
            "hebb_swta" | "swta" => Ok(RuleKind::HebbSwta),
            "hebb_oja" | "oja" => Ok(RuleKind::HebbOja),
            "sign_only" | "sign" => Ok(RuleKind::SignOnly),
            "backprop_sgd" | "sgd" | "bp" => Ok(RuleKind::BackpropSgd),
            _ => Err(Error::Config(format!(
                "unknown rule '{s}'; accepted: ghl, hebb_swta, hebb_oja, sign_only, backprop_sgd"
            ))),
        }
    }
}

/// How per-row Hebbian deltas are combined before sign modulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HebbAggregation {
    /// Average signed deltas over the batch, then take the magnitude.
    #[default]
    BatchMean,
    /// Average per-row magnitudes.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: RuleKind,
    /// Softmax temperature of the competition.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Step multiplier for [`RuleKind::SignOnly`].
    #[serde(default = "default_fixed_step")]
    pub fixed_step: f64,
    /// Use `sign(G)` instead of `sign(−G)` for GHL.
    #[serde(default)]
    pub literal_sign: bool,
    #[serde(default)]
    pub aggregation: HebbAggregation,
}

fn default_tau() -> f64 {
    1.0
}

fn default_fixed_step() -> f64 {
    1.0
}

impl UpdateRule {
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            tau: default_tau(),
            fixed_step: default_fixed_step(),
            literal_sign: false,
            aggregation: HebbAggregation::BatchMean,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.fixed_step > 0.0 && self.fixed_step.is_finite()) {
            return Err(Error::Parameter(format!(
                "fixed_step must be positive, got {}",
                self.fixed_step
            )));
        }
        Ok(())
    }

    /// Factor applied on top of η when the delta is applied.
    pub fn step_scale(&self) -> f64 {
        match self.kind {
            RuleKind::SignOnly => self.fixed_step,
            _ => 1.0,
        }
    }
}

/// A per-layer delta with the rule that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateTensor {
    pub delta: Tensor,
    pub rule: RuleKind,
}

/// Which postsynaptic quantity gates the Hebbian term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gate {
    Linear,
    Competition,
}

/// View weights as `fan_in × units`, the orientation of a trace.
fn weights_as_trace_layout(w: &Tensor) -> Result<Tensor> {
    match *w.shape() {
        [_, _] => Ok(w.clone()),
        [oc, c, kh, kw] => w.clone().reshape(&[oc, c * kh * kw])?.transpose(),
        _ => Err(Error::Dimension(format!(
            "plastic weights must be 2-d or 4-d, got {:?}",
            w.shape()
        ))),
    }
}

/// Inverse of [`weights_as_trace_layout`].
fn to_weight_layout(delta: Tensor, w_shape: &[usize]) -> Result<Tensor> {
    match *w_shape {
        [_, _] => Ok(delta),
        [..] => delta.transpose()?.reshape(w_shape),
    }
}

fn check_trace(trace: &HebbianTrace, wt: &Tensor) -> Result<()> {
    let expected = [trace.fan_in(), trace.units()];
    if wt.shape() != expected {
        return Err(Error::Dimension(format!(
            "trace of layer {} is {}×{} (fan_in×units), weights give {:?}",
            trace.layer_id,
            expected[0],
            expected[1],
            wt.shape()
        )));
    }
    if trace.post_linear.shape()[0] != trace.rows() || trace.competition.shape() != trace.post_linear.shape() {
        return Err(Error::Dimension(format!(
            "trace of layer {} has inconsistent row counts",
            trace.layer_id
        )));
    }
    Ok(())
}

/// `mean_n g_nk (x_ni − y_nk w_ik)` in trace layout, factored as
/// `(xᵀg − w ⊙ 1ᵀ(g⊙y)) / N`.
fn gated_hebbian(trace: &HebbianTrace, w: &Tensor, gate: Gate) -> Result<Tensor> {
    let wt = weights_as_trace_layout(w)?;
    check_trace(trace, &wt)?;
    let g = match gate {
        Gate::Linear => &trace.post_linear,
        Gate::Competition => &trace.competition,
    };
    let units = trace.units();
    let mut decay = vec![0.0; units];
    for (gr, yr) in g.data().chunks(units).zip(trace.post_linear.data().chunks(units)) {
        for ((d, &gv), &yv) in decay.iter_mut().zip(gr).zip(yr) {
            *d += gv * yv;
        }
    }
    let mut delta = trace.pre.matmul_tn(g)?;
    let inv_n = 1.0 / trace.rows() as f64;
    for (row_d, row_w) in delta.data_mut().chunks_mut(units).zip(wt.data().chunks(units)) {
        for ((d, &wv), &dk) in row_d.iter_mut().zip(row_w).zip(&decay) {
            *d = (*d - wv * dk) * inv_n;
        }
    }
    to_weight_layout(delta, w.shape())
}

/// Oja's rule, averaged over the batch and spatial positions.
pub fn oja_update(trace: &HebbianTrace, w: &Tensor) -> Result<UpdateTensor> {
    Ok(UpdateTensor {
        delta: gated_hebbian(trace, w, Gate::Linear)?,
        rule: RuleKind::HebbOja,
    })
}

/// Soft winner-take-all Hebbian rule: Oja's form gated by the competition.
pub fn swta_update(trace: &HebbianTrace, w: &Tensor) -> Result<UpdateTensor> {
    Ok(UpdateTensor {
        delta: gated_hebbian(trace, w, Gate::Competition)?,
        rule: RuleKind::HebbSwta,
    })
}

/// Per-row SWTA deltas in weight layout, one tensor per (sample, position).
pub fn per_position_swta_deltas(trace: &HebbianTrace, w: &Tensor) -> Result<Vec<Tensor>> {
    let wt = weights_as_trace_layout(w)?;
    check_trace(trace, &wt)?;
    let (fan_in, units) = (trace.fan_in(), trace.units());
    (0..trace.rows())
        .map(|n| {
            let x = trace.pre.row(n);
            let y = trace.post_linear.row(n);
            let u = trace.competition.row(n);
            let mut d = vec![0.0; fan_in * units];
            for i in 0..fan_in {
                for k in 0..units {
                    d[i * units + k] = u[k] * (x[i] - y[k] * wt.data()[i * units + k]);
                }
            }
            to_weight_layout(Tensor::new(vec![fan_in, units], d)?, w.shape())
        })
        .collect()
}

/// `mean_n |u_nk (x_ni − y_nk w_ik)|` in weight layout.
pub fn swta_magnitude_per_sample(trace: &HebbianTrace, w: &Tensor) -> Result<Tensor> {
    let wt = weights_as_trace_layout(w)?;
    check_trace(trace, &wt)?;
    let (fan_in, units) = (trace.fan_in(), trace.units());
    let mut acc = vec![0.0; fan_in * units];
    let wd = wt.data();
    for n in 0..trace.rows() {
        let x = trace.pre.row(n);
        let y = trace.post_linear.row(n);
        let u = trace.competition.row(n);
        for (i, &xi) in x.iter().enumerate() {
            let row = &mut acc[i * units..(i + 1) * units];
            let wrow = &wd[i * units..(i + 1) * units];
            for k in 0..units {
                row[k] += (u[k] * (xi - y[k] * wrow[k])).abs();
            }
        }
    }
    let inv_n = 1.0 / trace.rows() as f64;
    acc.iter_mut().for_each(|v| *v *= inv_n);
    to_weight_layout(Tensor::new(vec![fan_in, units], acc)?, w.shape())
}

/// Arithmetic mean of per-(sample, position) deltas.
pub fn conv_aggregate(deltas: &[Tensor]) -> Result<Tensor> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Shape("cannot aggregate an empty set of positions".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for d in deltas {
        acc.axpy(1.0, d)?;
    }
    Ok(acc.scale(1.0 / deltas.len() as f64))
}

/// Direction from the gradient sign, magnitude from the Hebbian delta.
/// Entries with `G = 0` or a zero Hebbian delta stay zero.
pub fn ghl_modulate(hebb: &UpdateTensor, grad: &Tensor, literal_sign: bool) -> Result<UpdateTensor> {
    if hebb.delta.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "hebbian delta {:?} and gradient {:?} differ",
            hebb.delta.shape(),
            grad.shape()
        )));
    }
    hebb.delta.ensure_finite("hebbian delta")?;
    let flip = if literal_sign { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(grad.len());
    for (i, (&h, &g)) in hebb.delta.data().iter().zip(grad.data()).enumerate() {
        let s = sign_scalar(g).ok_or_else(|| Error::Numeric(format!("NaN gradient at flat index {i}")))?;
        out.push(flip * s * h.abs());
    }
    Ok(UpdateTensor {
        delta: Tensor::new(grad.shape().to_vec(), out)?,
        rule: RuleKind::Ghl,
    })
}

/// `sign(−G)`: unit steps, no momentum or error feedback. The fixed step
/// size is applied with η (see [`UpdateRule::step_scale`]).
pub fn sign_only_update(grad: &Tensor) -> Result<UpdateTensor> {
    Ok(UpdateTensor {
        delta: grad.sign()?.scale(-1.0),
        rule: RuleKind::SignOnly,
    })
}

/// `−G`.
pub fn sgd_update(grad: &Tensor) -> Result<UpdateTensor> {
    grad.ensure_finite("gradient")?;
    Ok(UpdateTensor {
        delta: grad.scale(-1.0),
        rule: RuleKind::BackpropSgd,
    })
}

/// L2 norm of each output unit's incoming weights (dense columns, conv
/// output channels).
pub fn unit_norms(w: &Tensor) -> Vec<f64> {
    match *w.shape() {
        [inputs, outputs] => (0..outputs)
            .map(|k| (0..inputs).map(|i| w.data()[i * outputs + k].powi(2)).sum::<f64>().sqrt())
            .collect(),
        _ => {
            let oc = w.shape()[0];
            w.data()
                .chunks(w.len() / oc)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        }
    }
}
