//! Sequential forward/backward engine.
//!
//! A forward pass optionally captures one [`HebbianTrace`] per plastic layer:
//! the layer input `x`, its linear output `y` and the competition
//! `u = softmax(y / τ)`. Traces are laid out with one row per
//! (sample, spatial position), so a conv layer looks like a dense layer whose
//! batch is `B·P` and whose inputs are the receptive-field patches.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{LayerCache, LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

/// Layer stack plus its weights (`None` for unweighted layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    weights: Vec<Option<Tensor>>,
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: Vec<Option<Tensor>>) -> Result<Self> {
        spec.shapes()?;
        if weights.len() != spec.layers.len() {
            return Err(Error::Dimension(format!(
                "{} weight slots for {} layers",
                weights.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, w)) in spec.layers.iter().zip(&weights).enumerate() {
            match (layer.weight_shape(), w) {
                (Some(shape), Some(w)) if w.shape() == shape.as_slice() => {}
                (None, None) => {}
                (expected, got) => {
                    return Err(Error::Dimension(format!(
                        "layer {i} ({}): expected weights {expected:?}, got {:?}",
                        layer.name(),
                        got.as_ref().map(|t| t.shape().to_vec())
                    )))
                }
            }
        }
        Ok(Self { spec, weights })
    }

    /// All weights zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let weights = spec
            .layers
            .iter()
            .map(|l| l.weight_shape().map(|s| Tensor::zeros(&s)))
            .collect();
        Self::new(spec, weights)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Option<Tensor>] {
        &self.weights
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        self.weights.get(layer).and_then(|w| w.as_ref())
    }

    pub fn weight_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.weights.get_mut(layer).and_then(|w| w.as_mut())
    }

    pub fn layer(&self, i: usize) -> &LayerSpec {
        &self.spec.layers[i]
    }

    pub fn weighted_layer_ids(&self) -> Vec<usize> {
        self.spec.weighted_layers().map(|(i, _)| i).collect()
    }
}

/// Pre/post activity of one plastic layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HebbianTrace {
    pub layer_id: usize,
    /// `N × fan_in`, `N = batch · positions`.
    pub pre: Tensor,
    /// `N × units`, linear output before any activation.
    pub post_linear: Tensor,
    /// `N × units`, softmax of `post_linear / τ` per row.
    pub competition: Tensor,
    pub batch: usize,
    /// Spatial positions per sample (1 for dense layers).
    pub positions: usize,
}

impl HebbianTrace {
    pub fn from_dense(layer_id: usize, x: &Tensor, y: &Tensor, tau: f64) -> Result<Self> {
        let batch = x.shape()[0];
        Ok(Self {
            layer_id,
            pre: x.clone(),
            post_linear: y.clone(),
            competition: y.softmax_temp(tau)?,
            batch,
            positions: 1,
        })
    }

    /// Build from per-sample im2col matrices (`fan_in × P`) and the conv
    /// output `B × out_c × oh × ow`.
    pub fn from_conv(layer_id: usize, cols: &[Tensor], y: &Tensor, tau: f64) -> Result<Self> {
        let batch = cols.len();
        let (fan_in, positions) = match *cols.first().ok_or_else(|| Error::State("empty conv cache".into()))?.shape() {
            [f, p] => (f, p),
            _ => return Err(Error::State("conv cache is not a matrix".into())),
        };
        let units = y.shape()[1];
        let mut pre = Vec::with_capacity(batch * positions * fan_in);
        let mut post = Vec::with_capacity(batch * positions * units);
        for (s, col) in cols.iter().enumerate() {
            pre.extend_from_slice(col.transpose()?.data());
            let ys = Tensor::new(vec![units, positions], y.row(s).to_vec())?;
            post.extend_from_slice(ys.transpose()?.data());
        }
        let post_linear = Tensor::new(vec![batch * positions, units], post)?;
        Ok(Self {
            layer_id,
            pre: Tensor::new(vec![batch * positions, fan_in], pre)?,
            competition: post_linear.softmax_temp(tau)?,
            post_linear,
            batch,
            positions,
        })
    }

    pub fn rows(&self) -> usize {
        self.pre.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.post_linear.shape()[1]
    }

    pub fn fan_in(&self) -> usize {
        self.pre.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub caches: Vec<LayerCache>,
    pub traces: Vec<HebbianTrace>,
}

/// Run the stack on `x` (`B × input_shape`). With `capture = Some(τ)` a trace
/// is recorded for every plastic layer.
pub fn forward_pass(net: &Network, x: &Tensor, capture: Option<f64>) -> Result<ForwardOutput> {
    if x.ndim() < 2 || x.shape()[1..] != net.spec.input_shape[..] {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match network input {:?}",
            x.shape(),
            net.spec.input_shape
        )));
    }
    let mut caches = Vec::with_capacity(net.spec.layers.len());
    let mut traces = Vec::new();
    let mut current = x.clone();
    for (i, layer) in net.spec.layers.iter().enumerate() {
        let (y, cache) = layer
            .forward(&current, net.weight(i))
            .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.name())))?;
        if let (Some(tau), true) = (capture, layer.is_plastic()) {
            let trace = match &cache {
                LayerCache::Dense { input } => HebbianTrace::from_dense(i, input, &y, tau)?,
                LayerCache::Conv { cols, .. } => HebbianTrace::from_conv(i, cols, &y, tau)?,
                _ => unreachable!("only weighted layers are plastic"),
            };
            traces.push(trace);
        }
        caches.push(cache);
        current = y;
    }
    Ok(ForwardOutput {
        logits: current,
        caches,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits,
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(LossValue, Tensor)> {
    let (b, k) = logits.as_matrix("cross-entropy logits")?;
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let probs = logits.softmax_temp(1.0)?;
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (n, &label) in labels.iter().enumerate() {
        let row = logits.row(n);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad[n * k + label] -= 1.0;
    }
    let inv_b = 1.0 / b as f64;
    for g in grad.iter_mut() {
        *g *= inv_b;
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy loss is {loss}")));
    }
    Ok((
        LossValue {
            loss,
            logits: logits.clone(),
            labels: labels.to_vec(),
        },
        Tensor::new(vec![b, k], grad)?,
    ))
}

/// Weight gradient per weighted layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub grads: BTreeMap<usize, Tensor>,
}

impl GradientSet {
    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.grads.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

/// Reverse traversal of the stack from `logit_grad`.
pub fn backward_pass(net: &Network, caches: &[LayerCache], logit_grad: &Tensor) -> Result<GradientSet> {
    if caches.len() != net.spec.layers.len() {
        return Err(Error::State(format!(
            "{} caches for {} layers",
            caches.len(),
            net.spec.layers.len()
        )));
    }
    let mut grads = BTreeMap::new();
    let mut upstream = logit_grad.clone();
    // layers before the first weighted one need no input gradient
    let first_weighted = net.weighted_layer_ids().first().copied().unwrap_or(0);
    for i in (0..net.spec.layers.len()).rev() {
        let layer = &net.spec.layers[i];
        let need_input = i > first_weighted;
        let g = layer.backward(net.weight(i), &upstream, &caches[i], need_input)?;
        if let Some(w) = g.weight {
            grads.insert(i, w);
        }
        match g.input {
            Some(input) => upstream = input,
            None => break,
        }
    }
    Ok(GradientSet { grads })
}

/// Mean cross-entropy of the network on `(x, labels)`.
pub fn loss_of(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let out = forward_pass(net, x, None)?;
    Ok(softmax_cross_entropy(&out.logits, labels)?.0.loss)
}

/// Central differences `(L(w+ε) - L(w-ε)) / 2ε` for every weight, each loss
/// from a full forward pass.
pub fn finite_difference_gradient(net: &Network, x: &Tensor, labels: &[usize], eps: f64) -> Result<GradientSet> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = net.clone();
    let mut grads = BTreeMap::new();
    for layer in net.weighted_layer_ids() {
        let n = net.weight(layer).unwrap().len();
        let mut g = vec![0.0; n];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = net.weight(layer).unwrap().data()[j];
            probe.weight_mut(layer).unwrap().data_mut()[j] = orig + eps;
            let plus = loss_of(&probe, x, labels)?;
            probe.weight_mut(layer).unwrap().data_mut()[j] = orig - eps;
            let minus = loss_of(&probe, x, labels)?;
            probe.weight_mut(layer).unwrap().data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        grads.insert(layer, Tensor::new(net.weight(layer).unwrap().shape().to_vec(), g)?);
    }
    Ok(GradientSet { grads })
}

/// Denominator floor for [`relative_error`]. Central differences at
/// ε = 1e-5 on an O(1) loss carry roughly 1e-10 absolute error, so entries
/// smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer_id: usize,
    pub kind: &'static str,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

/// Compare two gradient sets layer by layer.
pub fn compare_gradients(net: &Network, analytic: &GradientSet, numeric: &GradientSet) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    for (layer, a) in analytic.iter() {
        let n = numeric
            .get(layer)
            .ok_or_else(|| Error::State(format!("no numeric gradient for layer {layer}")))?;
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        for (&x, &y) in a.data().iter().zip(n.data()) {
            rel = rel.max(relative_error(x, y));
            abs = abs.max((x - y).abs());
        }
        out.push(LayerCheck {
            layer_id: layer,
            kind: net.layer(layer).name(),
            max_relative_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(out)
}

/// Analytic vs. finite-difference gradients on one batch.
pub fn gradient_check(net: &Network, x: &Tensor, labels: &[usize], eps: f64) -> Result<Vec<LayerCheck>> {
    let out = forward_pass(net, x, None)?;
    let (_, logit_grad) = softmax_cross_entropy(&out.logits, labels)?;
    let analytic = backward_pass(net, &out.caches, &logit_grad)?;
    let numeric = finite_difference_gradient(net, x, labels, eps)?;
    compare_gradients(net, &analytic, &numeric)
}
