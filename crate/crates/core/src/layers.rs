//! Layer descriptions with forward evaluation and reverse-mode derivatives.
//!
//! Shapes inside a [`NetworkSpec`] are per-sample; at run time every tensor
//! carries a leading batch axis. Weighted layers have no bias. Dense weights
//! are stored `inputs × outputs`, conv weights `out_c × in_c × k × k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{col2im, im2col, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Relu,
    /// Channel-mean-subtracted rectified power, `max(0, u - mean_c u)^p`.
    Triangle { p: f64 },
}

impl ActivationKind {
    pub fn triangle() -> Self {
        ActivationKind::Triangle { p: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        plastic: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        plastic: bool,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Activation {
        activation: ActivationKind,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, plastic: bool) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            plastic,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, pad: usize, plastic: bool) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad,
            plastic,
        }
    }

    pub fn act(activation: ActivationKind) -> Self {
        LayerSpec::Activation { activation }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Activation { .. } => "activation",
        }
    }

    pub fn is_plastic(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { plastic: true, .. } | LayerSpec::Conv2d { plastic: true, .. }
        )
    }

    pub fn set_plastic(&mut self, value: bool) {
        match self {
            LayerSpec::Dense { plastic, .. } | LayerSpec::Conv2d { plastic, .. } => *plastic = value,
            _ => {}
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![inputs, outputs]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    /// Number of inputs feeding one output unit.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => Some(in_channels * kernel * kernel),
            _ => None,
        }
    }

    fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv2d {
                kernel, stride, pad, ..
            } => Some(ConvGeometry {
                kh: kernel,
                kw: kernel,
                stride,
                pad,
            }),
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => Some(ConvGeometry {
                kh: size,
                kw: size,
                stride,
                pad: 0,
            }),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [*inputs] {
                    return Err(Error::Dimension(format!(
                        "dense expects input [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let geom = ConvGeometry::new(*kernel, *kernel, *stride, *pad)?;
                match *input {
                    [c, h, w] if c == *in_channels => {
                        let (oh, ow) = geom.output_dims(h, w)?;
                        Ok(vec![*out_channels, oh, ow])
                    }
                    _ => Err(Error::Dimension(format!(
                        "conv2d expects input [{in_channels}, H, W], got {input:?}"
                    ))),
                }
            }
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                let geom = ConvGeometry::new(*size, *size, *stride, 0)?;
                match *input {
                    [c, h, w] => {
                        let (oh, ow) = geom.output_dims(h, w)?;
                        Ok(vec![c, oh, ow])
                    }
                    _ => Err(Error::Dimension(format!(
                        "pooling expects input [C, H, W], got {input:?}"
                    ))),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Activation { activation } => {
                if let ActivationKind::Triangle { p } = activation {
                    check_power(*p)?;
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Evaluate the layer on a batch. `weights` must be present exactly for
    /// weighted layers.
    pub fn forward(&self, x: &Tensor, weights: Option<&Tensor>) -> Result<(Tensor, LayerCache)> {
        match self {
            LayerSpec::Dense { .. } => {
                let w = require_weights(self, weights)?;
                let y = dense_forward(x, w)?;
                Ok((y, LayerCache::Dense { input: x.clone() }))
            }
            LayerSpec::Conv2d { .. } => {
                let w = require_weights(self, weights)?;
                let geom = self.geometry().unwrap();
                let (y, cols) = conv2d_lowered(x, w, geom)?;
                Ok((
                    y,
                    LayerCache::Conv {
                        cols,
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerSpec::MaxPool { .. } => {
                let (y, argmax) = max_pool(x, self.geometry().unwrap())?;
                Ok((
                    y,
                    LayerCache::MaxPool {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerSpec::AvgPool { .. } => {
                let y = avg_pool(x, self.geometry().unwrap())?;
                Ok((
                    y,
                    LayerCache::AvgPool {
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerSpec::Flatten => {
                let b = x.shape()[0];
                let n = x.len() / b;
                let y = x.clone().reshape(&[b, n])?;
                Ok((
                    y,
                    LayerCache::Flatten {
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerSpec::Activation { activation } => {
                let y = activate(x, *activation)?;
                Ok((y, LayerCache::Activation { input: x.clone() }))
            }
        }
    }

    /// Reverse-mode derivative of [`forward`](Self::forward).
    ///
    /// The input gradient is skipped when `need_input_grad` is false (first
    /// layer of a network).
    pub fn backward(
        &self,
        weights: Option<&Tensor>,
        upstream: &Tensor,
        cache: &LayerCache,
        need_input_grad: bool,
    ) -> Result<LayerGrads> {
        match (self, cache) {
            (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
                let w = require_weights(self, weights)?;
                let weight = input.matmul_tn(upstream)?;
                let input = if need_input_grad {
                    Some(upstream.matmul_nt(w)?)
                } else {
                    None
                };
                Ok(LayerGrads {
                    input,
                    weight: Some(weight),
                })
            }
            (LayerSpec::Conv2d { .. }, LayerCache::Conv { cols, input_shape }) => {
                let w = require_weights(self, weights)?;
                conv2d_backward(w, upstream, cols, input_shape, self.geometry().unwrap(), need_input_grad)
            }
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax, input_shape }) => {
                if upstream.len() != argmax.len() {
                    return Err(Error::State("maxpool cache does not match upstream gradient".into()));
                }
                let mut dx = Tensor::zeros(input_shape);
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(upstream.data()) {
                    d[src] += g;
                }
                Ok(LayerGrads::input_only(dx))
            }
            (LayerSpec::AvgPool { .. }, LayerCache::AvgPool { input_shape }) => Ok(LayerGrads::input_only(
                avg_pool_backward(upstream, input_shape, self.geometry().unwrap())?,
            )),
            (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => {
                Ok(LayerGrads::input_only(upstream.clone().reshape(input_shape)?))
            }
            (LayerSpec::Activation { activation }, LayerCache::Activation { input }) => Ok(
                LayerGrads::input_only(activation_backward(input, upstream, *activation)?),
            ),
            (spec, _) => Err(Error::State(format!(
                "cache does not belong to a {} layer",
                spec.name()
            ))),
        }
    }
}

/// Values saved by a forward call for the matching backward call.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense { input: Tensor },
    /// Per-sample im2col matrices, each `(C·k·k) × P`.
    Conv { cols: Vec<Tensor>, input_shape: Vec<usize> },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Activation { input: Tensor },
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
}

impl LayerGrads {
    fn input_only(t: Tensor) -> Self {
        Self {
            input: Some(t),
            weight: None,
        }
    }
}

/// Sequential stack of layers with a per-sample input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Per-sample output shape of every layer; fails on the first
    /// incompatible pair, naming the layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.output_shape(&current).map_err(|e| {
                Error::Dimension(format!("layer {i} ({}): {e}", layer.name()))
            })?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight_shape().is_some())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weight_shape())
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

fn require_weights<'a>(layer: &LayerSpec, w: Option<&'a Tensor>) -> Result<&'a Tensor> {
    let w = w.ok_or_else(|| Error::State(format!("{} layer called without weights", layer.name())))?;
    let expected = layer.weight_shape().unwrap();
    if w.shape() != expected.as_slice() {
        return Err(Error::Dimension(format!(
            "{} weights have shape {:?}, expected {expected:?}",
            layer.name(),
            w.shape()
        )));
    }
    Ok(w)
}

fn check_power(p: f64) -> Result<()> {
    if p > 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("triangle exponent must be positive, got {p}")))
    }
}

/// `y = x · W` for `x: B×in`, `W: in×out`.
pub fn dense_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.matmul(w)
}

/// Cross-correlation of `x: B×C×H×W` with `w: out_c×C×k×k`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (kh, kw) = match w.shape() {
        &[_, _, kh, kw] => (kh, kw),
        s => return Err(Error::Dimension(format!("conv weights must be 4-d, got {s:?}"))),
    };
    Ok(conv2d_lowered(x, w, ConvGeometry::new(kh, kw, stride, pad)?)?.0)
}

fn conv2d_lowered(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<(Tensor, Vec<Tensor>)> {
    let (b, c, h, wd) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::Dimension(format!("conv2d expects B×C×H×W input, got {:?}", x.shape()))),
    };
    let (oc, wc) = (w.shape()[0], w.shape()[1]);
    if wc != c {
        return Err(Error::Dimension(format!(
            "conv2d weights take {wc} channels, input has {c}"
        )));
    }
    let (oh, ow) = geom.output_dims(h, wd)?;
    let wmat = w.clone().reshape(&[oc, c * geom.kh * geom.kw])?;
    let mut out = Vec::with_capacity(b * oc * oh * ow);
    let mut cols = Vec::with_capacity(b);
    for s in 0..b {
        let sample = Tensor::new(vec![c, h, wd], x.row(s).to_vec())?;
        let col = im2col(&sample, geom)?;
        out.extend_from_slice(wmat.matmul(&col)?.data());
        cols.push(col);
    }
    Ok((Tensor::new(vec![b, oc, oh, ow], out)?, cols))
}

fn conv2d_backward(
    w: &Tensor,
    upstream: &Tensor,
    cols: &[Tensor],
    input_shape: &[usize],
    geom: ConvGeometry,
    need_input_grad: bool,
) -> Result<LayerGrads> {
    let (b, c, h, wd) = match *input_shape {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::State("conv cache holds a malformed input shape".into())),
    };
    let oc = w.shape()[0];
    let ckk = c * geom.kh * geom.kw;
    if cols.len() != b || upstream.shape().first() != Some(&b) || upstream.len() != b * oc * cols[0].shape()[1] {
        return Err(Error::State("conv cache does not match upstream gradient".into()));
    }
    let p = cols[0].shape()[1];
    let wmat = w.clone().reshape(&[oc, ckk])?;
    let mut dw = Tensor::zeros(&[oc, ckk]);
    let mut dx = if need_input_grad {
        Some(Vec::with_capacity(b * c * h * wd))
    } else {
        None
    };
    for (s, col) in cols.iter().enumerate() {
        let g = Tensor::new(vec![oc, p], upstream.row(s).to_vec())?;
        dw.axpy(1.0, &g.matmul_nt(col)?)?;
        if let Some(dx) = dx.as_mut() {
            let dcol = wmat.matmul_tn(&g)?;
            dx.extend_from_slice(col2im(&dcol, c, h, wd, geom)?.data());
        }
    }
    Ok(LayerGrads {
        input: dx.map(|d| Tensor::new(input_shape.to_vec(), d)).transpose()?,
        weight: Some(dw.reshape(w.shape())?),
    })
}

fn pool_dims(x: &Tensor, geom: ConvGeometry) -> Result<(usize, usize, usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => {
            let (oh, ow) = geom.output_dims(h, w)?;
            Ok((b * c, h, w, oh, ow, b))
        }
        _ => Err(Error::Dimension(format!("pooling expects B×C×H×W input, got {:?}", x.shape()))),
    }
}

fn max_pool(x: &Tensor, geom: ConvGeometry) -> Result<(Tensor, Vec<usize>)> {
    let (planes, h, w, oh, ow, _) = pool_dims(x, geom)?;
    let src = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for i in 0..geom.kh {
                    for j in 0..geom.kw {
                        let idx = base + (oy * geom.stride + i) * w + ox * geom.stride + j;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    Ok((Tensor::new(shape, out)?, argmax))
}

fn avg_pool(x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (planes, h, w, oh, ow, _) = pool_dims(x, geom)?;
    let src = x.data();
    let norm = 1.0 / (geom.kh * geom.kw) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..geom.kh {
                    for j in 0..geom.kw {
                        acc += src[base + (oy * geom.stride + i) * w + ox * geom.stride + j];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    Tensor::new(shape, out)
}

fn avg_pool_backward(upstream: &Tensor, input_shape: &[usize], geom: ConvGeometry) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape);
    let (planes, h, w, oh, ow, _) = pool_dims(&dx, geom)?;
    if upstream.len() != planes * oh * ow {
        return Err(Error::State("avgpool cache does not match upstream gradient".into()));
    }
    let norm = 1.0 / (geom.kh * geom.kw) as f64;
    let g = upstream.data();
    let d = dx.data_mut();
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(plane * oh + oy) * ow + ox] * norm;
                for i in 0..geom.kh {
                    for j in 0..geom.kw {
                        d[base + (oy * geom.stride + i) * w + ox * geom.stride + j] += gv;
                    }
                }
            }
        }
    }
    Ok(dx)
}

pub fn activate(x: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    match kind {
        ActivationKind::Identity => Ok(x.clone()),
        ActivationKind::Relu => Ok(x.map(|v| v.max(0.0))),
        ActivationKind::Triangle { p } => triangle_activation(x, p),
    }
}

/// Split a `B×C×...` tensor into (sites per sample, channels, spatial size).
fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::Dimension(format!(
            "channel activation needs a batch and channel axis, got {:?}",
            x.shape()
        )));
    }
    let b = x.shape()[0];
    let c = x.shape()[1];
    Ok((b, c, x.len() / (b * c)))
}

/// `max(0, u - ū)^p`, with `ū` the mean over the channel axis (axis 1) at
/// each (sample, spatial) site.
pub fn triangle_activation(u: &Tensor, p: f64) -> Result<Tensor> {
    check_power(p)?;
    let (b, c, s) = channel_layout(u)?;
    let src = u.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        for site in 0..s {
            let at = |ch: usize| (n * c + ch) * s + site;
            let (lo, hi) = (0..c).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), ch| {
                (lo.min(src[at(ch)]), hi.max(src[at(ch)]))
            });
            // clamped so that equal channels yield exactly zero despite rounding
            let mean = ((0..c).map(|ch| src[at(ch)]).sum::<f64>() / c as f64).clamp(lo, hi);
            for ch in 0..c {
                let d = src[at(ch)] - mean;
                out[at(ch)] = if d > 0.0 {
                    if p == 1.0 {
                        d
                    } else {
                        d.powf(p)
                    }
                } else {
                    0.0
                };
            }
        }
    }
    Tensor::new(u.shape().to_vec(), out)
}

fn activation_backward(input: &Tensor, upstream: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::State(format!(
            "activation cache {:?} does not match upstream {:?}",
            input.shape(),
            upstream.shape()
        )));
    }
    match kind {
        ActivationKind::Identity => Ok(upstream.clone()),
        ActivationKind::Relu => input.zip_with(upstream, |x, g| if x > 0.0 { g } else { 0.0 }),
        ActivationKind::Triangle { p } => {
            let (b, c, s) = channel_layout(input)?;
            let src = input.data();
            let g = upstream.data();
            let mut dx = vec![0.0; src.len()];
            let mut gated = vec![0.0; c];
            for n in 0..b {
                for site in 0..s {
                    let at = |ch: usize| (n * c + ch) * s + site;
                    let (lo, hi) = (0..c).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), ch| {
                (lo.min(src[at(ch)]), hi.max(src[at(ch)]))
            });
            // clamped so that equal channels yield exactly zero despite rounding
            let mean = ((0..c).map(|ch| src[at(ch)]).sum::<f64>() / c as f64).clamp(lo, hi);
                    for (ch, slot) in gated.iter_mut().enumerate() {
                        let d = src[at(ch)] - mean;
                        *slot = if d > 0.0 {
                            if p == 1.0 {
                                g[at(ch)]
                            } else {
                                g[at(ch)] * p * d.powf(p - 1.0)
                            }
                        } else {
                            0.0
                        };
                    }
                    // the mean term routes -1/C of every gated gradient to each channel
                    let gated_mean = gated.iter().sum::<f64>() / c as f64;
                    for (ch, &gv) in gated.iter().enumerate() {
                        dx[at(ch)] = gv - gated_mean;
                    }
                }
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
    }
}
