//! Named architectures.
//!
//! | name                   | layers                                                       |
//! |------------------------|--------------------------------------------------------------|
//! | `mlp:A-B-..-K[:act]`   | dense stack, hidden layers plastic, `act` ∈ relu/triangle/identity (default relu) |
//! | `deephebb`             | conv 96 (5×5), 384 (3×3), 1536 (3×3), each Triangle + 2×2 max-pool; linear classifier |
//! | `fasthebb`             | conv 96, 128, 192, 256 (3×3), each ReLU + 2×2 max-pool; dense 4096; linear classifier |
//! | `tiny_mlp`             | `mlp:<in>-8-<classes>`                                       |
//! | `tiny_conv`            | conv 4 (3×3) + Triangle + 2×2 max-pool; linear classifier    |
//!
//! Image inputs are flattened in front of an MLP. The classifier is never
//! plastic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ActivationKind, LayerSpec, NetworkSpec};

pub const PRESETS: [&str; 4] = ["deephebb", "fasthebb", "tiny_mlp", "tiny_conv"];

/// A preset name or a fully spelled-out network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Named(String),
    Inline(NetworkSpec),
}

impl ArchSpec {
    pub fn resolve(&self, input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
        let spec = match self {
            ArchSpec::Inline(spec) => spec.clone(),
            ArchSpec::Named(name) => named(name, input_shape, classes)?,
        };
        if spec.input_shape != input_shape {
            return Err(Error::Config(format!(
                "architecture expects input {:?}, dataset provides {input_shape:?}",
                spec.input_shape
            )));
        }
        let out = spec.output_shape()?;
        if out != [classes] {
            return Err(Error::Config(format!(
                "architecture produces {out:?} outputs for a {classes}-class dataset"
            )));
        }
        Ok(spec)
    }
}

fn parse_activation(s: &str) -> Result<ActivationKind> {
    match s {
        "relu" => Ok(ActivationKind::Relu),
        "triangle" => Ok(ActivationKind::triangle()),
        "identity" => Ok(ActivationKind::Identity),
        other => Err(Error::Config(format!(
            "unknown activation `{other}` (accepted: relu, triangle, identity)"
        ))),
    }
}

/// Dense stack over `widths`; every layer but the last is plastic and
/// followed by `act`.
pub fn mlp(input_shape: &[usize], widths: &[usize], act: ActivationKind) -> Result<NetworkSpec> {
    if widths.len() < 2 {
        return Err(Error::Config("an MLP needs at least input and output widths".into()));
    }
    let flat: usize = input_shape.iter().product();
    if widths[0] != flat {
        return Err(Error::Config(format!(
            "MLP input width {} does not match flattened input {flat}",
            widths[0]
        )));
    }
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    for (i, pair) in widths.windows(2).enumerate() {
        let last = i + 2 == widths.len();
        layers.push(LayerSpec::dense(pair[0], pair[1], !last));
        if !last {
            layers.push(LayerSpec::act(act));
        }
    }
    Ok(NetworkSpec {
        input_shape: input_shape.to_vec(),
        layers,
    })
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool { size: 2, stride: 2 }
}

/// Conv blocks `(out_channels, kernel)` with "same" padding, each followed
/// by `act` and a 2×2 max-pool, then optional hidden dense layers and a
/// linear classifier.
pub fn conv_stack(
    input_shape: &[usize],
    blocks: &[(usize, usize)],
    act: ActivationKind,
    hidden: &[usize],
    classes: usize,
) -> Result<NetworkSpec> {
    let [c, h, w] = *input_shape else {
        return Err(Error::Config(format!(
            "convolutional presets need C×H×W input, got {input_shape:?}"
        )));
    };
    let mut layers = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    for &(out, k) in blocks {
        layers.push(LayerSpec::conv(ch, out, k, k / 2, true));
        layers.push(LayerSpec::act(act));
        layers.push(pool2());
        ch = out;
        hh /= 2;
        ww /= 2;
        if hh == 0 || ww == 0 {
            return Err(Error::Config(format!(
                "input {input_shape:?} is too small for {} pooling stages",
                blocks.len()
            )));
        }
    }
    layers.push(LayerSpec::Flatten);
    let mut width = ch * hh * ww;
    for &units in hidden {
        layers.push(LayerSpec::dense(width, units, true));
        layers.push(LayerSpec::act(act));
        width = units;
    }
    layers.push(LayerSpec::dense(width, classes, false));
    Ok(NetworkSpec {
        input_shape: input_shape.to_vec(),
        layers,
    })
}

fn named(name: &str, input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
    if let Some(rest) = name.strip_prefix("mlp:") {
        let (widths, act) = match rest.split_once(':') {
            Some((w, a)) => (w, parse_activation(a)?),
            None => (rest, ActivationKind::Relu),
        };
        let widths = widths
            .split('-')
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad MLP width `{t}` in `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        return mlp(input_shape, &widths, act);
    }
    let flat: usize = input_shape.iter().product();
    match name {
        "deephebb" => conv_stack(
            input_shape,
            &[(96, 5), (384, 3), (1536, 3)],
            ActivationKind::triangle(),
            &[],
            classes,
        ),
        "fasthebb" => conv_stack(
            input_shape,
            &[(96, 3), (128, 3), (192, 3), (256, 3)],
            ActivationKind::Relu,
            &[4096],
            classes,
        ),
        "tiny_mlp" => mlp(input_shape, &[flat, 8, classes], ActivationKind::Relu),
        "tiny_conv" => conv_stack(input_shape, &[(4, 3)], ActivationKind::triangle(), &[], classes),
        other => Err(Error::Config(format!(
            "unknown architecture `{other}` (accepted: mlp:<w0>-..-<wn>[:act], {})",
            PRESETS.join(", ")
        ))),
    }
}
