//! Declarative network descriptions and the width-multiplier builder.

use serde::{Deserialize, Serialize};

use super::NnError;

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// One node of a layer graph. Nodes are evaluated in list order; each node
/// consumes the output of the node before it (the network input for the
/// first node).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Batchnorm,
    Relu,
    /// Adds the output of an earlier node. `from` indexes node outputs with 0
    /// meaning the network input and `k` the output of the k-th node (1-based).
    ResidualAdd { from: usize },
    /// Non-overlapping `size x size` average pooling; `size = 0` pools the
    /// whole feature map and yields a flat `[channels]` vector.
    Avgpool {
        #[serde(default)]
        size: usize,
    },
    /// Marks the loss head; only allowed as the last node.
    SoftmaxXent,
}

impl LayerSpec {
    pub fn uses_crossbar(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::ResidualAdd { .. } => "residual-add",
            LayerSpec::Avgpool { .. } => "avgpool",
            LayerSpec::SoftmaxXent => "softmax-xent",
        }
    }
}

/// Scales a neuron/channel count, rounding to the nearest integer >= 1.
pub fn scale_width(units: usize, multiplier: f64) -> usize {
    ((units as f64 * multiplier).round() as usize).max(1)
}

/// Applies a width multiplier to every dense/conv layer except the last one,
/// which produces the class logits.
pub fn apply_width_multiplier(layers: &[LayerSpec], multiplier: f64) -> Result<Vec<LayerSpec>, NnError> {
    if !(multiplier.is_finite() && multiplier > 0.0) {
        return Err(NnError::Spec(format!("width multiplier must be positive, got {multiplier}")));
    }
    let last = layers.iter().rposition(LayerSpec::uses_crossbar);
    Ok(layers
        .iter()
        .enumerate()
        .map(|(k, l)| match *l {
            LayerSpec::Dense { units, bias } if Some(k) != last => {
                LayerSpec::Dense { units: scale_width(units, multiplier), bias }
            }
            LayerSpec::Conv2d { channels, kernel, stride, padding, bias } if Some(k) != last => LayerSpec::Conv2d {
                channels: scale_width(channels, multiplier),
                kernel,
                stride,
                padding,
                bias,
            },
            ref other => other.clone(),
        })
        .collect())
}

/// Output feature shape of every node, starting from `input`. Also checks
/// residual compatibility and placement of the loss head.
pub fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>, NnError> {
    let mut shapes = vec![input.to_vec()];
    for (k, layer) in layers.iter().enumerate() {
        let cur = shapes.last().expect("non-empty").clone();
        let err = |m: String| Err(NnError::Spec(format!("layer {} ({}): {m}", k + 1, layer.kind())));
        let out = match *layer {
            LayerSpec::Dense { units, .. } => {
                if units == 0 {
                    return err("units must be >= 1".into());
                }
                vec![units]
            }
            LayerSpec::Conv2d { channels, kernel, stride, padding, .. } => {
                if cur.len() != 3 {
                    return err(format!("expects CHW input, got {cur:?}"));
                }
                if channels == 0 || kernel == 0 || stride == 0 {
                    return err("channels, kernel and stride must be >= 1".into());
                }
                let (h, w) = (cur[1] + 2 * padding, cur[2] + 2 * padding);
                if kernel > h || kernel > w {
                    return err(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                vec![channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            LayerSpec::Batchnorm | LayerSpec::Relu => cur.clone(),
            LayerSpec::ResidualAdd { from } => {
                if from > k {
                    return err(format!("`from = {from}` refers to a later node"));
                }
                if shapes[from] != cur {
                    return err(format!("shape {:?} does not match {:?}", shapes[from], cur));
                }
                cur.clone()
            }
            LayerSpec::Avgpool { size } => {
                if cur.len() != 3 {
                    return err(format!("expects CHW input, got {cur:?}"));
                }
                if size == 0 {
                    vec![cur[0]]
                } else if cur[1] % size != 0 || cur[2] % size != 0 {
                    return err(format!("size {size} does not divide {}x{}", cur[1], cur[2]));
                } else {
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
            }
            LayerSpec::SoftmaxXent => {
                if k + 1 != layers.len() {
                    return err("must be the last layer".into());
                }
                cur.clone()
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}

/// Trainable parameter count (crossbar weights including bias rows, plus
/// batch-norm scale and shift).
pub fn parameter_count(input: &[usize], layers: &[LayerSpec]) -> Result<usize, NnError> {
    let shapes = infer_shapes(input, layers)?;
    Ok(layers
        .iter()
        .zip(&shapes)
        .map(|(l, inp)| match *l {
            LayerSpec::Dense { units, bias } => (inp.iter().product::<usize>() + usize::from(bias)) * units,
            LayerSpec::Conv2d { channels, kernel, bias, .. } => (inp[0] * kernel * kernel + usize::from(bias)) * channels,
            LayerSpec::Batchnorm => 2 * inp[0],
            _ => 0,
        })
        .sum())
}
