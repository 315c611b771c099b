//! Layered networks: ReLU-Nets, Conv-Nets and VGG-style nets without batch
//! normalization or dropout.
//!
//! Parametric layers are numbered `1..=L` from the input side ("bottom") to
//! the output side ("top"). Activations and pooling belong to the parametric
//! layer below them, so a selection of parametric layers fully determines
//! which parameters train.

mod params;
mod pass;

pub use params::{
    xavier_init, xavier_std, xavier_weights, LayerGrad, ParamStore, Segment, SparseGrad,
};
pub use pass::{
    backward, backward_selected, evaluate, forward, forward_with_tape, predict,
    softmax_cross_entropy, ActivationTape, Evaluation,
};

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv3x3 { .. })
    }

    /// Weight tensor shape: `[fan_out, fan_in]` or `[out, in, 3, 3]`.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => Some(vec![fan_out, fan_in]),
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => Some(vec![out_channels, in_channels, 3, 3]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { fan_out, .. } => fan_out,
            LayerSpec::Conv3x3 { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape()
            .map(|s| s.iter().product::<usize>() + self.bias_len())
            .unwrap_or(0)
    }

    /// Xavier fan sizes; convolutions count the 3x3 receptive field.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => Some((fan_in, fan_out)),
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => Some((in_channels * 9, out_channels * 9)),
            _ => None,
        }
    }

    /// Per-sample output shape, or an error if `input` does not fit.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => match input {
                [n] if *n == fan_in => Ok(vec![fan_out]),
                _ => Err(Error::dim("dense layer input", input, &[fan_in])),
            },
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => match *input {
                [c, h, w] if c == in_channels => Ok(vec![out_channels, h, w]),
                _ => Err(Error::dim("conv layer input", input, &[in_channels, 0, 0])),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => match *input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(Error::dim("maxpool2 input", input, &[0, 2, 2])),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VggVariant {
    Vgg5,
    Vgg11,
}

impl FromStr for VggVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "vgg5" => Ok(VggVariant::Vgg5),
            "vgg11" => Ok(VggVariant::Vgg11),
            other => Err(Error::Config(format!("unknown VGG variant `{other}`"))),
        }
    }
}

impl fmt::Display for VggVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VggVariant::Vgg5 => f.write_str("vgg5"),
            VggVariant::Vgg11 => f.write_str("vgg11"),
        }
    }
}

/// Which constructor produced a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    ReluNet { depth: usize, width: usize },
    ConvNet { depth: usize, width: usize },
    Vgg { variant: VggVariant },
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    family: Family,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerSpec>,
    /// Op index of each parametric layer, bottom to top.
    parametric_ops: Vec<usize>,
    segments: Vec<Segment>,
}

impl Network {
    /// Validates that `layers` compose from `input_shape` (per sample) down to
    /// a `[classes]` logit vector.
    pub fn new(
        family: Family,
        input_shape: Vec<usize>,
        classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        // Dense-first networks take any input whose element count matches.
        if matches!(layers.first(), Some(LayerSpec::Dense { .. })) && shape.len() > 1 {
            shape = vec![shape.iter().product()];
        }
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [classes] {
            return Err(Error::dim("network output", &shape, &[classes]));
        }
        let parametric_ops: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parametric())
            .map(|(i, _)| i)
            .collect();
        if parametric_ops.is_empty() {
            return Err(Error::Config("network has no parametric layers".into()));
        }
        let mut segments = Vec::with_capacity(parametric_ops.len());
        let mut offset = 0;
        for (i, &op) in parametric_ops.iter().enumerate() {
            let spec = layers[op];
            let len = spec.param_count();
            segments.push(Segment {
                layer: i + 1,
                offset,
                len,
                weight_shape: spec.weight_shape().expect("parametric"),
                bias_len: spec.bias_len(),
            });
            offset += len;
        }
        Ok(Self {
            family,
            input_shape,
            classes,
            layers,
            parametric_ops,
            segments,
        })
    }

    /// Fully-connected ReLU network with `d` hidden layers of `w` units, i.e.
    /// `d + 1` parametric layers.
    pub fn relu_net(d: usize, w: usize, in_dim: usize, out_dim: usize) -> Result<Self> {
        if d == 0 || w == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "relu net needs d, w, in_dim, out_dim >= 1 (got d={d}, w={w}, {in_dim}->{out_dim})"
            )));
        }
        let mut layers = vec![LayerSpec::Dense {
            fan_in: in_dim,
            fan_out: w,
        }];
        layers.push(LayerSpec::Relu);
        for _ in 1..d {
            layers.push(LayerSpec::Dense {
                fan_in: w,
                fan_out: w,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense {
            fan_in: w,
            fan_out: out_dim,
        });
        Self::new(
            Family::ReluNet { depth: d, width: w },
            vec![in_dim],
            out_dim,
            layers,
        )
    }

    /// Conv-Net for 1x28x28 inputs and 10 classes.
    pub fn conv_net(d: usize, w: usize) -> Result<Self> {
        Self::conv_net_for(d, w, &[1, 28, 28], 10)
    }

    /// `d` 3x3 conv layers of `w` channels with ReLU, the first two followed
    /// by 2x2 max pooling while the spatial size allows it, then a dense
    /// output layer.
    pub fn conv_net_for(d: usize, w: usize, input: &[usize], classes: usize) -> Result<Self> {
        if d == 0 || w == 0 {
            return Err(Error::Config(format!(
                "conv net needs d, w >= 1 (got d={d}, w={w})"
            )));
        }
        let [c, mut h, mut wd] = *input else {
            return Err(Error::Config(format!(
                "conv net input must be [C, H, W], got {input:?}"
            )));
        };
        let mut layers = Vec::new();
        let mut in_channels = c;
        for i in 0..d {
            layers.push(LayerSpec::Conv3x3 {
                in_channels,
                out_channels: w,
            });
            layers.push(LayerSpec::Relu);
            if i < 2 && h % 2 == 0 && wd % 2 == 0 {
                layers.push(LayerSpec::MaxPool2);
                h /= 2;
                wd /= 2;
            }
            in_channels = w;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            fan_in: w * h * wd,
            fan_out: classes,
        });
        Self::new(
            Family::ConvNet { depth: d, width: w },
            input.to_vec(),
            classes,
            layers,
        )
    }

    /// VGG-5 (1x28x28 input) or VGG-11 (3x32x32 input), 10 classes.
    ///
    /// VGG-5: conv64-pool-conv128-pool-conv256, dense 256, dense 10.
    /// VGG-11: the standard eight-conv configuration A followed by
    /// dense 512, dense 512, dense 10.
    pub fn vgg(variant: VggVariant) -> Result<Self> {
        // `None` marks a 2x2 max pool.
        let (input, plan, hidden): (Vec<usize>, Vec<Option<usize>>, Vec<usize>) = match variant {
            VggVariant::Vgg5 => (
                vec![1, 28, 28],
                vec![Some(64), None, Some(128), None, Some(256)],
                vec![256],
            ),
            VggVariant::Vgg11 => (
                vec![3, 32, 32],
                vec![
                    Some(64),
                    None,
                    Some(128),
                    None,
                    Some(256),
                    Some(256),
                    None,
                    Some(512),
                    Some(512),
                    None,
                    Some(512),
                    Some(512),
                    None,
                ],
                vec![512, 512],
            ),
        };
        let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
        let mut layers = Vec::new();
        for step in plan {
            match step {
                Some(out) => {
                    layers.push(LayerSpec::Conv3x3 {
                        in_channels: c,
                        out_channels: out,
                    });
                    layers.push(LayerSpec::Relu);
                    c = out;
                }
                None => {
                    layers.push(LayerSpec::MaxPool2);
                    h /= 2;
                    w /= 2;
                }
            }
        }
        layers.push(LayerSpec::Flatten);
        let mut fan_in = c * h * w;
        for width in hidden {
            layers.push(LayerSpec::Dense {
                fan_in,
                fan_out: width,
            });
            layers.push(LayerSpec::Relu);
            fan_in = width;
        }
        layers.push(LayerSpec::Dense {
            fan_in,
            fan_out: 10,
        });
        Self::new(Family::Vgg { variant }, input, 10, layers)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of parametric layers `L`.
    pub fn num_parametric(&self) -> usize {
        self.parametric_ops.len()
    }

    /// Spec of parametric layer `layer` (1-based).
    pub fn parametric_layer(&self, layer: usize) -> Option<LayerSpec> {
        layer
            .checked_sub(1)
            .and_then(|i| self.parametric_ops.get(i))
            .map(|&op| self.layers[op])
    }

    pub(crate) fn parametric_ops(&self) -> &[usize] {
        &self.parametric_ops
    }

    /// Parameter layout: one contiguous segment (weights, then bias) per
    /// parametric layer.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total parameter count `p`.
    pub fn param_count(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len).unwrap_or(0)
    }

    /// Per-sample element count of the input.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.input_shape.hash(&mut h);
        self.layers.hash(&mut h);
        h.finish()
    }
}
