//! Dense, convolution, activation, pooling and loss layers.
//!
//! Shapes in [`LayerSpec`] and [`Layer`] exclude the batch axis; tensors
//! flowing through a [`Tape`] always carry it as their leading extent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv_extent, Parameter, RandomStream, Tape, Tensor, Var};

/// Declarative layer description, as written in architecture files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv {
        channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        window: [usize; 2],
    },
    AvgPool {
        window: [usize; 2],
    },
    MixedPool {
        window: [usize; 2],
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return Err(Error::Config(format!(
                        "dense layer needs a flat input, got {input:?} (add a flatten layer)"
                    )));
                }
                if *units == 0 {
                    return Err(Error::Config("dense layer with zero units".into()));
                }
                Ok(vec![*units])
            }
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = image_shape("conv", input)?;
                let out = (
                    conv_extent(h, kernel[0], *stride, *padding),
                    conv_extent(w, kernel[1], *stride, *padding),
                );
                match out {
                    (Some(ho), Some(wo)) if ho > 0 && wo > 0 && *channels > 0 && c > 0 => {
                        Ok(vec![*channels, ho, wo])
                    }
                    _ => Err(Error::Config(format!(
                        "conv {kernel:?}/s{stride}/p{padding} gives a non-positive output on {input:?}"
                    ))),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { window }
            | LayerSpec::AvgPool { window }
            | LayerSpec::MixedPool { window } => {
                let [c, h, w] = image_shape("pool", input)?;
                let [kh, kw] = *window;
                if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
                    return Err(Error::Config(format!(
                        "pool window {window:?} does not evenly divide {h}×{w}"
                    )));
                }
                Ok(vec![c, h / kh, w / kw])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn image_shape(what: &str, input: &[usize]) -> Result<[usize; 3]> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Config(format!(
            "{what} layer needs a channels×height×width input, got {input:?}"
        ))),
    }
}

/// `y = x·W + b` with `W[in×out]`.
#[derive(Debug)]
pub struct DenseLayer {
    pub weights: Parameter,
    pub bias: Parameter,
}

impl DenseLayer {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut RandomStream) -> Self {
        DenseLayer {
            weights: Parameter::fan_in_uniform(format!("{name}.weight"), &[inputs, outputs], inputs, rng),
            bias: Parameter::fan_in_uniform(format!("{name}.bias"), &[outputs], inputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.bias.shape()[0]
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weights);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

#[derive(Debug)]
pub struct ConvLayer {
    /// `[C_out × C_in × k_h × k_w]`
    pub kernels: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        rng: &mut RandomStream,
    ) -> Self {
        let fan_in = in_channels * kernel[0] * kernel[1];
        ConvLayer {
            kernels: Parameter::fan_in_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel[0], kernel[1]],
                fan_in,
                rng,
            ),
            bias: Parameter::fan_in_uniform(format!("{name}.bias"), &[out_channels], fan_in, rng),
            stride,
            padding,
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.kernels);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Learnable blend of max and average pooling. One mix scalar per layer.
#[derive(Debug)]
pub struct MixedPoolLayer {
    pub window: [usize; 2],
    pub mix: Parameter,
}

impl MixedPoolLayer {
    pub fn new(name: &str, window: [usize; 2]) -> Self {
        MixedPoolLayer {
            window,
            mix: Parameter::new(format!("{name}.mix"), Tensor::scalar(0.0)),
        }
    }

    /// Effective coefficient on the max branch, in (0, 1).
    pub fn alpha(&self) -> f64 {
        crate::numerics::logistic(self.mix.value().data()[0])
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let m = tape.param(&self.mix);
        tape.mixed_pool(x, m, self.window)
    }
}

#[derive(Debug)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    Relu,
    MaxPool { window: [usize; 2] },
    AvgPool { window: [usize; 2] },
    MixedPool(MixedPoolLayer),
    Flatten,
}

impl Layer {
    /// Instantiates `spec` for a per-sample `input` shape.
    pub fn build(spec: &LayerSpec, input: &[usize], name: &str, rng: &mut RandomStream) -> Result<Layer> {
        spec.output_shape(input)?;
        Ok(match *spec {
            LayerSpec::Dense { units } => Layer::Dense(DenseLayer::new(name, input[0], units, rng)),
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv(ConvLayer::new(name, input[0], channels, kernel, stride, padding, rng)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { window } => Layer::MaxPool { window },
            LayerSpec::AvgPool { window } => Layer::AvgPool { window },
            LayerSpec::MixedPool { window } => Layer::MixedPool(MixedPoolLayer::new(name, window)),
            LayerSpec::Flatten => Layer::Flatten,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense { units: d.outputs() },
            Layer::Conv(c) => {
                let s = c.kernels.shape();
                LayerSpec::Conv {
                    channels: s[0],
                    kernel: [s[2], s[3]],
                    stride: c.stride,
                    padding: c.padding,
                }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { window } => LayerSpec::MaxPool { window: *window },
            Layer::AvgPool { window } => LayerSpec::AvgPool { window: *window },
            Layer::MixedPool(m) => LayerSpec::MixedPool { window: m.window },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        match self {
            Layer::Dense(d) => d.forward(tape, x),
            Layer::Conv(c) => c.forward(tape, x),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::MaxPool { window } => tape.max_pool(x, *window),
            Layer::AvgPool { window } => tape.avg_pool(x, *window),
            Layer::MixedPool(m) => m.forward(tape, x),
            Layer::Flatten => tape.flatten(x),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            Layer::Conv(c) => vec![&c.kernels, &c.bias],
            Layer::MixedPool(m) => vec![&m.mix],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.kernels, &mut c.bias],
            Layer::MixedPool(m) => vec![&mut m.mix],
            _ => Vec::new(),
        }
    }
}

pub fn dense_forward(layer: &DenseLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

pub fn conv_forward(layer: &ConvLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

pub fn mixed_pool_forward(layer: &MixedPoolLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Mean cross-entropy and row-wise softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.constant_ref(logits);
    let (loss, probs) = tape.softmax_cross_entropy(z, labels)?;
    Ok((tape.value(loss).data()[0], probs))
}

/// Row-wise softmax of a `[batch × C]` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let b = logits.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Ok(logits.clone());
    }
    softmax_cross_entropy(logits, &vec![0; b]).map(|(_, p)| p)
}

/// Mean binary cross-entropy of pre-squash scores against `{0,1}` targets.
pub fn binary_cross_entropy(score: &Tensor, targets: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant_ref(score);
    let loss = tape.bce_with_logits(z, targets)?;
    Ok(tape.value(loss).data()[0])
}
