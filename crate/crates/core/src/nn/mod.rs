//! Minimal deterministic network engine.
//!
//! Networks are sequential stacks of [`Layer`]s described by a
//! [`NetworkSpec`]. All arithmetic is `f64`. Weights of parameterized layers
//! are always read through a [`MaskSet`](crate::pruning::MaskSet): a pruned
//! entry contributes exactly zero to the forward pass and receives a zero
//! gradient.

mod data;
mod engine;
mod params;
mod train;

pub use data::{DatasetSplits, Split};
pub use engine::{evaluate_accuracy, forward, loss_and_grads, sgd_step, softmax_rows};
pub use params::{init_gaussian, init_kaiming_uniform, kaiming_bound, LayerParams, Parameters};
pub use train::{train_until_early_stop, EarlyStopping, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical overflow: non-finite values after layer {layer} ({kind})")]
    NumericalOverflow { layer: usize, kind: &'static str },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// One layer of a sequential network.
///
/// Dense weights are stored `[fan_out, fan_in]`; conv weights
/// `[out_ch, in_ch, kernel, kernel]`. Convolutions use no padding, max-pooling
/// uses stride equal to its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense { fan_in: usize, fan_out: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    Relu,
    MaxPool { window: usize },
    Flatten,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Shape of this layer's weight tensor, if it has one.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            Layer::Dense { fan_in, fan_out } => Some(vec![fan_out, fan_in]),
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => Some(vec![out_ch, in_ch, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            Layer::Dense { fan_out, .. } => Some(fan_out),
            Layer::Conv2d { out_ch, .. } => Some(out_ch),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            Layer::Dense { fan_in, .. } => Some(fan_in),
            Layer::Conv2d { in_ch, kernel, .. } => Some(in_ch * kernel * kernel),
            _ => None,
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let bad = |msg: String| NnError::InvalidSpec(format!("layer {index} ({}): {msg}", self.name()));
        match *self {
            Layer::Dense { fan_in, fan_out } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err(bad(format!("zero fan_in/fan_out ({fan_in}, {fan_out})")));
                }
                if input != [fan_in] {
                    return Err(bad(format!("expects input [{fan_in}], got {input:?}")));
                }
                Ok(vec![fan_out])
            }
            Layer::Conv2d { in_ch, out_ch, kernel, stride } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 {
                    return Err(bad("zero fan_in (in_ch, out_ch and kernel must be positive)".into()));
                }
                if stride == 0 {
                    return Err(bad("stride must be positive".into()));
                }
                match *input {
                    [c, h, w] if c == in_ch && h >= kernel && w >= kernel => {
                        Ok(vec![out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                    }
                    _ => Err(bad(format!("expects input [{in_ch}, H>={kernel}, W>={kernel}], got {input:?}"))),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window } => {
                if window == 0 {
                    return Err(bad("window must be positive".into()));
                }
                match *input {
                    [c, h, w] if h >= window && w >= window => Ok(vec![c, h / window, w / window]),
                    _ => Err(bad(format!("expects input [C, H>={window}, W>={window}], got {input:?}"))),
                }
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Validated architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct NetworkSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    // shapes[i] is the input shape of layer i; shapes[len] is the output shape.
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = NnError;
    fn try_from(raw: RawSpec) -> Result<Self, NnError> {
        NetworkSpec::new(raw.layers, raw.input_shape, raw.num_classes)
    }
}

impl From<NetworkSpec> for RawSpec {
    fn from(spec: NetworkSpec) -> Self {
        RawSpec { layers: spec.layers, input_shape: spec.input_shape, num_classes: spec.num_classes }
    }
}

impl NetworkSpec {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self, NnError> {
        if num_classes < 2 {
            return Err(NnError::InvalidSpec(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::InvalidSpec(format!("input_shape must be non-empty and positive, got {input_shape:?}")));
        }
        if !layers.iter().any(Layer::is_parameterized) {
            return Err(NnError::InvalidSpec("at least one dense or conv layer is required".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.as_slice() != [num_classes] {
            return Err(NnError::InvalidSpec(format!("network output shape {out:?} != [{num_classes}]")));
        }
        Ok(Self { layers, input_shape, num_classes, shapes })
    }

    /// Plain ReLU MLP: `input_dim -> hidden... -> num_classes`.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense { fan_in: prev, fan_out: h });
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense { fan_in: prev, fan_out: num_classes });
        Self::new(layers, vec![input_dim], num_classes)
    }

    /// LeNet-5-style CNN: two conv/relu/pool blocks and a 120-84 classifier head.
    pub fn lenet5(input_shape: [usize; 3], num_classes: usize) -> Result<Self, NnError> {
        let [c, h, w] = input_shape;
        let conv_out = |s: usize| s.checked_sub(4).map(|v| v / 2);
        let h2 = conv_out(h).and_then(conv_out);
        let w2 = conv_out(w).and_then(conv_out);
        let (h2, w2) = match (h2, w2) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(NnError::InvalidSpec(format!("input {input_shape:?} too small for lenet5"))),
        };
        let layers = vec![
            Layer::Conv2d { in_ch: c, out_ch: 6, kernel: 5, stride: 1 },
            Layer::Relu,
            Layer::MaxPool { window: 2 },
            Layer::Conv2d { in_ch: 6, out_ch: 16, kernel: 5, stride: 1 },
            Layer::Relu,
            Layer::MaxPool { window: 2 },
            Layer::Flatten,
            Layer::Dense { fan_in: 16 * h2 * w2, fan_out: 120 },
            Layer::Relu,
            Layer::Dense { fan_in: 120, fan_out: 84 },
            Layer::Relu,
            Layer::Dense { fan_in: 84, fan_out: num_classes },
        ];
        Self::new(layers, input_shape.to_vec(), num_classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample input shape of layer `i` (`i == layers.len()` gives the output).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Parameterized layers in order, paired with their index in `layers()`.
    pub fn param_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_parameterized())
    }

    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.param_layers().map(|(_, l)| l.weight_shape().unwrap()).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.param_layers().map(|(_, l)| l.bias_len().unwrap()).sum::<usize>()
    }
}
