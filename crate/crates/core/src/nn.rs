//! Layers, architecture descriptors and networks.
//!
//! A [`Network`] is an ordered list of layers plus the two positions the
//! rescaling code needs: the last batch-norm layer and the first layer of the
//! classifier head.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, RunningStats, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Activation(Activation),
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    /// Dense, convolution and batch-norm layers carry a weight.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. }
        )
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some(vec![inputs, outputs]),
            LayerKind::Conv2d {
                in_channels,
                filters,
                kernel,
                ..
            } => Some(vec![filters, in_channels, kernel, kernel]),
            LayerKind::BatchNorm { channels } => Some(vec![channels]),
            _ => None,
        }
    }

    fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { outputs, .. } => Some(outputs),
            LayerKind::Conv2d { filters, .. } => Some(filters),
            LayerKind::BatchNorm { channels } => Some(channels),
            _ => None,
        }
    }
}

/// One element of an architecture descriptor. Input extents are inferred.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { outputs: usize, bias: bool },
    Conv { filters: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    BatchNorm,
    Relu,
    LeakyRelu(f64),
    MaxPool { size: usize, stride: usize },
    Flatten,
    /// Marks the start of the classifier head.
    Head,
}

/// Architecture descriptor: per-sample input shape and layer sequence.
///
/// The textual form is either a preset (`mlp:784-100-100-10`,
/// `mlp-nobias:...`, `cnn:1x28x28:10`, `cnn-nobias:...`, `cnn-bn:3x32x32:100`)
/// or an explicit sequence such as
/// `seq:1x12x12|conv(4,3)|relu|maxpool(2)|flatten|head|dense(10)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

pub const CNN_FILTERS: usize = 16;
pub const CNN_KERNEL: usize = 5;
pub const CNN_HIDDEN: usize = 100;

impl Architecture {
    /// Fully connected ReLU network over `widths` (input first, classes last).
    pub fn mlp(widths: &[usize], bias: bool) -> Self {
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate().skip(1) {
            if i > 1 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense { outputs: w, bias });
        }
        Self {
            input: vec![widths[0]],
            layers,
        }
    }

    /// Two 5x5/16-channel convolutions (each followed by ReLU and 2x2 max
    /// pooling), then a 100-unit hidden layer and the output layer. With
    /// `batch_norm`, a batch-norm layer follows each convolution and the
    /// convolution drops its bias.
    pub fn cnn(input: [usize; 3], classes: usize, bias: bool, batch_norm: bool) -> Self {
        let mut layers = Vec::new();
        for _ in 0..2 {
            layers.push(LayerSpec::Conv {
                filters: CNN_FILTERS,
                kernel: CNN_KERNEL,
                stride: 1,
                padding: 0,
                bias: bias && !batch_norm,
            });
            if batch_norm {
                layers.push(LayerSpec::BatchNorm);
            }
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                outputs: CNN_HIDDEN,
                bias,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                outputs: classes,
                bias,
            },
        ]);
        Self {
            input: input.to_vec(),
            layers,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

fn parse_extents(s: &str) -> Result<Vec<usize>> {
    s.split(['x', '-'])
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Architecture(format!("bad extent '{p}' in '{s}'")))
        })
        .collect()
}

fn parse_args(token: &str, name: &str) -> Result<Vec<f64>> {
    let inner = token
        .strip_prefix(name)
        .and_then(|r| r.strip_prefix('('))
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| Error::Architecture(format!("malformed layer token '{token}'")))?;
    inner
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| Error::Architecture(format!("bad argument '{a}' in '{token}'")))
        })
        .collect()
}

fn as_count(v: f64, token: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Architecture(format!("'{token}' needs integer arguments")))
    }
}

fn parse_layer(token: &str) -> Result<LayerSpec> {
    let name = token.split('(').next().unwrap_or_default();
    let ints = |n: &str| -> Result<Vec<usize>> {
        parse_args(token, n)?
            .into_iter()
            .map(|v| as_count(v, token))
            .collect()
    };
    let spec = match name {
        "dense" | "dense-nb" => {
            let a = ints(name)?;
            let [outputs] = a[..] else {
                return Err(Error::Architecture(format!("'{token}' takes one argument")));
            };
            LayerSpec::Dense {
                outputs,
                bias: name == "dense",
            }
        }
        "conv" | "conv-nb" => {
            let a = ints(name)?;
            let (filters, kernel, stride, padding) = match a[..] {
                [f, k] => (f, k, 1, 0),
                [f, k, s] => (f, k, s, 0),
                [f, k, s, p] => (f, k, s, p),
                _ => {
                    return Err(Error::Architecture(format!(
                        "'{token}' takes filters, kernel[, stride[, padding]]"
                    )))
                }
            };
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
                bias: name == "conv",
            }
        }
        "maxpool" => {
            let a = ints(name)?;
            let (size, stride) = match a[..] {
                [k] => (k, k),
                [k, s] => (k, s),
                _ => return Err(Error::Architecture(format!("'{token}' takes size[, stride]"))),
            };
            LayerSpec::MaxPool { size, stride }
        }
        "lrelu" => {
            let a = parse_args(token, name)?;
            let [slope] = a[..] else {
                return Err(Error::Architecture(format!("'{token}' takes one slope")));
            };
            LayerSpec::LeakyRelu(slope)
        }
        "bn" => LayerSpec::BatchNorm,
        "relu" => LayerSpec::Relu,
        "flatten" => LayerSpec::Flatten,
        "head" => LayerSpec::Head,
        _ => return Err(Error::Architecture(format!("unknown layer '{token}'"))),
    };
    if name != token && !token.ends_with(')') {
        return Err(Error::Architecture(format!("malformed layer token '{token}'")));
    }
    Ok(spec)
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Architecture(format!("missing ':' in '{s}'")))?;
        match kind {
            "mlp" | "mlp-nobias" => {
                let widths = parse_extents(rest)?;
                if widths.len() < 2 {
                    return Err(Error::Architecture(
                        "an mlp needs at least input and output widths".into(),
                    ));
                }
                Ok(Architecture::mlp(&widths, kind == "mlp"))
            }
            "cnn" | "cnn-nobias" | "cnn-bn" => {
                let (shape, classes) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Architecture(format!("expected CxHxW:classes in '{s}'")))?;
                let shape = parse_extents(shape)?;
                let [c, h, w] = shape[..] else {
                    return Err(Error::Architecture(format!("cnn input must be CxHxW in '{s}'")));
                };
                let classes = classes
                    .trim()
                    .parse()
                    .map_err(|_| Error::Architecture(format!("bad class count in '{s}'")))?;
                Ok(Architecture::cnn(
                    [c, h, w],
                    classes,
                    kind != "cnn-nobias",
                    kind == "cnn-bn",
                ))
            }
            "seq" => {
                let mut parts = rest.split('|');
                let input = parse_extents(parts.next().unwrap_or_default())?;
                let layers = parts.map(|t| parse_layer(t.trim())).collect::<Result<_>>()?;
                Ok(Architecture { input, layers })
            }
            _ => Err(Error::Architecture(format!("unknown architecture kind '{kind}'"))),
        }
    }
}

impl fmt::Display for Architecture {
    /// Always renders the explicit `seq:` form, which parses back to an
    /// equal descriptor.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input.iter().map(|d| d.to_string()).collect();
        write!(f, "seq:{}", dims.join("x"))?;
        for layer in &self.layers {
            f.write_str("|")?;
            match layer {
                LayerSpec::Dense { outputs, bias } => {
                    write!(f, "dense{}({outputs})", if *bias { "" } else { "-nb" })?
                }
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => write!(
                    f,
                    "conv{}({filters},{kernel},{stride},{padding})",
                    if *bias { "" } else { "-nb" }
                )?,
                LayerSpec::BatchNorm => f.write_str("bn")?,
                LayerSpec::Relu => f.write_str("relu")?,
                LayerSpec::LeakyRelu(s) => write!(f, "lrelu({s:?})")?,
                LayerSpec::MaxPool { size, stride } => write!(f, "maxpool({size},{stride})")?,
                LayerSpec::Flatten => f.write_str("flatten")?,
                LayerSpec::Head => f.write_str("head")?,
            }
        }
        Ok(())
    }
}

/// A layer's parameters and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    /// Dense: `inputs x outputs`; conv: `F x C x k x k`; batch norm: gamma.
    pub weight: Option<Tensor<T>>,
    /// Absent for bias-free layers, which behave as a zero bias. Batch norm
    /// stores beta here.
    pub bias: Option<Tensor<T>>,
    pub running: Option<RunningStats<T>>,
    init_norm: Option<T>,
}

impl<T: Scalar> Layer<T> {
    /// Frobenius norm of the weight recorded at initialization.
    pub fn init_norm(&self) -> Option<T> {
        self.init_norm
    }

    pub(crate) fn set_init_norm(&mut self, norm: T) {
        self.init_norm = Some(norm);
    }

    pub fn weight_norm(&self) -> Option<T> {
        self.weight.as_ref().map(Tensor::frobenius_norm)
    }
}

/// Raw parameters for rebuilding a network, e.g. from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub init_norm: Option<T>,
    pub running: Option<RunningStats<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Position of a learnable tensor in [`Network::parameters`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub role: ParamRole,
}

/// Current and initial weight norm of one weighted layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightNorm<T> {
    pub layer: usize,
    pub current: T,
    pub init: T,
}

/// Output of a recorded forward pass.
pub struct TapeForward {
    pub logits: Var,
    /// One variable per learnable tensor, in [`Network::parameters`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    layers: Vec<Layer<T>>,
    final_norm_index: Option<usize>,
    classifier_start: usize,
}

struct Layout {
    kinds: Vec<(LayerKind, bool)>,
    final_norm_index: Option<usize>,
    classifier_start: usize,
}

fn layout(arch: &Architecture) -> Result<Layout> {
    if arch.input.is_empty() || arch.input.contains(&0) {
        return Err(Error::Architecture(format!(
            "input shape {:?} must be non-empty and positive",
            arch.input
        )));
    }
    let mut shape = arch.input.clone();
    let mut kinds = Vec::new();
    let mut head_marker = None;
    for spec in &arch.layers {
        let (kind, bias) = match *spec {
            LayerSpec::Head => {
                if head_marker.is_some() {
                    return Err(Error::Architecture("more than one head marker".into()));
                }
                head_marker = Some(kinds.len());
                continue;
            }
            LayerSpec::Dense { outputs, bias } => {
                let [inputs] = shape[..] else {
                    return Err(Error::Architecture(format!(
                        "dense layer needs flattened input, got {shape:?}"
                    )));
                };
                if outputs == 0 {
                    return Err(Error::Architecture("dense layer with 0 outputs".into()));
                }
                shape = vec![outputs];
                (LayerKind::Dense { inputs, outputs }, bias)
            }
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::Architecture(format!(
                        "convolution needs C x H x W input, got {shape:?}"
                    )));
                };
                if filters == 0 || kernel == 0 {
                    return Err(Error::Architecture("empty convolution".into()));
                }
                let g = ops::ConvGeometry::new(&[1, c, h, w], &[filters, c, kernel, kernel], stride, padding)
                    .map_err(|e| Error::Architecture(e.to_string()))?;
                shape = vec![filters, g.out_h, g.out_w];
                (
                    LayerKind::Conv2d {
                        in_channels: c,
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    bias,
                )
            }
            LayerSpec::BatchNorm => (LayerKind::BatchNorm { channels: shape[0] }, true),
            LayerSpec::Relu => (LayerKind::Activation(Activation::Relu), false),
            LayerSpec::LeakyRelu(slope) => {
                if !(0.0..1.0).contains(&slope) {
                    return Err(Error::Architecture(format!(
                        "leaky relu slope {slope} outside [0, 1)"
                    )));
                }
                (LayerKind::Activation(Activation::LeakyRelu(slope)), false)
            }
            LayerSpec::MaxPool { size, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::Architecture(format!(
                        "max pooling needs C x H x W input, got {shape:?}"
                    )));
                };
                if size == 0 || stride == 0 || size > h || size > w {
                    return Err(Error::Architecture(format!(
                        "max pool {size}/{stride} does not fit {h}x{w}"
                    )));
                }
                shape = vec![c, (h - size) / stride + 1, (w - size) / stride + 1];
                (LayerKind::MaxPool { size, stride }, false)
            }
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
                (LayerKind::Flatten, false)
            }
        };
        kinds.push((kind, bias));
    }

    match kinds.last() {
        Some((LayerKind::Dense { .. }, _)) => {}
        _ => {
            return Err(Error::Architecture(
                "the last layer must be dense (it produces the logits)".into(),
            ))
        }
    }
    let is_head_kind = |k: &LayerKind| {
        matches!(
            k,
            LayerKind::Dense { .. } | LayerKind::Activation(_) | LayerKind::Flatten
        )
    };
    let classifier_start = match head_marker {
        Some(start) => {
            if let Some(bad) = kinds[start..].iter().position(|(k, _)| !is_head_kind(k)) {
                return Err(Error::Architecture(format!(
                    "layer {} ({:?}) follows the head marker; the classifier may only hold \
                     dense, activation and flatten layers",
                    start + bad,
                    kinds[start + bad].0
                )));
            }
            start
        }
        None => {
            // First dense layer of the trailing run of head-compatible layers.
            let tail = kinds
                .iter()
                .rposition(|(k, _)| !is_head_kind(k))
                .map_or(0, |i| i + 1);
            tail + kinds[tail..]
                .iter()
                .position(|(k, _)| matches!(k, LayerKind::Dense { .. }))
                .expect("last layer is dense")
        }
    };
    let final_norm_index = kinds
        .iter()
        .rposition(|(k, _)| matches!(k, LayerKind::BatchNorm { .. }));
    Ok(Layout {
        kinds,
        final_norm_index,
        classifier_start,
    })
}

/// Kaiming-uniform (fan-in, ReLU gain) weight for a dense or conv layer.
fn kaiming_uniform<T: Scalar>(kind: &LayerKind, rng: &mut Rng) -> Option<Tensor<T>> {
    let shape = kind.weight_shape()?;
    let fan_in = match *kind {
        LayerKind::Dense { inputs, .. } => inputs,
        LayerKind::Conv2d {
            in_channels,
            kernel,
            ..
        } => in_channels * kernel * kernel,
        LayerKind::BatchNorm { channels } => return Some(Tensor::full(&[channels], T::one())),
        _ => return None,
    };
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Some(Tensor::from_vec(&shape, data).expect("weight shape"))
}

fn fresh_layer<T: Scalar>(kind: LayerKind, bias: bool, rng: &mut Rng) -> Layer<T> {
    let weight = kaiming_uniform(&kind, rng);
    let bias = if bias {
        kind.bias_len().map(|n| Tensor::zeros(&[n]))
    } else {
        None
    };
    let running = match kind {
        LayerKind::BatchNorm { channels } => Some(RunningStats::new(channels)),
        _ => None,
    };
    let init_norm = weight.as_ref().map(Tensor::frobenius_norm);
    Layer {
        kind,
        weight,
        bias,
        running,
        init_norm,
    }
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network. Layer `i` draws its weights from
    /// its own random stream, so the same seed gives identical parameters.
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        let layout = layout(arch)?;
        let layers = layout
            .kinds
            .into_iter()
            .enumerate()
            .map(|(i, (kind, bias))| {
                let mut rng = rng::stream(seed, streams::indexed(streams::INIT, i as u64));
                fresh_layer(kind, bias, &mut rng)
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
            final_norm_index: layout.final_norm_index,
            classifier_start: layout.classifier_start,
        })
    }

    /// Reassembles a network from stored parameters, validating every shape.
    pub fn from_parts(arch: &Architecture, params: Vec<LayerParams<T>>) -> Result<Self> {
        let layout = layout(arch)?;
        if params.len() != layout.kinds.len() {
            return Err(Error::Architecture(format!(
                "{} parameter records for {} layers",
                params.len(),
                layout.kinds.len()
            )));
        }
        let mut layers = Vec::with_capacity(params.len());
        for (i, ((kind, bias), p)) in layout.kinds.into_iter().zip(params).enumerate() {
            let want_w = kind.weight_shape();
            let got_w = p.weight.as_ref().map(|w| w.shape().to_vec());
            let want_b = if bias { kind.bias_len().map(|n| vec![n]) } else { None };
            let got_b = p.bias.as_ref().map(|b| b.shape().to_vec());
            if want_w != got_w || want_b != got_b || want_w.is_some() != p.init_norm.is_some() {
                return Err(Error::Architecture(format!(
                    "layer {i}: stored parameters do not match {kind:?}"
                )));
            }
            let running = match kind {
                LayerKind::BatchNorm { channels } => {
                    let rs = p.running.unwrap_or_else(|| RunningStats::new(channels));
                    if rs.mean.len() != channels || rs.var.len() != channels {
                        return Err(Error::Architecture(format!(
                            "layer {i}: running statistics do not match {channels} channels"
                        )));
                    }
                    Some(rs)
                }
                _ => None,
            };
            layers.push(Layer {
                kind,
                weight: p.weight,
                bias: p.bias,
                running,
                init_norm: p.init_norm,
            });
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
            final_norm_index: layout.final_norm_index,
            classifier_start: layout.classifier_start,
        })
    }

    pub fn to_parts(&self) -> Vec<LayerParams<T>> {
        self.layers
            .iter()
            .map(|l| LayerParams {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
                init_norm: l.init_norm,
                running: l.running.clone(),
            })
            .collect()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable layer access. Initial norms stay read-only.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn final_norm_index(&self) -> Option<usize> {
        self.final_norm_index
    }

    pub fn classifier_start(&self) -> usize {
        self.classifier_start
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense { outputs, .. }) => *outputs,
            _ => unreachable!("validated: last layer is dense"),
        }
    }

    /// Indices of layers that carry a weight, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].weight.is_some())
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.final_norm_index.is_some()
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            if l.weight.is_some() {
                slots.push(ParamSlot {
                    layer,
                    role: ParamRole::Weight,
                });
            }
            if l.bias.is_some() {
                slots.push(ParamSlot {
                    layer,
                    role: ParamRole::Bias,
                });
            }
        }
        slots
    }

    /// Learnable tensors: each layer's weight, then its bias.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// `(layer, current norm, initial norm)` for every weighted layer.
    pub fn weight_norms(&self) -> Vec<WeightNorm<T>> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(layer, l)| {
                Some(WeightNorm {
                    layer,
                    current: l.weight_norm()?,
                    init: l.init_norm?,
                })
            })
            .collect()
    }

    /// Redraws layer `index` from the initializer and records its new norm as
    /// the initial norm.
    pub fn reinitialize_layer(&mut self, index: usize, rng: &mut Rng) -> Result<()> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {index}")))?;
        let has_bias = layer.bias.is_some();
        self.layers[index] = fresh_layer(layer.kind.clone(), has_bias, rng);
        Ok(())
    }

    fn batch_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let per_sample = self.arch.input_len();
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 || x.len() != n * per_sample {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {:?} does not match per-sample input {:?}",
                    x.shape(),
                    self.arch.input
                ),
            ));
        }
        let mut shape = vec![n];
        shape.extend(&self.arch.input);
        if x.shape() == shape.as_slice() {
            Ok(x.clone())
        } else {
            x.reshape(&shape)
        }
    }

    /// Evaluation-mode forward pass (batch norm uses running statistics).
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = self.batch_input(x)?;
        for layer in &self.layers {
            a = layer_forward(layer, a, None)?;
        }
        Ok(a)
    }

    /// Forward pass without recording. `Mode::Train` normalizes with batch
    /// statistics and updates the running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.predict(x);
        }
        let mut a = self.batch_input(x)?;
        for layer in &mut self.layers {
            let mut running = layer.running.take();
            let out = layer_forward(layer, a, Some(running.as_mut()));
            layer.running = running;
            a = out?;
        }
        Ok(a)
    }

    /// Training-mode forward pass recorded on `tape`, with every learnable
    /// tensor registered as a gradient-requiring leaf.
    pub fn forward_tape(&mut self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<TapeForward> {
        let input = self.batch_input(x)?;
        let mut a = tape.leaf(input, false);
        let mut params = Vec::new();
        let momentum = T::lit(BATCHNORM_MOMENTUM);
        let eps = T::lit(BATCHNORM_EPS);
        for layer in &mut self.layers {
            let w = layer.weight.as_ref().map(|w| tape.leaf(w.clone(), true));
            let b = layer.bias.as_ref().map(|b| tape.leaf(b.clone(), true));
            params.extend(w.iter().chain(b.iter()));
            a = match layer.kind {
                LayerKind::Dense { .. } => {
                    let z = tape.matmul(a, w.expect("dense weight"))?;
                    match b {
                        Some(b) => tape.add_bias(z, b)?,
                        None => z,
                    }
                }
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let z = tape.conv2d(a, w.expect("conv weight"), stride, padding)?;
                    match b {
                        Some(b) => tape.add_bias(z, b)?,
                        None => z,
                    }
                }
                LayerKind::BatchNorm { .. } => tape.batchnorm(
                    a,
                    w.expect("bn gamma"),
                    b.expect("bn beta"),
                    layer.running.as_mut(),
                    momentum,
                    eps,
                )?,
                LayerKind::Activation(Activation::Relu) => tape.relu(a)?,
                LayerKind::Activation(Activation::LeakyRelu(s)) => tape.leaky_relu(a, T::lit(s))?,
                LayerKind::MaxPool { size, stride } => tape.maxpool2d(a, size, stride)?,
                LayerKind::Flatten => tape.flatten(a)?,
            };
        }
        Ok(TapeForward { logits: a, params })
    }
}

/// `train_stats`: `None` for evaluation mode; `Some(running)` for training
/// mode, updating `running` when present.
fn layer_forward<T: Scalar>(
    layer: &Layer<T>,
    a: Tensor<T>,
    train_stats: Option<Option<&mut RunningStats<T>>>,
) -> Result<Tensor<T>> {
    let with_bias = |z: Tensor<T>| match &layer.bias {
        Some(b) => ops::add_bias(&z, b),
        None => Ok(z),
    };
    match layer.kind {
        LayerKind::Dense { .. } => with_bias(ops::matmul(&a, layer.weight.as_ref().expect("dense weight"))?),
        LayerKind::Conv2d {
            stride, padding, ..
        } => with_bias(ops::conv2d(
            &a,
            layer.weight.as_ref().expect("conv weight"),
            stride,
            padding,
        )?),
        LayerKind::BatchNorm { .. } => {
            let gamma = layer.weight.as_ref().expect("bn gamma");
            let beta = layer.bias.as_ref().expect("bn beta");
            let eps = T::lit(BATCHNORM_EPS);
            match train_stats {
                Some(running) => Ok(ops::batchnorm_train(
                    &a,
                    gamma,
                    beta,
                    running,
                    T::lit(BATCHNORM_MOMENTUM),
                    eps,
                )?
                .0),
                None => ops::batchnorm_eval(
                    &a,
                    gamma,
                    beta,
                    layer.running.as_ref().expect("bn running stats"),
                    eps,
                ),
            }
        }
        LayerKind::Activation(Activation::Relu) => Ok(ops::relu(&a)),
        LayerKind::Activation(Activation::LeakyRelu(s)) => ops::leaky_relu(&a, T::lit(s)),
        LayerKind::MaxPool { size, stride } => Ok(ops::maxpool2d(&a, size, stride)?.0),
        LayerKind::Flatten => {
            let n = a.shape()[0];
            a.reshape(&[n, a.len() / n])
        }
    }
}
