//! Architecture descriptors, parameter storage and the forward pass.
//!
//! Every convolution and linear weight tensor is prunable. In a
//! reparametrized model each such tensor has its own log-temperature and the
//! forward pass uses the apparent weights `w ⊙ h_t(w)`; in a plain model the
//! raw weights are used. Biases and batch-norm parameters are never
//! reparametrized and never counted as prunable.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::reparam::{self, Crispness, ReparamConfig, Temperature};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

const BN_EPS: Real = 1e-5;
const BN_MOMENTUM: Real = 0.1;

/// The named architectures [`ModelSpec::named`] knows how to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    MlpToy,
    Conv4,
    Conv4Small,
    Vgg19,
    ResNet18,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::MlpToy,
        Architecture::Conv4,
        Architecture::Conv4Small,
        Architecture::Vgg19,
        Architecture::ResNet18,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MlpToy => "mlp-toy",
            Architecture::Conv4 => "conv4",
            Architecture::Conv4Small => "conv4-small",
            Architecture::Vgg19 => "vgg19",
            Architecture::ResNet18 => "resnet18",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown model '{s}' (expected one of mlp-toy, conv4, conv4-small, vgg19, resnet18)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    /// 2×2, stride 2.
    MaxPool,
    BatchNorm {
        channels: usize,
    },
    Flatten,
    GlobalAvgPool,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            bias,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    /// True exactly for layers owning a convolution or linear weight tensor.
    pub fn is_reparametrized(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }

    /// Prunable weight elements of this layer, including nested blocks.
    pub fn prunable_count(&self) -> usize {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel * kernel,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => in_features * out_features,
            LayerSpec::Residual { body, shortcut } => body
                .iter()
                .chain(shortcut)
                .map(LayerSpec::prunable_count)
                .sum(),
            _ => 0,
        }
    }

    /// Output shape (without the batch axis) for an input of shape `input`.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chw = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::dim(format!("{what} expects a CxHxW input, got {input:?}"))),
            }
        };
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = chw("conv")?;
                if c != *in_channels {
                    return Err(Error::dim(format!(
                        "conv expects {in_channels} input channels, got {c}"
                    )));
                }
                if *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(Error::dim(format!("conv kernel {kernel} does not fit input {input:?}")));
                }
                Ok(vec![
                    *out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match *input {
                [f] if f == *in_features => Ok(vec![*out_features]),
                _ => Err(Error::dim(format!(
                    "linear expects {in_features} features, got {input:?}"
                ))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool => {
                let (c, h, w) = chw("maxpool")?;
                if h < 2 || w < 2 {
                    return Err(Error::dim(format!("maxpool needs at least 2x2, got {input:?}")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::BatchNorm { channels } => {
                let (c, _, _) = chw("batchnorm")?;
                if c != *channels {
                    return Err(Error::dim(format!(
                        "batchnorm over {channels} channels got {c}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = chw("global average pooling")?;
                Ok(vec![c])
            }
            LayerSpec::Residual { body, shortcut } => {
                let a = chain_shape(body, input)?;
                let b = chain_shape(shortcut, input)?;
                if a != b {
                    return Err(Error::dim(format!(
                        "residual branches disagree: {a:?} vs {b:?}"
                    )));
                }
                Ok(a)
            }
        }
    }
}

fn chain_shape(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    layers
        .iter()
        .try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
}

/// A network topology: ordered layers, class count and per-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub input_shape: Vec<usize>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<LayerSpec>,
        num_classes: usize,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            layers,
            num_classes,
            input_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One of the built-in architectures.
    pub fn named(name: &str, num_classes: usize, input_shape: &[usize]) -> Result<Self> {
        let arch: Architecture = name.parse()?;
        if num_classes < 2 {
            return Err(Error::usage("a classifier needs at least two classes"));
        }
        let [c, h, w] = *input_shape else {
            return Err(Error::usage(format!(
                "input shape must be [C, H, W], got {input_shape:?}"
            )));
        };
        let layers = match arch {
            Architecture::MlpToy => vec![
                LayerSpec::Flatten,
                LayerSpec::linear(c * h * w, 64),
                LayerSpec::Relu,
                LayerSpec::linear(64, num_classes),
            ],
            Architecture::Conv4 => conv4_layers(c, h, w, [64, 128], 256, num_classes),
            Architecture::Conv4Small => conv4_layers(c, h, w, [32, 64], 128, num_classes),
            Architecture::Vgg19 => vgg19_layers(c, h, w, num_classes),
            Architecture::ResNet18 => resnet18_layers(c, num_classes),
        };
        Self::new(arch.name(), layers, num_classes, input_shape.to_vec())
    }

    /// Checks that consecutive layers chain and end in `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        let out = chain_shape(&self.layers, &self.input_shape)?;
        if out != [self.num_classes] {
            return Err(Error::dim(format!(
                "model '{}' produces {out:?}, expected [{}]",
                self.name, self.num_classes
            )));
        }
        Ok(())
    }

    /// Number of prunable weights; the initial cost of the dense network.
    pub fn prunable_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::prunable_count).sum()
    }
}

fn conv4_layers(
    c: usize,
    h: usize,
    w: usize,
    widths: [usize; 2],
    fc: usize,
    classes: usize,
) -> Vec<LayerSpec> {
    let [a, b] = widths;
    vec![
        LayerSpec::conv(c, a, 3, 1, true),
        LayerSpec::Relu,
        LayerSpec::conv(a, a, 3, 1, true),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::conv(a, b, 3, 1, true),
        LayerSpec::Relu,
        LayerSpec::conv(b, b, 3, 1, true),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Flatten,
        LayerSpec::linear(b * (h / 4) * (w / 4), fc),
        LayerSpec::Relu,
        LayerSpec::linear(fc, fc),
        LayerSpec::Relu,
        LayerSpec::linear(fc, classes),
    ]
}

fn vgg19_layers(c: usize, h: usize, w: usize, classes: usize) -> Vec<LayerSpec> {
    const CFG: [usize; 21] = [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
    ];
    let mut layers = Vec::new();
    let mut in_ch = c;
    for &v in &CFG {
        if v == 0 {
            layers.push(LayerSpec::MaxPool);
        } else {
            layers.push(LayerSpec::conv(in_ch, v, 3, 1, false));
            layers.push(LayerSpec::BatchNorm { channels: v });
            layers.push(LayerSpec::Relu);
            in_ch = v;
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::linear(512 * (h / 32) * (w / 32), classes));
    layers
}

fn resnet18_layers(c: usize, classes: usize) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::conv(c, 64, 3, 1, false),
        LayerSpec::BatchNorm { channels: 64 },
        LayerSpec::Relu,
    ];
    let mut in_planes = 64;
    for (planes, first_stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
        for stride in [first_stride, 1] {
            let body = vec![
                LayerSpec::conv(in_planes, planes, 3, stride, false),
                LayerSpec::BatchNorm { channels: planes },
                LayerSpec::Relu,
                LayerSpec::conv(planes, planes, 3, 1, false),
                LayerSpec::BatchNorm { channels: planes },
            ];
            let shortcut = if stride != 1 || in_planes != planes {
                vec![
                    LayerSpec::conv(in_planes, planes, 1, stride, false),
                    LayerSpec::BatchNorm { channels: planes },
                ]
            } else {
                Vec::new()
            };
            layers.push(LayerSpec::Residual { body, shortcut });
            layers.push(LayerSpec::Relu);
            in_planes = planes;
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::linear(512, classes));
    layers
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Prunable conv/linear weight.
    Weight,
    /// `τ = ln t` of the layer's stopband.
    LogTemperature,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::LogTemperature => "log_t",
            ParamRole::Bias => "bias",
            ParamRole::BnScale => "bn_scale",
            ParamRole::BnShift => "bn_shift",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    /// Entries fixed at zero by magnitude pruning; `true` means kept.
    pub mask: Option<Vec<bool>>,
}

/// A prunable weight tensor and its temperature, by parameter index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunableLayer {
    pub name: String,
    pub weight: usize,
    pub log_t: Option<usize>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        weight: usize,
        log_t: Option<usize>,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: usize,
        log_t: Option<usize>,
        bias: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    GlobalAvgPool,
    BatchNorm {
        scale: usize,
        shift: usize,
        mean: usize,
        var: usize,
    },
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Options for [`Model::build`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    pub seed: u64,
    /// `None` builds the plain (primary) network.
    pub reparam: Option<ReparamConfig>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            reparam: Some(ReparamConfig::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Parameters become graph leaves; batch-norm uses batch statistics.
    Train,
    /// Parameters are constants; batch-norm uses running statistics.
    Eval,
}

/// Result of [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    /// Graph node of each parameter used, by parameter index.
    pub params: Vec<Option<Var>>,
    /// Batch statistics to fold into running statistics, keyed by the
    /// `(running_mean, running_var)` parameter indices.
    pub batch_stats: Vec<(usize, usize, BatchStats)>,
}

impl Forward {
    /// `(weight, log_t)` graph nodes of every reparametrized layer.
    pub fn reparam_pairs(&self, model: &Model) -> Vec<(Var, Var)> {
        model
            .prunable
            .iter()
            .filter_map(|p| {
                let lt = p.log_t?;
                Some((self.params[p.weight]?, self.params[lt]?))
            })
            .collect()
    }
}

/// A network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    layers: Vec<Layer>,
    prunable: Vec<PrunableLayer>,
    crispness: Option<Crispness>,
}

struct Builder<'a> {
    params: Vec<Param>,
    prunable: Vec<PrunableLayer>,
    rng: ChaCha8Rng,
    reparam: Option<&'a ReparamConfig>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, role: ParamRole, value: Tensor) -> usize {
        self.params.push(Param {
            name,
            role,
            value,
            mask: None,
        });
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: Real) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    fn prunable_weight(&mut self, prefix: &str, shape: Vec<usize>, fan_in: usize) -> (usize, Option<usize>) {
        let bound = (3.0 / fan_in as Real).sqrt();
        let w = self.uniform(shape, bound);
        let weight = self.push(format!("{prefix}.weight"), ParamRole::Weight, w);
        let log_t = self.reparam.map(|cfg| {
            let tau = Temperature::new(cfg.t_init).expect("validated").log_t();
            self.push(format!("{prefix}.log_t"), ParamRole::LogTemperature, Tensor::scalar(tau))
        });
        self.prunable.push(PrunableLayer {
            name: prefix.to_string(),
            weight,
            log_t,
        });
        (weight, log_t)
    }

    fn layers(&mut self, prefix: &str, specs: &[LayerSpec]) -> Vec<Layer> {
        specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let name = if prefix.is_empty() {
                    i.to_string()
                } else {
                    format!("{prefix}.{i}")
                };
                self.layer(&name, spec)
            })
            .collect()
    }

    fn layer(&mut self, name: &str, spec: &LayerSpec) -> Layer {
        match spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let fan_in = in_channels * kernel * kernel;
                let (weight, log_t) = self.prunable_weight(
                    name,
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    fan_in,
                );
                let bias = bias.then(|| {
                    let b = self.uniform(vec![1, *out_channels, 1, 1], 1.0 / (fan_in as Real).sqrt());
                    self.push(format!("{name}.bias"), ParamRole::Bias, b)
                });
                Layer::Conv {
                    weight,
                    log_t,
                    bias,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let (weight, log_t) =
                    self.prunable_weight(name, vec![*in_features, *out_features], *in_features);
                let b = self.uniform(vec![1, *out_features], 1.0 / (*in_features as Real).sqrt());
                let bias = self.push(format!("{name}.bias"), ParamRole::Bias, b);
                Layer::Linear {
                    weight,
                    log_t,
                    bias,
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::BatchNorm { channels } => {
                let c = *channels;
                Layer::BatchNorm {
                    scale: self.push(format!("{name}.bn_scale"), ParamRole::BnScale, Tensor::ones(vec![c])),
                    shift: self.push(format!("{name}.bn_shift"), ParamRole::BnShift, Tensor::zeros(vec![c])),
                    mean: self.push(
                        format!("{name}.running_mean"),
                        ParamRole::RunningMean,
                        Tensor::zeros(vec![c]),
                    ),
                    var: self.push(
                        format!("{name}.running_var"),
                        ParamRole::RunningVar,
                        Tensor::ones(vec![c]),
                    ),
                }
            }
            LayerSpec::Residual { body, shortcut } => Layer::Residual {
                body: self.layers(&format!("{name}.body"), body),
                shortcut: self.layers(&format!("{name}.shortcut"), shortcut),
            },
        }
    }
}

impl Model {
    /// Builds a named architecture with freshly initialized parameters.
    pub fn build(
        name: &str,
        num_classes: usize,
        input_shape: &[usize],
        options: BuildOptions,
    ) -> Result<Self> {
        Self::from_spec(ModelSpec::named(name, num_classes, input_shape)?, options)
    }

    /// Initializes a model for an arbitrary spec. Weights are drawn from
    /// `U(-√(3/fan_in), √(3/fan_in))`, biases from `U(-1/√fan_in, 1/√fan_in)`,
    /// both with a seeded generator.
    pub fn from_spec(spec: ModelSpec, options: BuildOptions) -> Result<Self> {
        spec.validate()?;
        let mut builder = Builder {
            params: Vec::new(),
            prunable: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(options.seed),
            reparam: options.reparam.as_ref(),
        };
        let layers = builder.layers("", &spec.layers);
        Ok(Self {
            spec,
            params: builder.params,
            layers,
            prunable: builder.prunable,
            crispness: options.reparam.map(|r| r.crispness),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn prunable_layers(&self) -> &[PrunableLayer] {
        &self.prunable
    }

    /// `Some(n)` for a reparametrized (surrogate) network.
    pub fn crispness(&self) -> Option<Crispness> {
        self.crispness
    }

    pub fn is_reparametrized(&self) -> bool {
        self.crispness.is_some()
    }

    /// Exact number of prunable weight elements.
    pub fn count_prunable(&self) -> usize {
        self.prunable
            .iter()
            .map(|p| self.params[p.weight].value.len())
            .sum()
    }

    pub fn temperature(&self, layer: &PrunableLayer) -> Option<Temperature> {
        layer
            .log_t
            .map(|i| Temperature::from_log(self.params[i].value.item()))
    }

    pub fn temperatures(&self) -> Vec<Temperature> {
        self.prunable
            .iter()
            .filter_map(|p| self.temperature(p))
            .collect()
    }

    /// Weights the forward pass actually uses for `layer`.
    pub fn apparent_weights(&self, layer: &PrunableLayer) -> Vec<Real> {
        let w = self.params[layer.weight].value.data();
        match (self.temperature(layer), self.crispness) {
            (Some(t), Some(n)) => reparam::apparent_weights(w, t, n),
            _ => w.to_vec(),
        }
    }

    /// `Σ h_t(w)` over all prunable weights, for reparametrized models.
    pub fn surrogate_cost(&self) -> Option<Real> {
        let n = self.crispness?;
        let layers = self.prunable.iter().filter_map(|p| {
            Some((self.params[p.weight].value.data(), self.temperature(p)?))
        });
        Some(crate::budget::surrogate_cost_value(layers, n))
    }

    /// Number of prunable weights that are exactly zero.
    pub fn count_zero_weights(&self) -> usize {
        self.prunable
            .iter()
            .map(|p| {
                self.params[p.weight]
                    .value
                    .data()
                    .iter()
                    .filter(|&&v| v == 0.0)
                    .count()
            })
            .sum()
    }

    /// Records the forward pass for a batch `[N × C × H × W]`.
    pub fn forward(&self, g: &mut Graph, input: Var, mode: ForwardMode) -> Result<Forward> {
        self.forward_from(g, input, mode, vec![None; self.params.len()])
    }

    /// Like [`Model::forward`], but reads every parameter from the given graph
    /// nodes (one per entry of [`Model::params`], in order) instead of the
    /// stored values. Batch-norm running statistics are still taken from the
    /// model in eval mode.
    pub fn forward_with(&self, g: &mut Graph, input: Var, mode: ForwardMode, params: &[Var]) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(Error::dim(format!(
                "model has {} parameters, got {} graph nodes",
                self.params.len(),
                params.len()
            )));
        }
        self.forward_from(g, input, mode, params.iter().copied().map(Some).collect())
    }

    fn forward_from(&self, g: &mut Graph, input: Var, mode: ForwardMode, params: Vec<Option<Var>>) -> Result<Forward> {
        let shape = g.shape(input);
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(format!(
                "model '{}' expects input [N, {:?}], got {shape:?}",
                self.spec.name, self.spec.input_shape
            )));
        }
        let mut state = ForwardState {
            model: self,
            mode,
            params,
            batch_stats: Vec::new(),
        };
        let logits = state.run(g, &self.layers, input)?;
        Ok(Forward {
            logits,
            params: state.params,
            batch_stats: state.batch_stats,
        })
    }

    /// Evaluation-mode logits for a batch of images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let f = self.forward(&mut g, x, ForwardMode::Eval)?;
        Ok(g.value(f.logits).clone())
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, usize, BatchStats)]) {
        for (mean_idx, var_idx, s) in stats {
            let unbias = if s.count > 1 {
                s.count as Real / (s.count - 1) as Real
            } else {
                1.0
            };
            let mean = self.params[*mean_idx].value.data_mut();
            for (m, &b) in mean.iter_mut().zip(&s.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = self.params[*var_idx].value.data_mut();
            for (v, &b) in var.iter_mut().zip(&s.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
            }
        }
    }

    /// Switches between the surrogate network (`Some`) and the primary
    /// network (`None`). Temperatures are created at `t_init` when missing.
    pub fn with_reparam(&self, reparam: Option<ReparamConfig>) -> Result<Self> {
        let mut fresh = Self::from_spec(
            self.spec.clone(),
            BuildOptions {
                seed: 0,
                reparam,
            },
        )?;
        for p in &mut fresh.params {
            if let Some(old) = self.params.iter().find(|o| o.name == p.name) {
                *p = old.clone();
            }
        }
        Ok(fresh)
    }
}

struct ForwardState<'a> {
    model: &'a Model,
    mode: ForwardMode,
    params: Vec<Option<Var>>,
    batch_stats: Vec<(usize, usize, BatchStats)>,
}

impl ForwardState<'_> {
    fn param(&mut self, g: &mut Graph, idx: usize) -> Var {
        if let Some(v) = self.params[idx] {
            return v;
        }
        let p = &self.model.params[idx];
        let v = if self.mode == ForwardMode::Train && p.role.is_trainable() {
            g.param(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.params[idx] = Some(v);
        v
    }

    fn weight(&mut self, g: &mut Graph, weight: usize, log_t: Option<usize>) -> Result<Var> {
        let w = self.param(g, weight);
        match (self.model.crispness, log_t) {
            (Some(n), Some(lt)) => {
                let lt = self.param(g, lt);
                g.apparent_weights(w, lt, n.get())
            }
            _ => Ok(w),
        }
    }

    fn run(&mut self, g: &mut Graph, layers: &[Layer], mut x: Var) -> Result<Var> {
        for layer in layers {
            x = self.layer(g, layer, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, g: &mut Graph, layer: &Layer, x: Var) -> Result<Var> {
        match layer {
            Layer::Conv {
                weight,
                log_t,
                bias,
                stride,
                padding,
            } => {
                let w = self.weight(g, *weight, *log_t)?;
                let y = g.conv2d(x, w, *stride, *padding)?;
                match bias {
                    Some(b) => {
                        let b = self.param(g, *b);
                        g.add(y, b)
                    }
                    None => Ok(y),
                }
            }
            Layer::Linear {
                weight,
                log_t,
                bias,
            } => {
                let w = self.weight(g, *weight, *log_t)?;
                let y = g.matmul(x, w)?;
                let b = self.param(g, *bias);
                g.add(y, b)
            }
            Layer::Relu => Ok(g.relu(x)),
            Layer::MaxPool => g.maxpool2d(x),
            Layer::Flatten => g.flatten(x),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::BatchNorm {
                scale,
                shift,
                mean,
                var,
            } => {
                let gamma = self.param(g, *scale);
                let beta = self.param(g, *shift);
                match self.mode {
                    ForwardMode::Train => {
                        let (y, stats) = g.batchnorm2d(x, gamma, beta, BN_EPS)?;
                        self.batch_stats.push((*mean, *var, stats));
                        Ok(y)
                    }
                    ForwardMode::Eval => {
                        let params = &self.model.params;
                        let c = params[*scale].value.len();
                        let (gm, bt) = (params[*scale].value.data(), params[*shift].value.data());
                        let (rm, rv) = (params[*mean].value.data(), params[*var].value.data());
                        let mul: Vec<Real> =
                            (0..c).map(|i| gm[i] / (rv[i] + BN_EPS).sqrt()).collect();
                        let add: Vec<Real> = (0..c).map(|i| bt[i] - rm[i] * mul[i]).collect();
                        let mul = g.constant(Tensor::new(vec![1, c, 1, 1], mul)?);
                        let add = g.constant(Tensor::new(vec![1, c, 1, 1], add)?);
                        let y = g.mul(x, mul)?;
                        g.add(y, add)
                    }
                }
            }
            Layer::Residual { body, shortcut } => {
                let a = self.run(g, body, x)?;
                let b = self.run(g, shortcut, x)?;
                g.add(a, b)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> BuildOptions {
        BuildOptions {
            seed: 7,
            reparam: None,
        }
    }

    #[test]
    fn mlp_toy_prunable_count() {
        let m = Model::build("mlp-toy", 10, &[1, 28, 28], BuildOptions::default()).unwrap();
        assert_eq!(m.count_prunable(), 784 * 64 + 64 * 10);
        assert_eq!(m.spec().prunable_count(), 50_816);
    }

    #[test]
    fn conv4_first_layer() {
        let spec = ModelSpec::named("conv4", 10, &[3, 32, 32]).unwrap();
        assert_eq!(spec.layers[0].prunable_count(), 1_728);
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(
            Model::build("alexnet", 10, &[3, 32, 32], plain()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn no_prunable_layers() {
        let spec = ModelSpec::new("pool-only", vec![LayerSpec::GlobalAvgPool], 3, vec![3, 4, 4]).unwrap();
        let m = Model::from_spec(spec, BuildOptions::default()).unwrap();
        assert_eq!(m.count_prunable(), 0);
        assert_eq!(m.surrogate_cost(), Some(0.0));
    }

    #[test]
    fn chain_mismatch_rejected() {
        let layers = vec![
            LayerSpec::conv(3, 8, 3, 1, true),
            LayerSpec::conv(4, 8, 3, 1, true),
        ];
        assert!(ModelSpec::new("bad", layers, 8, vec![3, 8, 8]).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build("conv4-small", 10, &[3, 8, 8], BuildOptions::default()).unwrap();
        let b = Model::build("conv4-small", 10, &[3, 8, 8], BuildOptions::default()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::build(
            "conv4-small",
            10,
            &[3, 8, 8],
            BuildOptions {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn temperatures_start_at_t_init() {
        let m = Model::build("conv4-small", 10, &[3, 8, 8], BuildOptions::default()).unwrap();
        let temps = m.temperatures();
        assert_eq!(temps.len(), 7);
        for t in temps {
            assert!((t.t() - 100.0).abs() < 1e-9);
        }
        let p = Model::build("conv4-small", 10, &[3, 8, 8], plain()).unwrap();
        assert!(p.temperatures().is_empty());
        assert_eq!(p.surrogate_cost(), None);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = Model::build("conv4-small", 10, &[3, 8, 8], plain()).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(vec![2, 3, 16, 16])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_weights_give_class_constant_bias_logits() {
        let mut m = Model::build("conv4-small", 10, &[3, 8, 8], BuildOptions::default()).unwrap();
        for p in m.params_mut() {
            if p.role == ParamRole::Weight {
                p.value.data_mut().fill(0.0);
            }
        }
        let x = Tensor::from_fn(vec![3, 3, 8, 8], |i| (i as Real * 0.13).sin());
        let logits = m.logits(&x).unwrap();
        let row0 = &logits.data()[0..10];
        for r in logits.data().chunks(10) {
            assert_eq!(r, row0);
        }
        // The last layer's bias is all that is left.
        let last_bias = m.params().iter().rev().find(|p| p.role == ParamRole::Bias).unwrap();
        assert_eq!(row0, last_bias.value.data());
    }

    #[test]
    fn with_reparam_keeps_weights() {
        let m = Model::build("mlp-toy", 10, &[1, 4, 4], plain()).unwrap();
        let r = m.with_reparam(Some(ReparamConfig::default())).unwrap();
        assert!(r.is_reparametrized());
        for layer in m.prunable_layers() {
            assert_eq!(
                m.params()[layer.weight].value,
                r.params()[r.prunable_layers().iter().find(|l| l.name == layer.name).unwrap().weight].value
            );
        }
    }

    #[test]
    fn vgg19_and_resnet18_build() {
        let vgg = ModelSpec::named("vgg19", 10, &[3, 32, 32]).unwrap();
        let resnet = ModelSpec::named("resnet18", 10, &[3, 32, 32]).unwrap();
        // 16 convolutions plus the classifier.
        assert_eq!(
            vgg.layers.iter().filter(|l| l.is_reparametrized()).count(),
            17
        );
        assert!(resnet.prunable_count() > 11_000_000);
        assert!(ModelSpec::named("vgg19", 10, &[3, 16, 16]).is_err());
    }
}
