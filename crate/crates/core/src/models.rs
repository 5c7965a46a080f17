//! Network assembly: backbone, bottleneck head and server-side decoder.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayD, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder_layers::{backward_dynamic, forward_dynamic, BottleneckOutput, ImportanceBottleneck, MonotoneGate};
use crate::error::{Error, Result};
use crate::ib_losses::{kl_gaussian, kl_log_uniform_with_grad, KlConstants, VibModel};
use crate::nn::{reshape_owned, Dense, LayerSpec, Param, ParamVisitor, Sequential};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Mnist,
    Cifar10,
    TinyImagenet,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Mnist, Task::Cifar10, Task::TinyImagenet];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Mnist => "mnist",
            Task::Cifar10 => "cifar10",
            Task::TinyImagenet => "tiny-imagenet",
        }
    }

    /// `(channels, height, width)` of one input image.
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Task::Mnist => [1, 28, 28],
            Task::Cifar10 => [3, 32, 32],
            Task::TinyImagenet => [3, 64, 64],
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Task::Mnist | Task::Cifar10 => 10,
            Task::TinyImagenet => 200,
        }
    }

    pub fn default_gamma0(&self) -> f64 {
        match self {
            Task::Mnist => 0.05,
            Task::Cifar10 | Task::TinyImagenet => 0.01,
        }
    }

    pub fn default_epochs(&self) -> usize {
        match self {
            Task::Mnist => 100,
            Task::Cifar10 | Task::TinyImagenet => 150,
        }
    }

    pub fn default_width(&self) -> usize {
        match self {
            Task::Mnist | Task::Cifar10 => 64,
            Task::TinyImagenet => 128,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected mnist, cifar10 or tiny-imagenet)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vfe,
    VlVfe,
    DeepJscc,
    Quantization,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vfe, Variant::VlVfe, Variant::DeepJscc, Variant::Quantization];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Vfe => "vfe",
            Variant::VlVfe => "vl-vfe",
            Variant::DeepJscc => "deep-jscc",
            Variant::Quantization => "quantization",
        }
    }

    /// Uses the importance bottleneck (and so the sparsity prior).
    pub fn is_variational(&self) -> bool {
        matches!(self, Variant::Vfe | Variant::VlVfe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected vfe, vl-vfe, deep-jscc or quantization)")))
    }
}

/// Variational marginal over the encoded features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    #[default]
    LogUniform,
    /// Diagonal Gaussian with a trainable mean and log-variance per dimension.
    Gaussian,
}

impl Prior {
    pub fn as_str(&self) -> &'static str {
        match self {
            Prior::LogUniform => "log-uniform",
            Prior::Gaussian => "gaussian",
        }
    }
}

impl FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-uniform" => Ok(Prior::LogUniform),
            "gaussian" => Ok(Prior::Gaussian),
            _ => Err(Error::Config(format!("unknown prior `{s}` (expected log-uniform or gaussian)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    DeepJscc,
    Quantization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub n: usize,
    /// Quantization only.
    pub bits_per_dim: Option<u32>,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArchitecture("baseline feature width must be positive".into()));
        }
        match (self.kind, self.bits_per_dim) {
            (BaselineKind::Quantization, Some(b)) if (1..=16).contains(&b) => Ok(()),
            (BaselineKind::Quantization, b) => {
                Err(Error::InvalidArchitecture(format!("quantization needs 1..=16 bits per dimension, got {b:?}")))
            }
            (BaselineKind::DeepJscc, None) => Ok(()),
            (BaselineKind::DeepJscc, Some(_)) => Err(Error::InvalidArchitecture("deep-jscc takes no bit width".into())),
        }
    }
}

/// Layer lists on either side of the bottleneck.
///
/// The bottleneck itself (fully-connected + Tanh of width
/// `bottleneck_width`) sits between `on_device` and `server`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub task: Task,
    pub bottleneck_width: usize,
    pub on_device: Vec<LayerSpec>,
    pub server: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Reference layout for `task` with an `n`-dimensional bottleneck.
    pub fn for_task(task: Task, n: usize) -> Self {
        use LayerSpec::*;
        let classes = task.classes();
        let (on_device, server) = match task {
            Task::Mnist => (
                vec![Flatten],
                vec![
                    Dense { inputs: n, outputs: 1024 },
                    Relu,
                    Dense { inputs: 1024, outputs: 256 },
                    Relu,
                    Dense { inputs: 256, outputs: classes },
                ],
            ),
            Task::Cifar10 => (
                vec![
                    Conv { in_channels: 3, out_channels: 128, kernel: 3, stride: 1, padding: 1 },
                    Relu,
                    Conv { in_channels: 128, out_channels: 128, kernel: 3, stride: 1, padding: 1 },
                    Relu,
                    ResBlock { in_channels: 128, out_channels: 128, stride: 2 },
                    Conv { in_channels: 128, out_channels: 32, kernel: 3, stride: 2, padding: 1 },
                    Relu,
                    Conv { in_channels: 32, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                    Relu,
                    Flatten,
                ],
                vec![
                    Dense { inputs: n, outputs: 64 },
                    Relu,
                    Reshape { shape: vec![4, 4, 4] },
                    Conv { in_channels: 4, out_channels: 512, kernel: 3, stride: 1, padding: 1 },
                    Relu,
                    Conv { in_channels: 512, out_channels: 512, kernel: 3, stride: 1, padding: 1 },
                    Relu,
                    ResBlock { in_channels: 512, out_channels: 512, stride: 1 },
                    GlobalAvgPool,
                    Dense { inputs: 512, outputs: classes },
                ],
            ),
            Task::TinyImagenet => (
                vec![
                    ResBlock { in_channels: 3, out_channels: 64, stride: 2 },
                    ResBlock { in_channels: 64, out_channels: 128, stride: 2 },
                    ResBlock { in_channels: 128, out_channels: 256, stride: 2 },
                    ResBlock { in_channels: 256, out_channels: 512, stride: 2 },
                    ResBlock { in_channels: 512, out_channels: 512, stride: 1 },
                    GlobalAvgPool,
                ],
                vec![Dense { inputs: n, outputs: 512 }, Relu, Dense { inputs: 512, outputs: classes }],
            ),
        };
        Self { task, bottleneck_width: n, on_device, server }
    }

    /// Width of the vector entering the bottleneck.
    pub fn bottleneck_inputs(&self) -> Result<usize> {
        let shape = propagate(&self.on_device, &self.task.input_shape())?;
        match shape.as_slice() {
            [d] => Ok(*d),
            other => Err(Error::InvalidArchitecture(format!(
                "on-device stack must end in a flat vector, got shape {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_width == 0 {
            return Err(Error::InvalidArchitecture("bottleneck width must be positive".into()));
        }
        self.bottleneck_inputs()?;
        let out = propagate(&self.server, &[self.bottleneck_width])?;
        if out != [self.task.classes()] {
            return Err(Error::InvalidArchitecture(format!(
                "server stack ends in shape {out:?}, expected [{}] for {}",
                self.task.classes(),
                self.task
            )));
        }
        Ok(())
    }
}

/// Per-example output shape of a layer stack, or an error naming the first
/// layer whose input does not fit.
pub fn propagate(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        let bad = |msg: String| Error::InvalidArchitecture(format!("layer {i} ({spec:?}): {msg}"));
        shape = match spec {
            LayerSpec::Dense { inputs, outputs } => match shape.as_slice() {
                [d] if d == inputs => vec![*outputs],
                _ => return Err(bad(format!("expects [{inputs}], got {shape:?}"))),
            },
            LayerSpec::Relu => shape,
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => match shape.as_slice() {
                [c, h, w] if c == in_channels && *stride > 0 && h + 2 * padding >= *kernel && w + 2 * padding >= *kernel => {
                    vec![*out_channels, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1]
                }
                _ => return Err(bad(format!("does not fit input {shape:?}"))),
            },
            LayerSpec::ResBlock { in_channels, out_channels, stride } => match shape.as_slice() {
                [c, h, w] if c == in_channels && *stride > 0 => {
                    vec![*out_channels, (h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1]
                }
                _ => return Err(bad(format!("does not fit input {shape:?}"))),
            },
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Reshape { shape: target } => {
                if target.iter().product::<usize>() != shape.iter().product::<usize>() {
                    return Err(bad(format!("cannot reshape {shape:?} to {target:?}")));
                }
                target.clone()
            }
            LayerSpec::GlobalAvgPool => match shape.as_slice() {
                [c, _, _] => vec![*c],
                _ => return Err(bad(format!("expects a (c, h, w) input, got {shape:?}"))),
            },
        };
    }
    Ok(shape)
}

/// Uniform midrise quantizer with `2^bits` levels over `[-1, 1]`.
///
/// Returns the quantized value and whether the input had to be clamped.
pub fn quantize_scalar<T: Real>(x: T, bits: u32) -> (T, bool) {
    let levels = (1u64 << bits) as f64;
    let step = 2.0 / levels;
    let v = x.as_f64();
    let clamped = !(-1.0..=1.0).contains(&v);
    let index = ((v.clamp(-1.0, 1.0) + 1.0) / step).floor().clamp(0.0, levels - 1.0);
    (T::of((index + 0.5) * step - 1.0), clamped)
}

/// Quantizes every component; returns the number of clamped inputs.
pub fn quantize<T: Real>(features: &mut [T], bits: u32) -> usize {
    let mut clamped = 0;
    for v in features.iter_mut() {
        let (q, c) = quantize_scalar(*v, bits);
        *v = q;
        clamped += c as usize;
    }
    clamped
}

/// The layer that produces the transmitted features.
#[derive(Clone, Debug)]
pub enum Head<T> {
    Static(ImportanceBottleneck<T>),
    Gated { layer: ImportanceBottleneck<T>, gate: MonotoneGate<T> },
    /// Fully-connected + Tanh, optionally quantized.
    Plain { dense: Dense<T>, bits: Option<u32>, output: Option<Array2<T>> },
}

impl<T: Real> Head<T> {
    pub fn outputs(&self) -> usize {
        match self {
            Head::Static(l) | Head::Gated { layer: l, .. } => l.outputs(),
            Head::Plain { dense, .. } => dense.outputs(),
        }
    }

    pub fn bottleneck(&self) -> Option<&ImportanceBottleneck<T>> {
        match self {
            Head::Static(l) | Head::Gated { layer: l, .. } => Some(l),
            Head::Plain { .. } => None,
        }
    }

    pub fn bottleneck_mut(&mut self) -> Option<&mut ImportanceBottleneck<T>> {
        match self {
            Head::Static(l) | Head::Gated { layer: l, .. } => Some(l),
            Head::Plain { .. } => None,
        }
    }

    pub fn gate(&self) -> Option<&MonotoneGate<T>> {
        match self {
            Head::Gated { gate, .. } => Some(gate),
            _ => None,
        }
    }
}

/// Trainable Gaussian prior parameters.
#[derive(Clone, Debug)]
pub struct GaussianPrior<T> {
    pub mean: Param<T>,
    pub log_var: Param<T>,
}

/// Encoder (backbone + head) and server-side decoder.
#[derive(Clone, Debug)]
pub struct Model<T> {
    /// Spec the model was built from.
    pub spec: ModelSpec,
    pub arch: ArchitectureSpec,
    pub variant: Variant,
    pub prior: Prior,
    pub backbone: Sequential<T>,
    pub head: Head<T>,
    pub server: Sequential<T>,
    pub gaussian: Option<GaussianPrior<T>>,
    pub constants: KlConstants,
    /// Deactivation threshold used by the gated head.
    pub gamma0: T,
    /// Quantizer inputs that fell outside `[-1, 1]`.
    pub clamp_count: usize,
    /// Mean transmitted dimensions per example in the last encoded batch.
    pub last_active_mean: f64,
    backbone_shape: Option<Vec<usize>>,
}

/// Everything needed to rebuild a model skeleton before loading weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchitectureSpec,
    pub variant: Variant,
    pub prior: Prior,
    pub bits_per_dim: Option<u32>,
    pub gamma0: f64,
    pub gate_hidden: usize,
    pub gate_layers: usize,
}

impl ModelSpec {
    pub fn new(arch: ArchitectureSpec, variant: Variant) -> Self {
        let gamma0 = arch.task.default_gamma0();
        Self {
            arch,
            variant,
            prior: Prior::LogUniform,
            bits_per_dim: None,
            gamma0,
            gate_hidden: crate::encoder_layers::DEFAULT_GATE_HIDDEN,
            gate_layers: crate::encoder_layers::DEFAULT_GATE_LAYERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        match (self.variant, self.bits_per_dim) {
            (Variant::Quantization, None) => {
                return Err(Error::InvalidArchitecture("quantization variant needs bits_per_dim".into()))
            }
            (Variant::Quantization, Some(b)) if !(1..=16).contains(&b) => {
                return Err(Error::InvalidArchitecture(format!("bits_per_dim must be in 1..=16, got {b}")))
            }
            (Variant::Vfe | Variant::VlVfe | Variant::DeepJscc, Some(_)) => {
                return Err(Error::InvalidArchitecture(format!("{} takes no bits_per_dim", self.variant)))
            }
            _ => {}
        }
        if self.prior == Prior::Gaussian && !self.variant.is_variational() {
            return Err(Error::InvalidArchitecture(format!("{} has no variational prior", self.variant)));
        }
        if !(self.gamma0 >= 0.0) {
            return Err(Error::InvalidArchitecture(format!("gamma0 must be non-negative, got {}", self.gamma0)));
        }
        if self.variant == Variant::VlVfe && (self.gate_hidden == 0 || self.gate_layers == 0) {
            return Err(Error::InvalidArchitecture("gate needs at least one layer and one hidden unit".into()));
        }
        Ok(())
    }
}

/// Builds a freshly initialized model; the same spec and seed always give
/// the same parameters.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.arch.bottleneck_inputs()?;
    let n = spec.arch.bottleneck_width;
    let backbone = Sequential::new(spec.arch.on_device.clone(), &mut rng);
    let head = match spec.variant {
        Variant::Vfe => Head::Static(ImportanceBottleneck::new(d, n, &mut rng)),
        Variant::VlVfe => {
            let layer = ImportanceBottleneck::new(d, n, &mut rng);
            let gate = MonotoneGate::new(n, spec.gate_hidden, spec.gate_layers, crate::encoder_layers::DEFAULT_TARGET_G, &mut rng);
            Head::Gated { layer, gate }
        }
        Variant::DeepJscc => Head::Plain { dense: Dense::new(d, n, &mut rng), bits: None, output: None },
        Variant::Quantization => Head::Plain { dense: Dense::new(d, n, &mut rng), bits: spec.bits_per_dim, output: None },
    };
    let server = Sequential::new(spec.arch.server.clone(), &mut rng);
    let gaussian = (spec.prior == Prior::Gaussian).then(|| GaussianPrior {
        mean: Param::new(ArrayD::zeros(ndarray::IxDyn(&[n]))),
        log_var: Param::new(ArrayD::zeros(ndarray::IxDyn(&[n]))),
    });
    Ok(Model {
        spec: spec.clone(),
        arch: spec.arch.clone(),
        variant: spec.variant,
        prior: spec.prior,
        backbone,
        head,
        server,
        gaussian,
        constants: KlConstants::default(),
        gamma0: T::of(spec.gamma0),
        clamp_count: 0,
        last_active_mean: 0.0,
        backbone_shape: None,
    })
}

impl<T: Real> Model<T> {
    pub fn classes(&self) -> usize {
        self.arch.task.classes()
    }

    pub fn width(&self) -> usize {
        self.head.outputs()
    }

    /// Visits every trainable parameter in a fixed order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.backbone.visit_params("device", f);
        match &mut self.head {
            Head::Static(l) => l.visit_params("bottleneck", f),
            Head::Gated { layer, gate } => {
                layer.visit_params("bottleneck", f);
                gate.visit_params("gate", f);
            }
            Head::Plain { dense, .. } => dense.visit_params("bottleneck", f),
        }
        if let Some(g) = &mut self.gaussian {
            f("prior.mean", &mut g.mean);
            f("prior.log_var", &mut g.log_var);
        }
        self.server.visit_params("server", f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Parameters that live on the device, excluding the importance vector.
    pub fn on_device_weight_count(&mut self) -> usize {
        let mut n = self.backbone.param_count();
        match &mut self.head {
            Head::Static(l) | Head::Gated { layer: l, .. } => n += l.weight.len(),
            Head::Plain { dense, .. } => n += dense.weight.len() + dense.bias.len(),
        }
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Pruning mask of the static bottleneck (all false otherwise).
    pub fn pruned_mask(&self) -> Vec<bool> {
        match self.head.bottleneck() {
            Some(l) => l.pruned.clone(),
            None => vec![false; self.width()],
        }
    }

    /// Importance vector of the static bottleneck.
    pub fn gamma(&self) -> Option<Array1<T>> {
        match &self.head {
            Head::Static(l) => Some(l.gamma_values()),
            _ => None,
        }
    }

    /// Dimensions a static encoder transmits.
    pub fn static_active(&self) -> usize {
        match &self.head {
            Head::Static(l) => l.unpruned_count(),
            _ => self.width(),
        }
    }

    /// Feature extractor output, flattened to `(batch, d)`.
    fn features(&mut self, x: &ArrayD<T>, train: bool) -> Array2<T> {
        let a = self.backbone.forward(x.clone(), train);
        if train {
            self.backbone_shape = Some(a.shape().to_vec());
        }
        let batch = a.shape()[0];
        let d = a.len() / batch.max(1);
        reshape_owned(a, &[batch, d]).into_dimensionality::<Ix2>().expect("2-d features")
    }

    /// Encodes a batch, gating with `gate_sigma2` (one per example).
    pub fn encode_batch(&mut self, x: &ArrayD<T>, gate_sigma2: &Array1<T>, train: bool) -> BottleneckOutput<T> {
        let out = self.encode_inner(x, gate_sigma2, train);
        let batch = out.active.nrows().max(1);
        self.last_active_mean = out.active.iter().filter(|&&a| a).count() as f64 / batch as f64;
        out
    }

    fn encode_inner(&mut self, x: &ArrayD<T>, gate_sigma2: &Array1<T>, train: bool) -> BottleneckOutput<T> {
        let a = self.features(x, train);
        let gamma0 = self.gamma0;
        match &mut self.head {
            Head::Static(l) => l.forward_static(a, train),
            Head::Gated { layer, gate } => forward_dynamic(layer, gate, a, gate_sigma2, gamma0, train),
            Head::Plain { dense, bits, output } => {
                let mut z = dense.forward2(a, train).mapv_into(|v| v.tanh());
                if train {
                    *output = Some(z.clone());
                }
                if let Some(b) = *bits {
                    self.clamp_count += quantize(z.as_slice_mut().expect("contiguous"), b);
                }
                let active = Array2::from_elem(z.raw_dim(), true);
                BottleneckOutput { z, active }
            }
        }
    }

    /// Class logits for received features.
    pub fn decode_batch(&mut self, z_hat: Array2<T>, train: bool) -> Array2<T> {
        self.server.forward(z_hat.into_dyn(), train).into_dimensionality::<Ix2>().expect("2-d logits")
    }
}

impl<T: Real> VibModel<T> for Model<T> {
    fn feature_width(&self) -> usize {
        self.width()
    }

    fn encode(&mut self, x: &ArrayD<T>, sigma2: &Array1<T>, train: bool) -> BottleneckOutput<T> {
        self.encode_batch(x, sigma2, train)
    }

    fn decode(&mut self, z_hat: Array2<T>, train: bool) -> Array2<T> {
        self.decode_batch(z_hat, train)
    }

    fn backward_decode(&mut self, d_logits: Array2<T>) -> Array2<T> {
        self.server.backward(d_logits.into_dyn()).into_dimensionality::<Ix2>().expect("2-d feature gradient")
    }

    fn backward_encode(&mut self, d_z: Array2<T>) {
        let da = match &mut self.head {
            Head::Static(l) => l.backward(&d_z).0,
            Head::Gated { layer, gate } => backward_dynamic(layer, gate, &d_z),
            Head::Plain { dense, output, .. } => {
                // the quantizer passes gradients straight through
                let z = output.as_ref().expect("backward without training-mode forward");
                let mut dpre = d_z;
                dpre.zip_mut_with(z, |g, &z| *g = *g * (T::one() - z * z));
                dense.backward2(dpre)
            }
        };
        if !self.backbone.layers.is_empty() {
            let shape = self.backbone_shape.clone().expect("backward without training-mode forward");
            self.backbone.backward(reshape_owned(da.into_dyn(), &shape));
        }
    }

    fn kl(&mut self, out: &BottleneckOutput<T>, sigma2: &Array1<T>, grad_scale: Option<f64>) -> (Array1<T>, Option<Array2<T>>) {
        let batch = out.z.nrows();
        let mut rows = Array1::zeros(batch);
        if !self.variant.is_variational() {
            return (rows, grad_scale.map(|_| Array2::zeros(out.z.raw_dim())));
        }
        let scale = T::of(grad_scale.unwrap_or(0.0));
        let mut dz = Array2::zeros(out.z.raw_dim());
        match &mut self.gaussian {
            None => {
                for ((b, i), &z) in out.z.indexed_iter() {
                    let (v, g) = kl_log_uniform_with_grad(z, sigma2[b], &self.constants);
                    rows[b] += v;
                    dz[[b, i]] = g * scale;
                }
            }
            Some(prior) => {
                for ((b, i), &z) in out.z.indexed_iter() {
                    let k = kl_gaussian(z, sigma2[b], prior.mean.value[[i]], prior.log_var.value[[i]]);
                    rows[b] += k.value;
                    dz[[b, i]] = k.d_z * scale;
                    if grad_scale.is_some() {
                        prior.mean.grad[[i]] += k.d_mean * scale;
                        prior.log_var.grad[[i]] += k.d_log_var * scale;
                    }
                }
            }
        }
        (rows, grad_scale.map(|_| dz))
    }

    fn noisy_channel(&self) -> bool {
        self.variant != Variant::Quantization
    }
}
