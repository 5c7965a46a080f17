//! Minimal layers with explicit forward/backward passes.
//!
//! Layers cache what they need during a training-mode forward pass and
//! accumulate parameter gradients on `backward`. Everything is generic over
//! [`Real`] so the same code runs in `f32` for training and `f64` for
//! gradient checks.

mod conv;
mod dense;
mod optim;

pub use conv::{Conv2d, GlobalAvgPool, ResBlock};
pub use dense::Dense;
pub use optim::{Adam, AdamConfig};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Callback used to walk named parameters in a fixed order.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(rng.random_range(-bound..bound)))
}

/// Serializable description of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Relu,
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    ResBlock { in_channels: usize, out_channels: usize, stride: usize },
    Flatten,
    Reshape { shape: Vec<usize> },
    GlobalAvgPool,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Relu { mask: Option<ArrayD<bool>> },
    Conv(Conv2d<T>),
    ResBlock(Box<ResBlock<T>>),
    Flatten { input_shape: Option<Vec<usize>> },
    Reshape { shape: Vec<usize>, input_shape: Option<Vec<usize>> },
    GlobalAvgPool(GlobalAvgPool),
}

impl<T: Real> Layer<T> {
    pub fn from_spec<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        match spec {
            LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense::new(*inputs, *outputs, rng)),
            LayerSpec::Relu => Layer::Relu { mask: None },
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                Layer::Conv(Conv2d::new(*in_channels, *out_channels, *kernel, *stride, *padding, rng))
            }
            LayerSpec::ResBlock { in_channels, out_channels, stride } => {
                Layer::ResBlock(Box::new(ResBlock::new(*in_channels, *out_channels, *stride, rng)))
            }
            LayerSpec::Flatten => Layer::Flatten { input_shape: None },
            LayerSpec::Reshape { shape } => Layer::Reshape { shape: shape.clone(), input_shape: None },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
        }
    }

    pub fn forward(&mut self, x: ArrayD<T>, train: bool) -> ArrayD<T> {
        match self {
            Layer::Dense(d) => d.forward(x, train),
            Layer::Relu { mask } => {
                if train {
                    *mask = Some(x.mapv(|v| v > T::zero()));
                }
                x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
            }
            Layer::Conv(c) => c.forward(x, train),
            Layer::ResBlock(r) => r.forward(x, train),
            Layer::Flatten { input_shape } => {
                let shape = x.shape().to_vec();
                let batch = shape[0];
                let rest: usize = shape[1..].iter().product();
                if train {
                    *input_shape = Some(shape);
                }
                reshape_owned(x, &[batch, rest])
            }
            Layer::Reshape { shape, input_shape } => {
                let batch = x.shape()[0];
                if train {
                    *input_shape = Some(x.shape().to_vec());
                }
                let mut target = vec![batch];
                target.extend_from_slice(shape);
                reshape_owned(x, &target)
            }
            Layer::GlobalAvgPool(p) => p.forward(x, train),
        }
    }

    pub fn backward(&mut self, grad: ArrayD<T>) -> ArrayD<T> {
        match self {
            Layer::Dense(d) => d.backward(grad),
            Layer::Relu { mask } => {
                let mask = mask.as_ref().expect("backward without training-mode forward");
                let mut g = grad;
                ndarray::Zip::from(&mut g).and(mask).for_each(|g, &m| {
                    if !m {
                        *g = T::zero();
                    }
                });
                g
            }
            Layer::Conv(c) => c.backward(grad),
            Layer::ResBlock(r) => r.backward(grad),
            Layer::Flatten { input_shape } | Layer::Reshape { input_shape, .. } => {
                let shape = input_shape.as_ref().expect("backward without training-mode forward");
                reshape_owned(grad, shape)
            }
            Layer::GlobalAvgPool(p) => p.backward(grad),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Layer::Dense(d) => d.visit_params(prefix, f),
            Layer::Conv(c) => c.visit_params(prefix, f),
            Layer::ResBlock(r) => r.visit_params(prefix, f),
            _ => {}
        }
    }
}

pub(crate) fn reshape_owned<T: Real>(x: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
    x.into_shape_with_order(IxDyn(shape)).expect("element count preserved by reshape")
}

/// A stack of layers applied in order.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Self {
        let layers = specs.iter().map(|s| Layer::from_spec(s, rng)).collect();
        Self { specs, layers }
    }

    pub fn empty() -> Self {
        Self { specs: Vec::new(), layers: Vec::new() }
    }

    pub fn forward(&mut self, mut x: ArrayD<T>, train: bool) -> ArrayD<T> {
        for layer in &mut self.layers {
            x = layer.forward(x, train);
        }
        x
    }

    pub fn backward(&mut self, mut grad: ArrayD<T>) -> ArrayD<T> {
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad);
        }
        grad
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}
