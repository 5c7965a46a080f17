use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;

use super::{fan_in_uniform, Param, ParamVisitor};
use crate::real::Real;

/// Fully-connected layer `y = x W + b` with `W` stored as `(inputs, outputs)`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(fan_in_uniform(&[inputs, outputs], inputs, rng)),
            bias: Param::new(fan_in_uniform(&[outputs], inputs, rng)),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("dense weight is 2-d")
    }

    fn b(&self) -> ndarray::ArrayView1<'_, T> {
        self.bias.value.view().into_dimensionality::<Ix1>().expect("dense bias is 1-d")
    }

    pub fn forward2(&mut self, x: Array2<T>, train: bool) -> Array2<T> {
        let mut y = x.dot(&self.w());
        y += &self.b();
        if train {
            self.input = Some(x);
        }
        y
    }

    pub fn backward2(&mut self, grad: Array2<T>) -> Array2<T> {
        let x = self.input.as_ref().expect("backward without training-mode forward");
        let dw = x.t().dot(&grad);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad.sum_axis(Axis(0)).into_dyn();
        grad.dot(&self.w().t())
    }

    pub fn forward(&mut self, x: ArrayD<T>, train: bool) -> ArrayD<T> {
        let x = x.into_dimensionality::<Ix2>().expect("dense input must be (batch, features)");
        self.forward2(x, train).into_dyn()
    }

    pub fn backward(&mut self, grad: ArrayD<T>) -> ArrayD<T> {
        let grad = grad.into_dimensionality::<Ix2>().expect("dense gradient must be 2-d");
        self.backward2(grad).into_dyn()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}
