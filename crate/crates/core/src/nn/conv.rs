use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};
use rand::Rng;

use super::{fan_in_uniform, Param, ParamVisitor};
use crate::real::Real;

/// 2-d convolution over `(batch, channels, height, width)` tensors.
///
/// Lowered to a matrix product per sample (im2col); only the input is cached
/// so memory stays proportional to the activations.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    input: Option<Array4<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(fan_in_uniform(&[out_channels, fan_in], fan_in, rng)),
            bias: Param::new(fan_in_uniform(&[out_channels], fan_in, rng)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &ndarray::ArrayView3<'_, T>, ho: usize, wo: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::<T>::zeros((ho * wo, c * k * k));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut row = cols.row_mut(oy * wo + ox);
                let row = row.as_slice_mut().expect("fresh array is contiguous");
                let mut idx = 0;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[idx] = x[[ci, iy as usize, ix as usize]];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &Array2<T>, out: &mut ndarray::ArrayViewMut3<'_, T>, wo: usize) {
        let (c, h, w) = out.dim();
        let k = self.kernel;
        for (p, row) in cols.outer_iter().enumerate() {
            let oy = p / wo;
            let ox = p % wo;
            let mut idx = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            out[[ci, iy as usize, ix as usize]] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }

    pub fn forward4(&mut self, x: Array4<T>, train: bool) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_hw(h, w);
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d conv weight");
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d conv bias");
        let mut out = Array4::<T>::zeros((b, self.out_channels, ho, wo));
        for (sample, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let cols = self.im2col(&sample, ho, wo);
            // (out_c, fan_in) x (fan_in, positions)
            let y = weight.dot(&cols.t());
            for (oc, (mut plane, yrow)) in dst.outer_iter_mut().zip(y.outer_iter()).enumerate() {
                let bo = bias[oc];
                for (d, &v) in plane.iter_mut().zip(yrow.iter()) {
                    *d = v + bo;
                }
            }
        }
        if train {
            self.input = Some(x);
        }
        out
    }

    pub fn backward4(&mut self, grad: Array4<T>) -> Array4<T> {
        let x = self.input.as_ref().expect("backward without training-mode forward");
        let (_, _, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d conv weight").to_owned();
        let mut dx = Array4::<T>::zeros(x.raw_dim());
        let mut dw = Array2::<T>::zeros(weight.raw_dim());
        let mut db = ndarray::Array1::<T>::zeros(self.out_channels);
        for ((sample, g), mut dxs) in x.outer_iter().zip(grad.outer_iter()).zip(dx.outer_iter_mut()) {
            let cols = self.im2col(&sample, ho, wo);
            let g2 = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((self.out_channels, ho * wo))
                .expect("gradient matches output shape");
            dw += &g2.dot(&cols);
            db += &g2.sum_axis(Axis(1));
            let dcols = g2.t().dot(&weight);
            self.col2im_add(&dcols, &mut dxs, wo);
        }
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        dx
    }

    pub fn forward(&mut self, x: ArrayD<T>, train: bool) -> ArrayD<T> {
        let x = x.into_dimensionality::<Ix4>().expect("conv input must be (batch, c, h, w)");
        self.forward4(x, train).into_dyn()
    }

    pub fn backward(&mut self, grad: ArrayD<T>) -> ArrayD<T> {
        let g = grad.into_dimensionality::<Ix4>().expect("conv gradient must be 4-d");
        self.backward4(g).into_dyn()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Residual building block: two 3x3 convolutions with a ReLU between them,
/// an identity or 1x1 projection shortcut, and a ReLU after the sum.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
    mid_mask: Option<Array4<bool>>,
    out_mask: Option<Array4<bool>>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_channels, out_channels, 3, stride, 1, rng);
        let conv2 = Conv2d::new(out_channels, out_channels, 3, 1, 1, rng);
        let shortcut = (in_channels != out_channels || stride != 1)
            .then(|| Conv2d::new(in_channels, out_channels, 1, stride, 0, rng));
        Self { conv1, conv2, shortcut, mid_mask: None, out_mask: None }
    }

    pub fn forward(&mut self, x: ArrayD<T>, train: bool) -> ArrayD<T> {
        let x = x.into_dimensionality::<Ix4>().expect("residual input must be 4-d");
        let a = self.conv1.forward4(x.clone(), train);
        if train {
            self.mid_mask = Some(a.mapv(|v| v > T::zero()));
        }
        let a = a.mapv_into(|v| v.max(T::zero()));
        let mut out = self.conv2.forward4(a, train);
        match &mut self.shortcut {
            Some(proj) => out += &proj.forward4(x, train),
            None => out += &x,
        }
        if train {
            self.out_mask = Some(out.mapv(|v| v > T::zero()));
        }
        out.mapv_into(|v| v.max(T::zero())).into_dyn()
    }

    pub fn backward(&mut self, grad: ArrayD<T>) -> ArrayD<T> {
        let mut g = grad.into_dimensionality::<Ix4>().expect("residual gradient must be 4-d");
        let out_mask = self.out_mask.as_ref().expect("backward without training-mode forward");
        ndarray::Zip::from(&mut g).and(out_mask).for_each(|g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        let mut ga = self.conv2.backward4(g.clone());
        let mid_mask = self.mid_mask.as_ref().expect("backward without training-mode forward");
        ndarray::Zip::from(&mut ga).and(mid_mask).for_each(|g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        let mut dx = self.conv1.backward4(ga);
        match &mut self.shortcut {
            Some(proj) => dx += &proj.backward4(g),
            None => dx += &g,
        }
        dx.into_dyn()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        if let Some(proj) = &mut self.shortcut {
            proj.visit_params(&format!("{prefix}.shortcut"), f);
        }
    }
}

/// Mean over the spatial axes: `(b, c, h, w) -> (b, c)`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward<T: Real>(&mut self, x: ArrayD<T>, train: bool) -> ArrayD<T> {
        let x = x.into_dimensionality::<Ix4>().expect("pool input must be 4-d");
        let (b, c, h, w) = x.dim();
        if train {
            self.hw = Some((h, w));
        }
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, c, h * w))
            .expect("contiguous reshape");
        (flat.sum_axis(Axis(2)) / T::of((h * w) as f64)).into_dyn()
    }

    pub fn backward<T: Real>(&mut self, grad: ArrayD<T>) -> ArrayD<T> {
        let (h, w) = self.hw.expect("backward without training-mode forward");
        let g = grad.into_dimensionality::<Ix2>().expect("pool gradient must be 2-d");
        let (b, c) = g.dim();
        let scale = T::one() / T::of((h * w) as f64);
        let mut out = Array4::<T>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                out.slice_mut(s![bi, ci, .., ..]).fill(g[[bi, ci]] * scale);
            }
        }
        out.into_dyn()
    }
}
