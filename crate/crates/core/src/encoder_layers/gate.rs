use ndarray::{Array1, Array2, Axis, Ix2};
use rand::Rng;

use crate::nn::{Param, ParamVisitor};
use crate::real::Real;

pub const DEFAULT_GATE_LAYERS: usize = 3;
pub const DEFAULT_GATE_HIDDEN: usize = 16;

/// Channel-conditioned importance generator.
///
/// A bias-free perceptron `g = h_K o ... o h_1(sigma2)` with
/// `h_k(x) = tanh(|W_k| x)`. Non-negative effective weights and a
/// non-negative input make every `g_j >= 0` and nondecreasing in `sigma2`.
/// Importances are tail sums `gamma_i = sum_{j >= i} g_j`, so they are
/// nonincreasing in `i` and the dimensions above any threshold form a prefix.
#[derive(Clone, Debug)]
pub struct MonotoneGate<T> {
    /// Raw parameters, shaped `(outputs, inputs)` per layer.
    pub layers: Vec<Param<T>>,
    cache: Option<Vec<Array2<T>>>,
}

/// Initial scale of the gate outputs. With `n` outputs the first importance
/// starts near `n * target_g`.
pub const DEFAULT_TARGET_G: f64 = 0.02;

impl<T: Real> MonotoneGate<T> {
    /// `layers` weight matrices with `hidden` units between them.
    ///
    /// The first layer gets log-spread magnitudes in `[10, 300]` so its units
    /// switch on across the `sigma2` operating range (~3e-3 to 0.1); the last
    /// layer is scaled so each `g_j` starts near `target_g` at `sigma2 = 0.03`.
    pub fn new<R: Rng + ?Sized>(outputs: usize, hidden: usize, layers: usize, target_g: f64, rng: &mut R) -> Self {
        assert!(layers >= 1, "gate needs at least one layer");
        let mut params = Vec::with_capacity(layers);
        for k in 0..layers {
            let inputs = if k == 0 { 1 } else { hidden };
            let outs = if k + 1 == layers { outputs } else { hidden };
            let w = if k == 0 {
                Array2::from_shape_simple_fn((outs, inputs), || T::of(10f64.powf(rng.random_range(1.0..2.5))))
            } else {
                let bound = 2.0 / inputs as f64;
                Array2::from_shape_simple_fn((outs, inputs), || T::of(rng.random_range(0.1 * bound..bound)))
            };
            params.push(Param::new(w.into_dyn()));
        }
        let mut gate = Self { layers: params, cache: None };
        if layers > 1 {
            // Rescale the output layer against the penultimate activations.
            let probe = Array1::from_elem(1, T::of(0.03));
            let acts = gate.activations(&probe);
            let penultimate = acts[acts.len() - 2].row(0).to_owned();
            let last = gate.layers.last_mut().expect("non-empty");
            let target = T::of(target_g.atanh());
            for mut row in last.value.outer_iter_mut() {
                let pre = row.iter().zip(penultimate.iter()).fold(T::zero(), |acc, (&w, &h)| acc + w * h);
                let scale = target / pre.max(T::of(1e-12));
                row.mapv_inplace(|w| w * scale);
            }
        }
        gate
    }

    pub fn with_defaults<R: Rng + ?Sized>(outputs: usize, rng: &mut R) -> Self {
        Self::new(outputs, DEFAULT_GATE_HIDDEN, DEFAULT_GATE_LAYERS, DEFAULT_TARGET_G, rng)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|p| p.value.shape()[0]).unwrap_or(0)
    }

    fn effective(&self, k: usize) -> Array2<T> {
        self.layers[k].value.view().into_dimensionality::<Ix2>().expect("2-d gate weight").mapv(|w| w.abs())
    }

    /// All layer activations, starting with the `(batch, 1)` input column.
    fn activations(&self, sigma2: &Array1<T>) -> Vec<Array2<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut h = sigma2.clone().insert_axis(Axis(1));
        acts.push(h.clone());
        for k in 0..self.layers.len() {
            h = h.dot(&self.effective(k).t()).mapv_into(|v| v.tanh());
            acts.push(h.clone());
        }
        acts
    }

    /// Raw outputs `g(sigma2)`, shape `(batch, n)`.
    pub fn g_values(&self, sigma2: &Array1<T>) -> Array2<T> {
        self.activations(sigma2).pop().expect("at least one layer")
    }

    /// `gamma(sigma2)` for a batch of noise variances, shape `(batch, n)`.
    pub fn forward(&mut self, sigma2: &Array1<T>, train: bool) -> Array2<T> {
        let acts = self.activations(sigma2);
        let gamma = tail_sums(acts.last().expect("output layer"));
        if train {
            self.cache = Some(acts);
        }
        gamma
    }

    /// `gamma(sigma2)` for a single noise variance.
    pub fn gate_values(&self, sigma2: T) -> Array1<T> {
        let g = self.g_values(&Array1::from_elem(1, sigma2));
        tail_sums(&g).index_axis_move(Axis(0), 0)
    }

    /// Backpropagates `d gamma` (`(batch, n)`) into the raw parameters.
    pub fn backward(&mut self, dgamma: &Array2<T>) {
        let acts = self.cache.take().expect("backward without training-mode forward");
        // gamma_i = sum_{j>=i} g_j  =>  dg_j = sum_{i<=j} dgamma_i
        let mut dh = dgamma.clone();
        dh.accumulate_axis_inplace(Axis(1), |&prev, cur| *cur += prev);
        let one = T::one();
        for k in (0..self.layers.len()).rev() {
            let out = &acts[k + 1];
            let input = &acts[k];
            let mut dpre = dh;
            dpre.zip_mut_with(out, |g, &h| *g = *g * (one - h * h));
            let d_eff = dpre.t().dot(input);
            let raw = self.layers[k].value.view().into_dimensionality::<Ix2>().expect("2-d").to_owned();
            let d_raw = ndarray::Zip::from(&d_eff).and(&raw).map_collect(|&g, &w| g * w.signum());
            self.layers[k].grad += &d_raw.into_dyn();
            dh = dpre.dot(&self.effective(k));
        }
        self.cache = Some(acts);
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (k, p) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.{k}.weight"), p);
        }
    }
}

/// `out[b, i] = sum_{j >= i} g[b, j]`
pub fn tail_sums<T: Real>(g: &Array2<T>) -> Array2<T> {
    let mut out = g.clone();
    let n = out.ncols();
    for mut row in out.outer_iter_mut() {
        for i in (0..n.saturating_sub(1)).rev() {
            let next = row[i + 1];
            row[i] += next;
        }
    }
    out
}
