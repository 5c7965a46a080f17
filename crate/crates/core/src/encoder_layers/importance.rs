use ndarray::{s, Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use crate::nn::{fan_in_uniform, Param, ParamVisitor};
use crate::real::Real;

/// Guard on the row norm used for weight normalization.
pub const EPS_NORM: f64 = 1e-8;

/// Weight-normalized fully-connected layer with a per-row importance scale,
/// followed by Tanh:
///
/// `z_i = tanh(gamma_i * <W_i / |W_i|, [a; 1]>)`
///
/// `W` is the augmented `(n, d + 1)` matrix whose last column is the bias.
/// Pruned rows output exactly zero and receive no gradient.
#[derive(Clone, Debug)]
pub struct ImportanceBottleneck<T> {
    pub weight: Param<T>,
    pub gamma: Param<T>,
    pub pruned: Vec<bool>,
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    input: Array2<T>,
    unit_rows: Array2<T>,
    norms: Array1<T>,
    projection: Array2<T>,
    output: Array2<T>,
    active: Array2<bool>,
    gamma: Array2<T>,
    per_example: bool,
}

/// What the bottleneck produced for one batch.
#[derive(Clone, Debug)]
pub struct BottleneckOutput<T> {
    pub z: Array2<T>,
    /// `active[[b, i]]`: dimension `i` was transmitted for example `b`.
    pub active: Array2<bool>,
}

impl<T> BottleneckOutput<T> {
    pub fn active_counts(&self) -> Vec<usize> {
        self.active.outer_iter().map(|r| r.iter().filter(|&&a| a).count()).collect()
    }
}

impl<T: Real> ImportanceBottleneck<T> {
    /// Fan-in initialization of `[W, b]`; each `gamma_i` starts at the row norm
    /// so the layer initially equals the unnormalized one.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = fan_in_uniform::<T, _>(&[outputs, inputs], inputs, rng);
        let b = fan_in_uniform::<T, _>(&[outputs], inputs, rng);
        let mut aug = Array2::<T>::zeros((outputs, inputs + 1));
        aug.slice_mut(s![.., ..inputs]).assign(&w.into_dimensionality::<Ix2>().expect("2-d"));
        aug.column_mut(inputs).assign(&b.into_dimensionality::<Ix1>().expect("1-d"));
        let gamma = aug.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        Self {
            weight: Param::new(aug.into_dyn()),
            gamma: Param::new(gamma.into_dyn()),
            pruned: vec![false; outputs],
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1] - 1
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn weights(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d augmented weight")
    }

    pub fn gamma_values(&self) -> Array1<T> {
        self.gamma.value.clone().into_dimensionality::<Ix1>().expect("1-d gamma")
    }

    pub fn unpruned_count(&self) -> usize {
        self.pruned.iter().filter(|&&p| !p).count()
    }

    /// Normalized rows and their norms; rows whose norm falls below
    /// [`EPS_NORM`] are pruned on the spot.
    fn normalized_rows(&mut self) -> (Array2<T>, Array1<T>) {
        let w = self.weights().to_owned();
        let norms = w.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let mut unit = w;
        for (i, (mut row, &norm)) in unit.outer_iter_mut().zip(norms.iter()).enumerate() {
            if norm.as_f64() < EPS_NORM {
                if !self.pruned[i] {
                    log::warn!("bottleneck row {i} has norm {norm}; pruning it");
                    self.pruned[i] = true;
                }
                row.fill(T::zero());
            } else {
                row.mapv_inplace(|v| v / norm);
            }
        }
        (unit, norms)
    }

    /// `<W_i / |W_i|, [a; 1]>` for every example and row.
    fn project(unit: &Array2<T>, a: &Array2<T>) -> Array2<T> {
        let d = a.ncols();
        let mut u = a.dot(&unit.slice(s![.., ..d]).t());
        u += &unit.column(d);
        u
    }

    /// Static forward with the trained importance vector.
    pub fn forward_static(&mut self, a: Array2<T>, train: bool) -> BottleneckOutput<T> {
        let gamma = self.gamma_values();
        let batch = a.nrows();
        let gamma_rows = gamma.broadcast((batch, gamma.len())).expect("broadcast gamma").to_owned();
        let active = Array2::from_shape_fn((batch, self.outputs()), |(_, i)| !self.pruned[i]);
        self.forward_with(a, gamma_rows, active, false, train)
    }

    /// Forward with a per-example importance matrix (`(batch, n)`); a dimension
    /// is deactivated for an example when its importance is `<= gamma0`.
    pub fn forward_gated(&mut self, a: Array2<T>, gamma: Array2<T>, gamma0: T, train: bool) -> BottleneckOutput<T> {
        let active = Array2::from_shape_fn(gamma.raw_dim(), |(b, i)| !self.pruned[i] && gamma[[b, i]] > gamma0);
        self.forward_with(a, gamma, active, true, train)
    }

    fn forward_with(
        &mut self,
        a: Array2<T>,
        gamma: Array2<T>,
        active: Array2<bool>,
        per_example: bool,
        train: bool,
    ) -> BottleneckOutput<T> {
        assert_eq!(a.ncols(), self.inputs(), "bottleneck input width mismatch");
        let (unit, norms) = self.normalized_rows();
        // Degenerate rows may have been pruned just now.
        let mut active = active;
        for (i, &p) in self.pruned.iter().enumerate() {
            if p {
                active.column_mut(i).fill(false);
            }
        }
        let projection = Self::project(&unit, &a);
        let mut z = &projection * &gamma;
        ndarray::Zip::from(&mut z).and(&active).for_each(|z, &on| {
            *z = if on { z.tanh() } else { T::zero() };
        });
        if train {
            self.cache = Some(Cache {
                input: a,
                unit_rows: unit,
                norms,
                projection,
                output: z.clone(),
                active: active.clone(),
                gamma,
                per_example,
            });
        }
        BottleneckOutput { z, active }
    }

    /// Backpropagates `dz`. Returns the input gradient and, for gated
    /// forwards, the per-example gradient w.r.t. the importance matrix.
    /// Static forwards accumulate into `gamma.grad` instead.
    pub fn backward(&mut self, dz: &Array2<T>) -> (Array2<T>, Option<Array2<T>>) {
        let cache = self.cache.as_ref().expect("backward without training-mode forward");
        let d = cache.input.ncols();
        let one = T::one();
        // d pre-activation, zero for inactive dims
        let mut dpre = dz.clone();
        ndarray::Zip::from(&mut dpre).and(&cache.output).and(&cache.active).for_each(|g, &z, &on| {
            *g = if on { *g * (one - z * z) } else { T::zero() };
        });
        let dgamma = &dpre * &cache.projection;
        let du = &dpre * &cache.gamma;

        let mut dunit = Array2::<T>::zeros(cache.unit_rows.raw_dim());
        dunit.slice_mut(s![.., ..d]).assign(&du.t().dot(&cache.input));
        dunit.column_mut(d).assign(&du.sum_axis(Axis(0)));
        let da = du.dot(&cache.unit_rows.slice(s![.., ..d]));

        // Through w / |w|: (g - u (u . g)) / |w|
        let mut dw = dunit;
        for ((mut g, u), &norm) in dw.outer_iter_mut().zip(cache.unit_rows.outer_iter()).zip(cache.norms.iter()) {
            if norm.as_f64() < EPS_NORM {
                g.fill(T::zero());
                continue;
            }
            let along = u.dot(&g);
            g.zip_mut_with(&u, |gi, &ui| *gi = (*gi - ui * along) / norm);
        }
        self.weight.grad += &dw.into_dyn();

        if cache.per_example {
            (da, Some(dgamma))
        } else {
            self.gamma.grad += &dgamma.sum_axis(Axis(0)).into_dyn();
            (da, None)
        }
    }

    /// Permanently prunes every unpruned dimension with `gamma_i <= gamma0`;
    /// returns how many were newly pruned. Never un-prunes.
    pub fn prune_static(&mut self, gamma0: T) -> usize {
        let gamma = self.gamma_values();
        let mut newly = 0;
        for (i, &g) in gamma.iter().enumerate() {
            if !self.pruned[i] && g <= gamma0 {
                self.pruned[i] = true;
                newly += 1;
            }
        }
        newly
    }

    /// Keeps the importance scales non-negative after an optimizer step.
    pub fn clamp_gamma(&mut self) {
        self.gamma.value.mapv_inplace(|g| g.max(T::zero()));
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.gamma"), &mut self.gamma);
    }

    /// Zeroes the gradients of pruned rows (they are frozen).
    pub fn mask_pruned_grads(&mut self) {
        for (i, &p) in self.pruned.iter().enumerate() {
            if p {
                self.weight.grad.index_axis_mut(Axis(0), i).fill(T::zero());
                self.gamma.grad[[i]] = T::zero();
            }
        }
    }
}
