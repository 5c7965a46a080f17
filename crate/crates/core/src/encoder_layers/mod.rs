//! Bottleneck layers that decide which feature dimensions get transmitted.

mod gate;
mod importance;

pub use gate::{tail_sums, MonotoneGate, DEFAULT_GATE_HIDDEN, DEFAULT_GATE_LAYERS, DEFAULT_TARGET_G};
pub use importance::{BottleneckOutput, ImportanceBottleneck, EPS_NORM};

use ndarray::{Array1, Array2};

use crate::real::Real;

/// Channel-adaptive forward pass: the gate maps each example's noise variance
/// to an importance vector and dimensions at or below `gamma0` are zeroed for
/// this pass only. Active dimensions always form a prefix `0..k`.
pub fn forward_dynamic<T: Real>(
    layer: &mut ImportanceBottleneck<T>,
    gate: &mut MonotoneGate<T>,
    a: Array2<T>,
    sigma2: &Array1<T>,
    gamma0: T,
    train: bool,
) -> BottleneckOutput<T> {
    assert_eq!(a.nrows(), sigma2.len(), "one noise variance per example");
    let gamma = gate.forward(sigma2, train);
    layer.forward_gated(a, gamma, gamma0, train)
}

/// Backward counterpart of [`forward_dynamic`]; returns the input gradient.
pub fn backward_dynamic<T: Real>(
    layer: &mut ImportanceBottleneck<T>,
    gate: &mut MonotoneGate<T>,
    dz: &Array2<T>,
) -> Array2<T> {
    let (da, dgamma) = layer.backward(dz);
    gate.backward(&dgamma.expect("gated forward yields importance gradients"));
    da
}

/// Number of leading active dimensions, or `None` when the active set is not
/// a prefix.
pub fn prefix_length(active: &[bool]) -> Option<usize> {
    let k = active.iter().take_while(|&&a| a).count();
    if active[k..].iter().any(|&a| a) {
        None
    } else {
        Some(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::rel_err;
    use ndarray::{arr1, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, batch: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((batch, d), || rng.random_range(-1.0..1.0))
    }

    fn random_gate(rng: &mut ChaCha8Rng, n: usize) -> MonotoneGate<f64> {
        let mut gate = MonotoneGate::<f64>::with_defaults(n, rng);
        for p in &mut gate.layers {
            p.value.mapv_inplace(|_| rng.random_range(-3.0..3.0));
        }
        gate
    }

    #[test]
    fn zero_importance_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = ImportanceBottleneck::<f64>::new(4, 6, &mut rng);
        layer.gamma.value[[2]] = 0.0;
        let out = layer.forward_static(random_input(&mut rng, 5, 4), false);
        assert!(out.z.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_stay_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = ImportanceBottleneck::<f64>::new(4, 6, &mut rng);
        layer.gamma.value.fill(50.0);
        let out = layer.forward_static(random_input(&mut rng, 64, 4) * 10.0, false);
        assert!(out.z.iter().all(|v| v.abs() <= 1.0));
        layer.gamma.value.fill(0.7);
        let out = layer.forward_static(random_input(&mut rng, 64, 4), false);
        assert!(out.z.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn row_scaling_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = ImportanceBottleneck::<f64>::new(4, 6, &mut rng);
        let x = random_input(&mut rng, 8, 4);
        let before = layer.forward_static(x.clone(), false).z;
        for (i, c) in [0.01, 0.5, 3.0, 1e3, 7.0, 1e-3].iter().enumerate() {
            layer.weight.value.index_axis_mut(Axis(0), i).mapv_inplace(|w| w * c);
        }
        let after = layer.forward_static(x, false).z;
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn initial_layer_equals_unnormalized_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = ImportanceBottleneck::<f64>::new(3, 5, &mut rng);
        let x = random_input(&mut rng, 4, 3);
        let z = layer.forward_static(x.clone(), false).z;
        let w = layer.weights().to_owned();
        for b in 0..4 {
            for i in 0..5 {
                let pre: f64 = (0..3).map(|k| w[[i, k]] * x[[b, k]]).sum::<f64>() + w[[i, 3]];
                assert!((z[[b, i]] - pre.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prune_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = ImportanceBottleneck::<f64>::new(2, 3, &mut rng);
        layer.gamma.value = arr1(&[0.2, 0.04, 0.9]).into_dyn();
        assert_eq!(layer.prune_static(0.05), 1);
        assert_eq!(layer.pruned, vec![false, true, false]);
        assert_eq!(layer.prune_static(0.05), 0);

        layer.gamma.value = arr1(&[0.05, 1.0, 1.0]).into_dyn();
        assert_eq!(layer.prune_static(0.05), 1);
        // raising gamma again never revives a pruned row
        layer.gamma.value = arr1(&[9.0, 9.0, 9.0]).into_dyn();
        assert_eq!(layer.prune_static(0.05), 0);
        assert_eq!(layer.pruned, vec![true, true, false]);

        let out = layer.forward_static(random_input(&mut rng, 3, 2), false);
        assert!(out.z.column(0).iter().chain(out.z.column(1).iter()).all(|&v| v == 0.0));
        assert_eq!(out.active_counts(), vec![1, 1, 1]);
    }

    #[test]
    fn degenerate_row_is_pruned() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = ImportanceBottleneck::<f64>::new(3, 4, &mut rng);
        layer.weight.value.index_axis_mut(Axis(0), 1).fill(0.0);
        let out = layer.forward_static(random_input(&mut rng, 2, 3), false);
        assert!(layer.pruned[1]);
        assert!(out.z.column(1).iter().all(|&v| v == 0.0));
    }

    /// Central-difference check of `sum(w * z)` for the static layer.
    #[test]
    fn static_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = ImportanceBottleneck::<f64>::new(4, 6, &mut rng);
        layer.pruned[4] = true;
        let x = random_input(&mut rng, 5, 4);
        let w = random_input(&mut rng, 5, 6);
        layer.forward_static(x.clone(), true);
        let (dx, none) = layer.backward(&w);
        assert!(none.is_none());
        let f = |layer: &mut ImportanceBottleneck<f64>, x: &Array2<f64>| (layer.forward_static(x.clone(), false).z * &w).sum();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..layer.weight.value.len() {
            let an = layer.weight.grad.as_slice().unwrap()[k];
            layer.weight.value.as_slice_mut().unwrap()[k] += h;
            let up = f(&mut layer, &x);
            layer.weight.value.as_slice_mut().unwrap()[k] -= 2.0 * h;
            let down = f(&mut layer, &x);
            layer.weight.value.as_slice_mut().unwrap()[k] += h;
            worst = worst.max(rel_err(an, (up - down) / (2.0 * h)));
        }
        for k in 0..6 {
            let an = layer.gamma.grad[[k]];
            layer.gamma.value[[k]] += h;
            let up = f(&mut layer, &x);
            layer.gamma.value[[k]] -= 2.0 * h;
            let down = f(&mut layer, &x);
            layer.gamma.value[[k]] += h;
            worst = worst.max(rel_err(an, (up - down) / (2.0 * h)));
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[k] += h;
            let up = f(&mut layer, &xp);
            xp.as_slice_mut().unwrap()[k] -= 2.0 * h;
            let down = f(&mut layer, &xp);
            worst = worst.max(rel_err(dx.as_slice().unwrap()[k], (up - down) / (2.0 * h)));
        }
        assert!(worst < 1e-3, "relative error {worst}");
        assert!(layer.weight.grad.index_axis(Axis(0), 4).iter().all(|&g| g == 0.0));
        assert_eq!(layer.gamma.grad[[4]], 0.0);
    }

    #[test]
    fn dynamic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = ImportanceBottleneck::<f64>::new(4, 6, &mut rng);
        let mut gate = MonotoneGate::<f64>::new(6, 5, 3, 0.2, &mut rng);
        let x = random_input(&mut rng, 5, 4);
        let sigma2 = Array1::from_shape_fn(5, |_| rng.random_range(3e-3..0.1));
        // threshold between the extremes so some dims are off
        let gamma = gate.forward(&sigma2, false);
        let gamma0 = 0.5 * (gamma[[0, 5]] + gamma[[0, 0]]);
        let w = random_input(&mut rng, 5, 6);

        let out = forward_dynamic(&mut layer, &mut gate, x.clone(), &sigma2, gamma0, true);
        assert!(out.active.iter().any(|&a| !a), "test needs deactivated dims");
        let dx = backward_dynamic(&mut layer, &mut gate, &w);

        let f = |layer: &mut ImportanceBottleneck<f64>, gate: &mut MonotoneGate<f64>, x: &Array2<f64>| {
            (forward_dynamic(layer, gate, x.clone(), &sigma2, gamma0, false).z * &w).sum()
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..layer.weight.value.len() {
            let an = layer.weight.grad.as_slice().unwrap()[k];
            layer.weight.value.as_slice_mut().unwrap()[k] += h;
            let up = f(&mut layer, &mut gate, &x);
            layer.weight.value.as_slice_mut().unwrap()[k] -= 2.0 * h;
            let down = f(&mut layer, &mut gate, &x);
            layer.weight.value.as_slice_mut().unwrap()[k] += h;
            worst = worst.max(rel_err(an, (up - down) / (2.0 * h)));
        }
        for l in 0..gate.layers.len() {
            for k in 0..gate.layers[l].value.len() {
                let an = gate.layers[l].grad.as_slice().unwrap()[k];
                gate.layers[l].value.as_slice_mut().unwrap()[k] += h;
                let up = f(&mut layer, &mut gate, &x);
                gate.layers[l].value.as_slice_mut().unwrap()[k] -= 2.0 * h;
                let down = f(&mut layer, &mut gate, &x);
                gate.layers[l].value.as_slice_mut().unwrap()[k] += h;
                worst = worst.max(rel_err(an, (up - down) / (2.0 * h)));
            }
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[k] += h;
            let up = f(&mut layer, &mut gate, &xp);
            xp.as_slice_mut().unwrap()[k] -= 2.0 * h;
            let down = f(&mut layer, &mut gate, &xp);
            worst = worst.max(rel_err(dx.as_slice().unwrap()[k], (up - down) / (2.0 * h)));
        }
        assert!(worst < 1e-3, "relative error {worst}");

        // rows that are off for every example get no weight gradient
        for i in 0..6 {
            if out.active.column(i).iter().all(|&a| !a) {
                assert!(layer.weight.grad.index_axis(Axis(0), i).iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn zero_gate_gives_zero_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gate = MonotoneGate::<f64>::with_defaults(8, &mut rng);
        for p in &mut gate.layers {
            p.value.fill(0.0);
        }
        assert!(gate.gate_values(0.05).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn default_gate_starts_near_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gate = MonotoneGate::<f64>::with_defaults(64, &mut rng);
        let g = gate.g_values(&arr1(&[0.03]));
        for &v in g.iter() {
            assert!((v - DEFAULT_TARGET_G).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn gate_invariants_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid: Vec<f64> = (0..25).map(|k| 3e-3 * (0.1f64 / 3e-3).powf(k as f64 / 24.0)).collect();
        let sigma2 = Array1::from_vec(grid.clone());
        let mut violations = 0usize;
        for _ in 0..1000 {
            let gate = random_gate(&mut rng, 12);
            let g = gate.g_values(&sigma2);
            let gamma = tail_sums(&g);
            violations += g.iter().filter(|&&v| v < 0.0).count();
            for s in 1..grid.len() {
                for i in 0..12 {
                    if gamma[[s, i]] < gamma[[s - 1, i]] {
                        violations += 1;
                    }
                }
            }
            for s in 0..grid.len() {
                for i in 1..12 {
                    if gamma[[s, i]] > gamma[[s, i - 1]] {
                        violations += 1;
                    }
                }
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn activation_is_a_prefix_and_grows_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mut layer = ImportanceBottleneck::<f64>::new(3, 10, &mut rng);
            let mut gate = random_gate(&mut rng, 10);
            let sigma2 = arr1(&[3e-3, 0.01, 0.03, 0.1]);
            let x = random_input(&mut rng, 4, 3);
            for gamma0 in [0.0, 0.05, 0.3, 1.0, 3.0] {
                let out = forward_dynamic(&mut layer, &mut gate, x.clone(), &sigma2, gamma0, false);
                let mut prev = 0;
                for row in out.active.outer_iter() {
                    let k = prefix_length(row.as_slice().unwrap()).expect("prefix activation");
                    assert!(k >= prev);
                    prev = k;
                }
            }
        }
    }

    #[test]
    fn everything_off_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut layer = ImportanceBottleneck::<f64>::new(3, 5, &mut rng);
        let mut gate = MonotoneGate::<f64>::with_defaults(5, &mut rng);
        let out = forward_dynamic(&mut layer, &mut gate, random_input(&mut rng, 2, 3), &arr1(&[0.01, 0.1]), 1e6, false);
        assert!(out.z.iter().all(|&v| v == 0.0));
        assert_eq!(out.active_counts(), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn prefix_length_agrees_with_definition(k in 0usize..10, n in 10usize..14) {
            let v: Vec<bool> = (0..n).map(|i| i < k).collect();
            prop_assert_eq!(prefix_length(&v), Some(k));
        }

        #[test]
        fn pruning_is_monotone(gammas in proptest::collection::vec(proptest::collection::vec(0.0f64..0.2, 6), 1..8)) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut layer = ImportanceBottleneck::<f64>::new(2, 6, &mut rng);
            let mut before = layer.pruned.clone();
            for g in gammas {
                layer.gamma.value = Array1::from_vec(g).into_dyn();
                layer.prune_static(0.05);
                for (b, a) in before.iter().zip(layer.pruned.iter()) {
                    prop_assert!(!b || *a);
                }
                before = layer.pruned.clone();
            }
        }
    }
}
