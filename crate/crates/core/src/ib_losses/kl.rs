//! Per-dimension KL terms between the channel posterior `N(z_i, sigma^2)` and
//! the variational marginal.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Fitted constants of the sigmoid approximation to the log-uniform KL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for KlConstants {
    fn default() -> Self {
        Self { k1: 0.63576, k2: 1.87320, k3: 1.48695 }
    }
}

#[inline]
fn sigmoid<T: Real>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// Approximate `KL(N(z, sigma2) || log-uniform)` in nats, additive constant
/// dropped. With `alpha = sigma2 / z^2`:
///
/// `-(k1 * S(k2 + k3 ln alpha) - 0.5 ln(1 + 1/alpha))`
///
/// At `z = 0` (alpha -> inf) this is the limit `-k1`, which is also the minimum.
#[inline]
pub fn kl_log_uniform<T: Real>(z: T, sigma2: T, c: &KlConstants) -> T {
    kl_log_uniform_with_grad(z, sigma2, c).0
}

/// Returns the KL value and its derivative with respect to `z`.
#[inline]
pub fn kl_log_uniform_with_grad<T: Real>(z: T, sigma2: T, c: &KlConstants) -> (T, T) {
    let k1 = T::of(c.k1);
    if z == T::zero() {
        return (-k1, T::zero());
    }
    let k2 = T::of(c.k2);
    let k3 = T::of(c.k3);
    let half = T::of(0.5);
    // t = 1/alpha = z^2 / sigma2
    let t = z * z / sigma2;
    let u = k2 - k3 * t.ln();
    let s = sigmoid(u);
    let one_minus_s = sigmoid(-u);
    let value = -k1 * s + half * t.ln_1p();
    // d/dz = (k1 k3 S(1-S)/t + 0.5/(1+t)) * 2z/sigma2, with 2z/(sigma2 t) = 2/z
    let two = T::of(2.0);
    let grad = two * k1 * k3 * s * one_minus_s / z + z / (sigma2 * (T::one() + t));
    (value, grad)
}

/// Gradients of the diagonal-Gaussian prior KL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKlGrad<T> {
    pub value: T,
    pub d_z: T,
    pub d_mean: T,
    pub d_log_var: T,
}

/// `KL(N(z, sigma2) || N(mean, exp(log_var)))` in nats (closed form).
#[inline]
pub fn kl_gaussian<T: Real>(z: T, sigma2: T, mean: T, log_var: T) -> GaussianKlGrad<T> {
    let half = T::of(0.5);
    let prior_var = log_var.exp();
    let diff = z - mean;
    let ratio = (sigma2 + diff * diff) / prior_var;
    GaussianKlGrad {
        value: half * (log_var - sigma2.ln()) + half * ratio - half,
        d_z: diff / prior_var,
        d_mean: -diff / prior_var,
        d_log_var: half - half * ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: KlConstants = KlConstants { k1: 0.63576, k2: 1.87320, k3: 1.48695 };

    /// Direct transcription in terms of alpha, used as an independent route.
    fn kl_via_alpha(z: f64, s2: f64) -> f64 {
        let alpha = s2 / (z * z);
        let s = 1.0 / (1.0 + (-(C.k2 + C.k3 * alpha.ln())).exp());
        -(C.k1 * s - 0.5 * (1.0 + 1.0 / alpha).ln())
    }

    #[test]
    fn limit_at_zero_is_minus_k1() {
        assert_eq!(kl_log_uniform(0.0f64, 0.01, &C), -0.63576);
        assert_eq!(kl_log_uniform(0.0f32, 0.5, &C), -0.63576f32);
        // Approaching zero converges to the limit.
        assert!((kl_log_uniform(1e-9f64, 0.01, &C) + 0.63576).abs() < 1e-9);
    }

    #[test]
    fn alpha_equal_one() {
        let v = kl_log_uniform(0.1f64, 0.01, &C);
        let s = 1.0 / (1.0 + (-1.8732f64).exp());
        let expected = -(0.63576 * s - 0.5 * 2f64.ln());
        assert!((v - expected).abs() < 1e-12);
        assert!((v + 0.2045).abs() < 5e-4, "{v}");
    }

    #[test]
    fn matches_alpha_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-1.0..1.0);
            let s2: f64 = rng.random_range(1e-3..0.2);
            if z.abs() < 1e-6 {
                continue;
            }
            assert!((kl_log_uniform(z, s2, &C) - kl_via_alpha(z, s2)).abs() < 1e-12);
        }
    }

    #[test]
    fn even_and_increasing_in_magnitude() {
        for &s2 in &[3e-3, 0.01, 0.1] {
            let mut prev = kl_log_uniform(0.0f64, s2, &C);
            for k in 1..=400 {
                let z = k as f64 / 400.0;
                let v = kl_log_uniform(z, s2, &C);
                assert!(v > prev, "not increasing at z={z}, s2={s2}");
                assert_eq!(v, kl_log_uniform(-z, s2, &C));
                prev = v;
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut z: f64 = rng.random_range(-1.0..1.0);
            if z.abs() < 1e-3 {
                z = 0.5;
            }
            let s2: f64 = rng.random_range(3e-3..0.1);
            let h = 1e-6 * z.abs().max(1e-3);
            let fd = (kl_log_uniform(z + h, s2, &C) - kl_log_uniform(z - h, s2, &C)) / (2.0 * h);
            let (_, g) = kl_log_uniform_with_grad(z, s2, &C);
            assert!((g - fd).abs() / fd.abs().max(1e-12) < 1e-4, "z={z} s2={s2} g={g} fd={fd}");
        }
    }

    #[test]
    fn gaussian_kl_is_zero_when_distributions_match() {
        let g = kl_gaussian(0.3f64, 0.02, 0.3, 0.02f64.ln());
        assert!(g.value.abs() < 1e-15);
        assert!(g.d_z.abs() < 1e-15);
        assert!(g.d_log_var.abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let z: f64 = rng.random_range(-1.0..1.0);
            let s2: f64 = rng.random_range(3e-3..0.1);
            let m: f64 = rng.random_range(-0.5..0.5);
            let lv: f64 = rng.random_range(-5.0..0.0);
            let h = 1e-6;
            let g = kl_gaussian(z, s2, m, lv);
            let fz = (kl_gaussian(z + h, s2, m, lv).value - kl_gaussian(z - h, s2, m, lv).value) / (2.0 * h);
            let fm = (kl_gaussian(z, s2, m + h, lv).value - kl_gaussian(z, s2, m - h, lv).value) / (2.0 * h);
            let fl = (kl_gaussian(z, s2, m, lv + h).value - kl_gaussian(z, s2, m, lv - h).value) / (2.0 * h);
            assert!((g.d_z - fz).abs() < 1e-5 * fz.abs().max(1.0));
            assert!((g.d_mean - fm).abs() < 1e-5 * fm.abs().max(1.0));
            assert!((g.d_log_var - fl).abs() < 1e-5 * fl.abs().max(1.0));
            assert!(g.value >= -1e-12);
        }
    }
}
