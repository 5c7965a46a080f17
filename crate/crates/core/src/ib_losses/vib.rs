use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::PEAK_POWER;
use crate::encoder_layers::BottleneckOutput;
use crate::error::{Error, Result};
use crate::real::Real;

/// Tolerance on softmax normalization before the model is declared broken.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Loss components of one evaluation, all in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VibLossTerms {
    pub cross_entropy: f64,
    /// Mean over examples of the per-dimension KL sum.
    pub kl_total: f64,
    pub beta: f64,
    pub total: f64,
}

impl VibLossTerms {
    pub fn new(cross_entropy: f64, kl_total: f64, beta: f64) -> Self {
        Self { cross_entropy, kl_total, beta, total: cross_entropy + beta * kl_total }
    }
}

/// What the loss needs from an encoder/decoder pair.
///
/// `encode` receives the per-example noise variance the encoder is told
/// about (static encoders ignore it). Backward calls follow the matching
/// training-mode forward calls.
pub trait VibModel<T: Real> {
    /// Width `n` of the encoded feature vector.
    fn feature_width(&self) -> usize;

    fn encode(&mut self, x: &ArrayD<T>, sigma2: &Array1<T>, train: bool) -> BottleneckOutput<T>;

    /// Logits of `q(y | z_hat)` for a `(batch, n)` received feature matrix.
    fn decode(&mut self, z_hat: Array2<T>, train: bool) -> Array2<T>;

    fn backward_decode(&mut self, d_logits: Array2<T>) -> Array2<T>;

    fn backward_encode(&mut self, d_z: Array2<T>);

    /// Per-example KL sums against the variational marginal. With
    /// `grad_scale = Some(s)` also returns `s * d KL / d z`; trainable prior
    /// parameters accumulate their own gradients with the same scale.
    fn kl(&mut self, out: &BottleneckOutput<T>, sigma2: &Array1<T>, grad_scale: Option<f64>) -> (Array1<T>, Option<Array2<T>>);

    /// `false` for digital schemes that reach the server error-free.
    fn noisy_channel(&self) -> bool {
        true
    }
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Softmax probabilities; fails if any row is not a distribution.
pub fn softmax_checked<T: Real>(logits: &Array2<T>) -> Result<Array2<T>> {
    let probs = log_softmax(logits).mapv_into(|v| v.exp());
    for (b, row) in probs.outer_iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if !sum.is_finite() || (sum - 1.0).abs() > NORMALIZATION_TOL.max(row.len() as f64 * f32::EPSILON as f64) {
            return Err(Error::ModelContractViolation(format!("output row {b} sums to {sum}")));
        }
        if row.iter().any(|&p| !(p >= T::zero())) {
            return Err(Error::ModelContractViolation(format!("output row {b} has a negative or NaN entry")));
        }
    }
    Ok(probs)
}

/// Mean categorical negative log-likelihood and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<(f64, Array2<T>)> {
    let probs = softmax_checked(logits)?;
    let batch = logits.nrows();
    if labels.len() != batch {
        return Err(Error::invalid(format!("{} labels for {batch} rows", labels.len())));
    }
    let logp = log_softmax(logits);
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= logits.ncols() {
            return Err(Error::invalid(format!("label {y} out of range for {} classes", logits.ncols())));
        }
        total -= logp[[b, y]].as_f64();
    }
    let scale = T::one() / T::of(batch as f64);
    let mut grad = probs;
    for (b, &y) in labels.iter().enumerate() {
        grad[[b, y]] -= T::one();
    }
    grad.mapv_inplace(|g| g * scale);
    Ok((total / batch as f64, grad))
}

/// Repeats every row `times` times (row `b * times + l` is a copy of `b`).
fn repeat_rows<T: Real>(a: &Array2<T>, times: usize) -> Array2<T> {
    let (rows, cols) = a.dim();
    Array2::from_shape_fn((rows * times, cols), |(r, c)| a[[r / times, c]])
}

/// Sums consecutive groups of `times` rows.
fn fold_rows<T: Real>(a: &Array2<T>, times: usize) -> Array2<T> {
    let (rows, cols) = a.dim();
    let mut out = Array2::zeros((rows / times, cols));
    for (r, row) in a.outer_iter().enumerate() {
        let mut target = out.row_mut(r / times);
        target += &row;
    }
    out
}

/// Standard-normal noise for `samples` draws per example.
pub fn draw_noise<T: Real, R: Rng + ?Sized>(batch: usize, width: usize, samples: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((batch * samples, width), || T::standard_normal(rng))
}

/// Empirical VIB loss with explicit unit-variance noise `eps`
/// (`(batch * samples, n)`); row `b * samples + l` is draw `l` of example `b`
/// and is scaled by `sqrt(sigma2[b])`.
///
/// Deactivated or pruned dimensions are not transmitted, so the server sees
/// an exact zero there. With `train`, gradients are accumulated in `model`.
#[allow(clippy::too_many_arguments)]
pub fn vib_loss_with_noise<T: Real, M: VibModel<T> + ?Sized>(
    model: &mut M,
    x: &ArrayD<T>,
    labels: &[usize],
    sigma2: &Array1<T>,
    eps: &Array2<T>,
    beta: f64,
    train: bool,
) -> Result<VibLossTerms> {
    let batch = x.shape()[0];
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if sigma2.len() != batch {
        return Err(Error::invalid(format!("{} noise variances for batch of {batch}", sigma2.len())));
    }
    let out = model.encode(x, sigma2, train);
    let width = out.z.ncols();
    if eps.ncols() != width || eps.nrows() % batch != 0 || eps.nrows() == 0 {
        return Err(Error::invalid(format!("noise shape {:?} does not fit batch {batch} x {width}", eps.dim())));
    }
    let samples = eps.nrows() / batch;
    let peak = PEAK_POWER.sqrt();
    if let Some(v) = out.z.iter().find(|v| v.abs().as_f64() > peak + crate::channel::AMPLITUDE_TOLERANCE) {
        return Err(Error::PowerConstraintViolation { index: 0, magnitude: v.abs().as_f64() });
    }

    let mut z_hat = repeat_rows(&out.z, samples);
    if model.noisy_channel() {
        for (r, mut row) in z_hat.outer_iter_mut().enumerate() {
            let b = r / samples;
            let std = sigma2[b].sqrt();
            for ((v, &e), &on) in row.iter_mut().zip(eps.row(r)).zip(out.active.row(b)) {
                if on {
                    *v += std * e;
                }
            }
        }
    }
    let logits = model.decode(z_hat, train);
    let repeated_labels: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, samples)).collect();
    let (ce, d_logits) = cross_entropy(&logits, &repeated_labels)?;

    let grad_scale = (train && beta != 0.0).then(|| beta / batch as f64);
    let (kl_rows, d_kl) = model.kl(&out, sigma2, grad_scale);
    let kl_total = kl_rows.iter().map(|v| v.as_f64()).sum::<f64>() / batch as f64;
    let terms = VibLossTerms::new(ce, kl_total, beta);

    if train {
        let d_zhat = model.backward_decode(d_logits);
        // z_hat = z + noise, so the noise path passes gradients straight through
        let mut d_z = fold_rows(&d_zhat, samples);
        if let Some(d_kl) = d_kl {
            d_z += &d_kl;
        }
        model.backward_encode(d_z);
    }
    Ok(terms)
}

/// Empirical VIB loss at a fixed noise variance with `samples` noise draws
/// per example.
#[allow(clippy::too_many_arguments)]
pub fn vib_loss<T: Real, M: VibModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    x: &ArrayD<T>,
    labels: &[usize],
    sigma2: f64,
    beta: f64,
    samples: usize,
    rng: &mut R,
    train: bool,
) -> Result<VibLossTerms> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("noise variance must be positive, got {sigma2}")));
    }
    let batch = x.shape()[0];
    let s2 = Array1::from_elem(batch, T::of(sigma2));
    vib_loss_per_example(model, x, labels, &s2, beta, samples, rng, train)
}

/// Uniform sampler over a noise-variance range; a zero-width range is a point mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Sampler {
    pub low: f64,
    pub high: f64,
}

impl Sigma2Sampler {
    pub const DEFAULT: Self = Self { low: 3e-3, high: 0.1 };

    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low > 0.0 && high >= low) {
            return Err(Error::invalid(format!("invalid noise variance range [{low}, {high}]")));
        }
        Ok(Self { low, high })
    }

    pub fn point(sigma2: f64) -> Result<Self> {
        Self::new(sigma2, sigma2)
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Array1<T> {
        if self.high == self.low {
            return Array1::from_elem(count, T::of(self.low));
        }
        Array1::from_shape_simple_fn(count, || T::of(rng.random_range(self.low..self.high)))
    }
}

/// Variable-length loss: one noise variance per example, fed to both the
/// encoder's gate and the channel.
#[allow(clippy::too_many_arguments)]
pub fn vl_vib_loss<T: Real, M: VibModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    x: &ArrayD<T>,
    labels: &[usize],
    sampler: &Sigma2Sampler,
    beta: f64,
    samples: usize,
    rng: &mut R,
    train: bool,
) -> Result<VibLossTerms> {
    let s2 = sampler.sample(x.shape()[0], rng);
    vib_loss_per_example(model, x, labels, &s2, beta, samples, rng, train)
}

#[allow(clippy::too_many_arguments)]
pub fn vib_loss_per_example<T: Real, M: VibModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    x: &ArrayD<T>,
    labels: &[usize],
    sigma2: &Array1<T>,
    beta: f64,
    samples: usize,
    rng: &mut R,
    train: bool,
) -> Result<VibLossTerms> {
    if samples == 0 {
        return Err(Error::invalid("need at least one noise sample per example"));
    }
    let batch = x.shape()[0];
    let width = model.feature_width();
    let eps = draw_noise(batch, width, samples, rng);
    vib_loss_with_noise(model, x, labels, sigma2, &eps, beta, train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use crate::encoder_layers::ImportanceBottleneck;
    use crate::ib_losses::kl::{kl_log_uniform_with_grad, KlConstants};
    use crate::nn::gradcheck::rel_err;
    use crate::nn::{Dense, Param};
    use ndarray::{Array, Ix2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Bottleneck straight on the input, linear decoder.
    struct Tiny {
        enc: ImportanceBottleneck<f64>,
        dec: Dense<f64>,
        constants: KlConstants,
    }

    impl Tiny {
        fn new(d: usize, n: usize, classes: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Self {
                enc: ImportanceBottleneck::new(d, n, &mut rng),
                dec: Dense::new(n, classes, &mut rng),
                constants: KlConstants::default(),
            }
        }

        fn params(&mut self) -> Vec<*mut Param<f64>> {
            let mut out: Vec<*mut Param<f64>> = Vec::new();
            self.enc.visit_params("e", &mut |_, p| out.push(p as *mut _));
            self.dec.visit_params("d", &mut |_, p| out.push(p as *mut _));
            out
        }
    }

    impl VibModel<f64> for Tiny {
        fn feature_width(&self) -> usize {
            self.enc.outputs()
        }
        fn encode(&mut self, x: &ArrayD<f64>, _s: &Array1<f64>, train: bool) -> BottleneckOutput<f64> {
            self.enc.forward_static(x.clone().into_dimensionality::<Ix2>().unwrap(), train)
        }
        fn decode(&mut self, z: Array2<f64>, train: bool) -> Array2<f64> {
            self.dec.forward2(z, train)
        }
        fn backward_decode(&mut self, d: Array2<f64>) -> Array2<f64> {
            self.dec.backward2(d)
        }
        fn backward_encode(&mut self, d: Array2<f64>) {
            self.enc.backward(&d);
        }
        fn kl(&mut self, out: &BottleneckOutput<f64>, s2: &Array1<f64>, scale: Option<f64>) -> (Array1<f64>, Option<Array2<f64>>) {
            let mut rows = Array1::zeros(out.z.nrows());
            let mut dz = Array2::zeros(out.z.raw_dim());
            for ((b, i), &z) in out.z.indexed_iter() {
                let (v, g) = kl_log_uniform_with_grad(z, s2[b], &self.constants);
                rows[b] += v;
                dz[[b, i]] = g * scale.unwrap_or(0.0);
            }
            (rows, scale.map(|_| dz))
        }
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: usize) -> (ArrayD<f64>, Vec<usize>) {
        let x = Array::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.0)).into_dyn();
        let y = (0..b).map(|_| rng.random_range(0..classes)).collect();
        (x, y)
    }

    #[test]
    fn total_is_ce_plus_beta_kl() {
        let t = VibLossTerms::new(0.7, -12.0, 1e-3);
        assert_eq!(t.total, 0.7 + 1e-3 * -12.0);
        let mut m = Tiny::new(2, 3, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = batch(&mut rng, 6, 2, 2);
        let t = vib_loss(&mut m, &x, &y, 0.01, 0.0, 1, &mut rng, false).unwrap();
        assert_eq!(t.total, t.cross_entropy);
    }

    #[test]
    fn all_zero_features_give_minus_n_k1() {
        let mut m = Tiny::new(2, 5, 2, 0);
        m.enc.gamma.value.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = batch(&mut rng, 4, 2, 2);
        let t = vib_loss(&mut m, &x, &y, 0.01, 1.0, 1, &mut rng, false).unwrap();
        assert!((t.kl_total - 5.0 * -0.63576).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_monte_carlo_oracle() {
        let mut m = Tiny::new(2, 3, 2, 3);
        let x = ndarray::arr2(&[[0.3, -0.6]]).into_dyn();
        let y = vec![1usize];
        let sigma2 = 0.05;
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = vib_loss(&mut m, &x, &y, sigma2, 0.0, draws, &mut rng, false).unwrap();

        // Oracle: evaluate the decoder by hand with independent noise.
        let z = m.enc.forward_static(x.clone().into_dimensionality::<Ix2>().unwrap(), false).z;
        let w = m.dec.weight.value.clone().into_dimensionality::<Ix2>().unwrap();
        let bias = m.dec.bias.value.clone();
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(99);
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            let zh: Vec<f64> = z.row(0).iter().map(|&v| v + sigma2.sqrt() * f64::standard_normal(&mut oracle_rng)).collect();
            let logits: Vec<f64> = (0..2).map(|c| bias[[c]] + (0..3).map(|i| zh[i] * w[[i, c]]).sum::<f64>()).collect();
            let lse = (logits[0].exp() + logits[1].exp()).ln();
            samples.push(lse - logits[1]);
        }
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        // two independent estimates: difference has sd sqrt(2) * se
        assert!((t.cross_entropy - mean).abs() < 3.0 * std::f64::consts::SQRT_2 * se, "{} vs {mean} (se {se})", t.cross_entropy);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Tiny::new(2, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = batch(&mut rng, 5, 2, 2);
        let s2 = Array1::from_elem(5, 0.02);
        let eps = draw_noise::<f64, _>(5, 3, 2, &mut rng);
        let beta = 0.05;
        let ptrs = m.params();
        for &p in &ptrs {
            unsafe { (*p).zero_grad() };
        }
        vib_loss_with_noise(&mut m, &x, &y, &s2, &eps, beta, true).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for &p in &ptrs {
            let len = unsafe { (*p).len() };
            for k in 0..len {
                let an = unsafe { (*p).grad.as_slice().unwrap()[k] };
                unsafe { (*p).value.as_slice_mut().unwrap()[k] += h };
                let up = vib_loss_with_noise(&mut m, &x, &y, &s2, &eps, beta, false).unwrap().total;
                unsafe { (*p).value.as_slice_mut().unwrap()[k] -= 2.0 * h };
                let down = vib_loss_with_noise(&mut m, &x, &y, &s2, &eps, beta, false).unwrap().total;
                unsafe { (*p).value.as_slice_mut().unwrap()[k] += h };
                worst = worst.max(rel_err(an, (up - down) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }

    #[test]
    fn invariant_under_batch_permutation() {
        let mut m = Tiny::new(2, 3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, y) = batch(&mut rng, 6, 2, 2);
        let s2 = Array1::from_elem(6, 0.03);
        let eps = draw_noise::<f64, _>(6, 3, 1, &mut rng);
        let a = vib_loss_with_noise(&mut m, &x, &y, &s2, &eps, 0.01, false).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = x.select(Axis(0), &perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let ep = eps.select(Axis(0), &perm);
        let b = vib_loss_with_noise(&mut m, &xp, &yp, &s2, &ep, 0.01, false).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!((a.kl_total - b.kl_total).abs() < 1e-12);
    }

    #[test]
    fn point_mass_sampler_matches_fixed_noise_loss() {
        let mut m = Tiny::new(2, 3, 2, 9);
        let (x, y) = batch(&mut ChaCha8Rng::seed_from_u64(10), 8, 2, 2);
        let sampler = Sigma2Sampler::point(0.02).unwrap();
        let a = vl_vib_loss(&mut m, &x, &y, &sampler, 0.01, 1, &mut ChaCha8Rng::seed_from_u64(11), false).unwrap();
        let b = vib_loss(&mut m, &x, &y, 0.02, 0.01, 1, &mut ChaCha8Rng::seed_from_u64(11), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampler_is_deterministic() {
        let mut m = Tiny::new(2, 3, 2, 12);
        let (x, y) = batch(&mut ChaCha8Rng::seed_from_u64(13), 8, 2, 2);
        let run = |m: &mut Tiny| vl_vib_loss(m, &x, &y, &Sigma2Sampler::DEFAULT, 0.01, 1, &mut ChaCha8Rng::seed_from_u64(14), false).unwrap();
        assert_eq!(run(&mut m), run(&mut m));
    }

    #[test]
    fn mixed_noise_ce_equals_per_example_average() {
        // beta = 0 and an all-open static encoder: the mixed-noise loss is
        // the average of per-example fixed-noise losses with shared noise.
        let mut m = Tiny::new(2, 3, 2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (x, y) = batch(&mut rng, 5, 2, 2);
        let s2: Array1<f64> = Sigma2Sampler::DEFAULT.sample(5, &mut rng);
        let eps = draw_noise::<f64, _>(5, 3, 1, &mut rng);
        let mixed = vib_loss_with_noise(&mut m, &x, &y, &s2, &eps, 0.0, false).unwrap();
        let mut sum = 0.0;
        for b in 0..5 {
            let xb = x.index_axis(Axis(0), b).insert_axis(Axis(0)).to_owned();
            let single = vib_loss_with_noise(&mut m, &xb, &y[b..=b], &s2.slice(ndarray::s![b..=b]).to_owned(), &eps.slice(ndarray::s![b..=b, ..]).to_owned(), 0.0, false).unwrap();
            sum += single.cross_entropy;
        }
        assert!((mixed.cross_entropy - sum / 5.0).abs() < 1e-12);
    }

    #[test]
    fn broken_decoder_is_rejected() {
        let logits = ndarray::arr2(&[[f64::NAN, 0.0]]);
        assert!(matches!(cross_entropy(&logits, &[0]), Err(Error::ModelContractViolation(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let logits = Array2::<f64>::zeros((3, 10));
        let (ce, _) = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }
}
