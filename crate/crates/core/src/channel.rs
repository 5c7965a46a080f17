//! Amplitude-limited scalar Gaussian channel.
//!
//! Every encoded symbol satisfies `|z_i| <= sqrt(P)` and the receiver sees
//! `z + eps` with `eps ~ N(0, sigma^2 I)`. Channel quality is reported as
//! PSNR = 10 log10(P / sigma^2).

use std::f64::consts::{E, PI};

use ndarray::{ArrayBase, Data, DataMut, Dimension, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Peak power of the Tanh-bounded encoder output.
pub const PEAK_POWER: f64 = 1.0;
pub const DEFAULT_SYMBOL_RATE: f64 = 9_600.0;
pub const DEFAULT_BANDWIDTH_HZ: f64 = 12_500.0;
/// Worst-case PSNR assumed by a transmitter with no channel knowledge.
pub const BLIND_PSNR_DB: f64 = 10.0;
/// Slack allowed on the amplitude check before a symbol counts as a violation.
pub const AMPLITUDE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub peak_power: f64,
    pub noise_variance: f64,
    pub bandwidth_hz: f64,
    pub symbol_rate: f64,
}

impl ChannelSpec {
    pub fn new(peak_power: f64, noise_variance: f64) -> Result<Self> {
        Self::with_rates(peak_power, noise_variance, DEFAULT_BANDWIDTH_HZ, DEFAULT_SYMBOL_RATE)
    }

    pub fn with_rates(
        peak_power: f64,
        noise_variance: f64,
        bandwidth_hz: f64,
        symbol_rate: f64,
    ) -> Result<Self> {
        if !(peak_power > 0.0) {
            return Err(Error::invalid(format!("peak power must be positive, got {peak_power}")));
        }
        if !(noise_variance > 0.0) {
            return Err(Error::invalid(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        if !(symbol_rate > 0.0) {
            return Err(Error::invalid(format!("symbol rate must be positive, got {symbol_rate}")));
        }
        Ok(Self { peak_power, noise_variance, bandwidth_hz, symbol_rate })
    }

    /// Unit-power channel at the given PSNR with the default rate constants.
    pub fn from_psnr(psnr_db: f64) -> Result<Self> {
        Self::new(PEAK_POWER, psnr_to_sigma2(psnr_db, PEAK_POWER)?)
    }

    pub fn psnr_db(&self) -> f64 {
        10.0 * (self.peak_power / self.noise_variance).log10()
    }

    pub fn capacity_bpcu(&self) -> f64 {
        // Both inputs validated at construction.
        capacity_bpcu(self.peak_power, self.noise_variance).unwrap_or(0.0)
    }

    pub fn latency_analog(&self, n_active: f64) -> f64 {
        latency_analog(n_active, self.symbol_rate)
    }

    pub fn latency_digital(&self, n_dims: usize, bits_per_dim: u32) -> Result<f64> {
        latency_digital(n_dims, bits_per_dim, self.peak_power, self.noise_variance, self.symbol_rate)
    }
}

pub fn psnr_to_sigma2(psnr_db: f64, peak_power: f64) -> Result<f64> {
    if !(peak_power > 0.0) {
        return Err(Error::invalid(format!("peak power must be positive, got {peak_power}")));
    }
    if !psnr_db.is_finite() {
        return Err(Error::invalid(format!("PSNR must be finite, got {psnr_db}")));
    }
    Ok(peak_power * 10f64.powf(-psnr_db / 10.0))
}

pub fn sigma2_to_psnr(sigma2: f64, peak_power: f64) -> Result<f64> {
    if !(peak_power > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "PSNR needs positive power and variance, got P={peak_power}, sigma2={sigma2}"
        )));
    }
    Ok(10.0 * (peak_power / sigma2).log10())
}

fn check_amplitude<T: Real>(value: T, index: usize, peak_amplitude: f64) -> Result<()> {
    let magnitude = value.abs().as_f64();
    if magnitude > peak_amplitude + AMPLITUDE_TOLERANCE || magnitude.is_nan() {
        return Err(Error::PowerConstraintViolation { index, magnitude });
    }
    Ok(())
}

/// Sends `z` through the channel: returns `z + eps`, `eps ~ N(0, sigma2)` i.i.d.
///
/// Noise is drawn in the logical (row-major) element order of `z`, so the
/// output is a pure function of the input and the state of `rng`.
pub fn transmit<T, S, D, R>(z: &ArrayBase<S, D>, sigma2: f64, rng: &mut R) -> Result<ndarray::Array<T, D>>
where
    T: Real,
    S: Data<Elem = T>,
    D: Dimension,
    R: Rng + ?Sized,
{
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variance must be non-negative, got {sigma2}")));
    }
    let peak = PEAK_POWER.sqrt();
    for (index, &v) in z.iter().enumerate() {
        check_amplitude(v, index, peak)?;
    }
    let std = T::of(sigma2.sqrt());
    Ok(z.map(|&v| v + std * T::standard_normal(rng)))
}

/// In-place batch variant of [`transmit`] where row `b` sees noise variance `sigma2[b]`.
pub fn transmit_rows<T, S, R>(z: &mut ArrayBase<S, Ix2>, sigma2: &[T], rng: &mut R) -> Result<()>
where
    T: Real,
    S: DataMut<Elem = T>,
    R: Rng + ?Sized,
{
    if z.nrows() != sigma2.len() {
        return Err(Error::invalid(format!(
            "{} rows but {} noise variances",
            z.nrows(),
            sigma2.len()
        )));
    }
    let peak = PEAK_POWER.sqrt();
    let width = z.ncols();
    for (b, (mut row, &s2)) in z.outer_iter_mut().zip(sigma2).enumerate() {
        if !(s2 >= T::zero()) {
            return Err(Error::invalid(format!("noise variance must be non-negative, got {s2}")));
        }
        let std = s2.sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            check_amplitude(*v, b * width + i, peak)?;
            *v += std * T::standard_normal(rng);
        }
    }
    Ok(())
}

/// How the transmitter learns the noise variance that drives its encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    Known,
    Estimated,
    Blind,
}

impl EstimatorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorMode::Known => "known",
            EstimatorMode::Estimated => "estimated",
            EstimatorMode::Blind => "blind",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseVarianceEstimate {
    pub estimate: f64,
    /// Pilot symbols spent on the estimate; zero for the known and blind modes.
    pub pilot_count: usize,
    pub mode: EstimatorMode,
}

impl NoiseVarianceEstimate {
    /// Perfect channel knowledge.
    pub fn known(true_sigma2: f64) -> Self {
        Self { estimate: true_sigma2, pilot_count: 0, mode: EstimatorMode::Known }
    }

    /// No channel knowledge: assume the worst PSNR of the operating range.
    pub fn blind(peak_power: f64) -> Result<Self> {
        Ok(Self {
            estimate: psnr_to_sigma2(BLIND_PSNR_DB, peak_power)?,
            pilot_count: 0,
            mode: EstimatorMode::Blind,
        })
    }
}

/// Pilot-based estimate `1/(m-1) * sum (received - sent)^2`.
///
/// The pilots are known to the receiver, so the sum already has the exact
/// mean removed; dividing by `m - 1` therefore overestimates by `m/(m-1)` on
/// average. The formula is kept as published.
pub fn estimate_noise_variance(sent: &[f64], received: &[f64]) -> Result<NoiseVarianceEstimate> {
    if sent.len() != received.len() {
        return Err(Error::invalid(format!(
            "pilot vectors differ in length: {} sent, {} received",
            sent.len(),
            received.len()
        )));
    }
    let m = sent.len();
    if m < 2 {
        return Err(Error::InsufficientPilots(m));
    }
    let sum_sq: f64 = sent.iter().zip(received).map(|(s, r)| (r - s) * (r - s)).sum();
    Ok(NoiseVarianceEstimate {
        estimate: sum_sq / (m - 1) as f64,
        pilot_count: m,
        mode: EstimatorMode::Estimated,
    })
}

/// Channel knowledge available to the transmitter at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PilotMode {
    Known,
    Pilots { m: usize },
    Blind,
}

impl PilotMode {
    pub fn estimator_mode(&self) -> EstimatorMode {
        match self {
            PilotMode::Known => EstimatorMode::Known,
            PilotMode::Pilots { .. } => EstimatorMode::Estimated,
            PilotMode::Blind => EstimatorMode::Blind,
        }
    }

    /// Label used in result tables: `known`, `m=8`, `blind`.
    pub fn label(&self) -> String {
        match self {
            PilotMode::Known => "known".to_string(),
            PilotMode::Pilots { m } => format!("m={m}"),
            PilotMode::Blind => "blind".to_string(),
        }
    }

    /// Produces the transmitter's view of `true_sigma2`. Pilot mode sends `m`
    /// random full-amplitude (+-sqrt(P)) symbols through the channel.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        true_sigma2: f64,
        peak_power: f64,
        rng: &mut R,
    ) -> Result<NoiseVarianceEstimate> {
        match *self {
            PilotMode::Known => Ok(NoiseVarianceEstimate::known(true_sigma2)),
            PilotMode::Blind => NoiseVarianceEstimate::blind(peak_power),
            PilotMode::Pilots { m } => {
                if m < 2 {
                    return Err(Error::InsufficientPilots(m));
                }
                let amp = peak_power.sqrt();
                let sent: Vec<f64> =
                    (0..m).map(|_| if rng.random::<bool>() { amp } else { -amp }).collect();
                let std = true_sigma2.sqrt();
                let received: Vec<f64> =
                    sent.iter().map(|s| s + std * f64::standard_normal(rng)).collect();
                estimate_noise_variance(&sent, &received)
            }
        }
    }
}

/// Upper bound on the capacity of the amplitude-limited scalar Gaussian
/// channel, in bits per channel use.
pub fn capacity_bpcu(peak_power: f64, sigma2: f64) -> Result<f64> {
    if !(peak_power > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "capacity needs positive power and variance, got P={peak_power}, sigma2={sigma2}"
        )));
    }
    let snr = peak_power / sigma2;
    let amplitude_branch = (1.0 + (2.0 * snr / (PI * E)).sqrt()).log2();
    let power_branch = 0.5 * (1.0 + snr).log2();
    Ok(amplitude_branch.min(power_branch))
}

/// Analog transmission: one channel use per active dimension.
pub fn latency_analog(n_active: f64, symbol_rate: f64) -> f64 {
    n_active / symbol_rate
}

/// Digital transmission of `n_dims * bits_per_dim` payload bits at the
/// capacity bound (ideal channel code); fractional channel uses allowed.
pub fn latency_digital(
    n_dims: usize,
    bits_per_dim: u32,
    peak_power: f64,
    sigma2: f64,
    symbol_rate: f64,
) -> Result<f64> {
    let bits = (n_dims as u64) * u64::from(bits_per_dim);
    if bits == 0 {
        return Ok(0.0);
    }
    let capacity = capacity_bpcu(peak_power, sigma2)?;
    if !(capacity > 0.0) || !capacity.is_finite() {
        return Err(Error::LatencyUndefined);
    }
    Ok(bits as f64 / capacity / symbol_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        assert_relative_eq!(psnr_to_sigma2(20.0, 1.0).unwrap(), 0.01, max_relative = 1e-12);
        assert_relative_eq!(psnr_to_sigma2(10.0, 1.0).unwrap(), 0.1, max_relative = 1e-12);
        assert_relative_eq!(psnr_to_sigma2(25.0, 1.0).unwrap(), 3.1622776601683794e-3, max_relative = 1e-12);
        assert!(matches!(psnr_to_sigma2(20.0, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(psnr_to_sigma2(20.0, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn channel_spec_validation() {
        assert!(ChannelSpec::new(1.0, 0.0).is_err());
        assert!(ChannelSpec::with_rates(1.0, 0.01, 12_500.0, 0.0).is_err());
        let spec = ChannelSpec::from_psnr(15.0).unwrap();
        assert_relative_eq!(spec.psnr_db(), 15.0, epsilon = 1e-12);
    }

    #[test]
    fn transmit_zero_noise_is_identity() {
        let z = array![[0.5f64, -0.25, 1.0], [0.0, 0.9, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = transmit(&z, 0.0, &mut rng).unwrap();
        assert_eq!(out, z);
        let out = transmit(&z, 1e-20, &mut rng).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn transmit_is_deterministic_for_a_seed() {
        let z = Array1::<f32>::linspace(-1.0, 1.0, 17);
        let a = transmit(&z, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = transmit(&z, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transmit_rejects_overdriven_symbols() {
        let z = array![0.2f64, 1.5];
        let err = transmit(&z, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::PowerConstraintViolation { index: 1, .. }));
        let mut zz = array![[0.1f64, -1.2]];
        let err = transmit_rows(&mut zz, &[0.01], &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::PowerConstraintViolation { index: 1, .. }));
    }

    #[test]
    fn transmit_rows_uses_per_row_variance() {
        let mut z = ndarray::Array2::<f64>::zeros((2, 20_000));
        transmit_rows(&mut z, &[0.0, 0.04], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(z.row(0).iter().all(|&v| v == 0.0));
        let var = z.row(1).iter().map(|v| v * v).sum::<f64>() / 20_000.0;
        // SE of the variance estimate is sigma2 * sqrt(2/n) = 4e-4
        assert!((var - 0.04).abs() < 3.0 * 4e-4, "variance {var}");
    }

    #[test]
    fn pilot_estimator_examples() {
        let est = estimate_noise_variance(&[0.0, 0.0], &[0.1, -0.1]).unwrap();
        assert_relative_eq!(est.estimate, 0.02, max_relative = 1e-12);
        assert_eq!(est.mode, EstimatorMode::Estimated);
        assert_eq!(est.pilot_count, 2);

        let sent = [0.3, -0.7, 1.0, 0.0, 0.5];
        assert_eq!(estimate_noise_variance(&sent, &sent).unwrap().estimate, 0.0);

        assert!(matches!(estimate_noise_variance(&[0.0], &[0.1]), Err(Error::InsufficientPilots(1))));
        assert!(matches!(estimate_noise_variance(&[], &[]), Err(Error::InsufficientPilots(0))));
        assert!(estimate_noise_variance(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn known_and_blind_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let known = PilotMode::Known.estimate(0.0123, 1.0, &mut rng).unwrap();
        assert_eq!(known.estimate, 0.0123);
        assert_eq!(known.mode, EstimatorMode::Known);
        let blind = PilotMode::Blind.estimate(0.0123, 1.0, &mut rng).unwrap();
        assert_relative_eq!(blind.estimate, 0.1, max_relative = 1e-12);
        assert_eq!(blind.mode, EstimatorMode::Blind);
        assert!(PilotMode::Pilots { m: 1 }.estimate(0.01, 1.0, &mut rng).is_err());
        let est = PilotMode::Pilots { m: 8 }.estimate(0.01, 1.0, &mut rng).unwrap();
        assert_eq!(est.pilot_count, 8);
        assert!(est.estimate > 0.0);
    }

    #[test]
    fn pilot_estimator_bias_matches_m_over_m_minus_one() {
        // Known pilots: E[sum (r - s)^2] = m sigma2, so E[estimate] = m/(m-1) sigma2.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let sigma2 = 0.01;
        let mode = PilotMode::Pilots { m: 8 };
        let samples: Vec<f64> =
            (0..trials).map(|_| mode.estimate(sigma2, 1.0, &mut rng).unwrap().estimate).collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        let expected = 8.0 / 7.0 * sigma2;
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
        assert!((mean - sigma2).abs() > 3.0 * se, "bias should be detectable");
    }

    /// Independent evaluation of both capacity branches.
    fn branches(p: f64, s2: f64) -> (f64, f64) {
        let a = (1.0 + (2.0 * p / (std::f64::consts::PI * std::f64::consts::E * s2)).sqrt()).ln()
            / std::f64::consts::LN_2;
        let b = 0.5 * (1.0 + p / s2).ln() / std::f64::consts::LN_2;
        (a, b)
    }

    #[test]
    fn capacity_examples() {
        let c = capacity_bpcu(1.0, 0.01).unwrap();
        assert!((c - 2.546).abs() < 5e-4, "{c}");
        let (a, b) = branches(1.0, 0.01);
        assert!(a < b);
        let c = capacity_bpcu(1.0, 0.1).unwrap();
        assert!((c - 1.339).abs() < 5e-4, "{c}");
        let c = capacity_bpcu(1.0, 1e12).unwrap();
        assert!(c < 1e-5);
        assert!(capacity_bpcu(0.0, 0.1).is_err());
        assert!(capacity_bpcu(1.0, -0.1).is_err());
    }

    #[test]
    fn capacity_branch_switches_once_and_is_monotone() {
        // Sweep PSNR from -20 dB to 40 dB; the power branch is the min at low
        // SNR, the amplitude branch at high SNR.
        let mut prev = f64::NEG_INFINITY;
        let mut switches = 0;
        let mut last_amp_is_min = None;
        for k in 0..=6000 {
            let psnr = -20.0 + 0.01 * k as f64;
            let s2 = psnr_to_sigma2(psnr, 1.0).unwrap();
            let c = capacity_bpcu(1.0, s2).unwrap();
            assert!(c > prev, "not increasing at {psnr} dB");
            prev = c;
            let (a, b) = branches(1.0, s2);
            let amp_is_min = a <= b;
            if let Some(last) = last_amp_is_min {
                if last != amp_is_min {
                    switches += 1;
                }
            }
            last_amp_is_min = Some(amp_is_min);
        }
        assert_eq!(switches, 1);
        assert_eq!(last_amp_is_min, Some(true));
    }

    #[test]
    fn latency_examples() {
        assert_relative_eq!(latency_analog(31.0, DEFAULT_SYMBOL_RATE), 3.2291666e-3, max_relative = 1e-6);
        assert_eq!(latency_analog(0.0, DEFAULT_SYMBOL_RATE), 0.0);
        assert_eq!(latency_analog(9600.0, DEFAULT_SYMBOL_RATE), 1.0);
        assert!(latency_analog(31.0, DEFAULT_SYMBOL_RATE) <= 3.25e-3);
        assert!(latency_analog(32.0, DEFAULT_SYMBOL_RATE) > 3.25e-3);

        let t = latency_digital(32, 2, 1.0, 0.01, DEFAULT_SYMBOL_RATE).unwrap();
        assert!((t - 2.618e-3).abs() < 1e-6, "{t}");
        assert_eq!(latency_digital(0, 8, 1.0, 0.01, DEFAULT_SYMBOL_RATE).unwrap(), 0.0);
        assert!(matches!(
            latency_digital(4, 2, 1.0, f64::INFINITY, DEFAULT_SYMBOL_RATE),
            Err(Error::LatencyUndefined)
        ));
    }

    #[test]
    fn raw_mnist_image_latency() {
        // 784 pixels x 8 bits at 25 dB through the capacity bound.
        let s2 = psnr_to_sigma2(25.0, 1.0).unwrap();
        let t = latency_digital(784, 8, 1.0, s2, DEFAULT_SYMBOL_RATE).unwrap();
        let c = capacity_bpcu(1.0, s2).unwrap();
        assert_relative_eq!(t, 6272.0 / c / 9600.0, max_relative = 1e-12);
        // 10 dB costs more than 25 dB by the capacity ratio.
        let t10 = latency_digital(784, 8, 1.0, 0.1, DEFAULT_SYMBOL_RATE).unwrap();
        assert_relative_eq!(t10 / t, c / capacity_bpcu(1.0, 0.1).unwrap(), max_relative = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn psnr_round_trip(x in 0.0f64..40.0) {
                let s2 = psnr_to_sigma2(x, 1.0).unwrap();
                prop_assert!((sigma2_to_psnr(s2, 1.0).unwrap() - x).abs() < 1e-9);
            }

            #[test]
            fn latency_analog_linear(n in 0u32..10_000, k in 1u32..8) {
                let one = latency_analog(n as f64, DEFAULT_SYMBOL_RATE);
                let many = latency_analog((n * k) as f64, DEFAULT_SYMBOL_RATE);
                prop_assert!((many - k as f64 * one).abs() < 1e-12);
            }

            #[test]
            fn latency_digital_inverse_in_capacity(n in 1usize..200, bits in 1u32..9, p1 in 0.0f64..30.0, p2 in 0.0f64..30.0) {
                let s1 = psnr_to_sigma2(p1, 1.0).unwrap();
                let s2 = psnr_to_sigma2(p2, 1.0).unwrap();
                let t1 = latency_digital(n, bits, 1.0, s1, DEFAULT_SYMBOL_RATE).unwrap();
                let t2 = latency_digital(n, bits, 1.0, s2, DEFAULT_SYMBOL_RATE).unwrap();
                let c1 = capacity_bpcu(1.0, s1).unwrap();
                let c2 = capacity_bpcu(1.0, s2).unwrap();
                prop_assert!((t1 * c1 - t2 * c2).abs() < 1e-12);
            }
        }
    }
}
