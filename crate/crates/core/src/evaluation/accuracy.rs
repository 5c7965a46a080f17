use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::real::Real;

/// Examples pushed through the network at once during evaluation.
pub const EVAL_BATCH: usize = 500;

/// Test accuracy in percent, averaged over independent channel realizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub mean: f64,
    /// Standard error of `mean` across trials (binomial over the test set
    /// when there is a single trial).
    pub se: f64,
    pub trials: Vec<f64>,
    /// Mean number of transmitted dimensions per example.
    pub active_mean: f64,
}

impl AccuracyEstimate {
    pub fn lower(&self) -> f64 {
        self.mean - 2.0 * self.se
    }

    pub fn upper(&self) -> f64 {
        self.mean + 2.0 * self.se
    }
}

/// Accuracy when the transmitter knows the channel exactly.
pub fn eval_accuracy<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset,
    sigma2: f64,
    trials: usize,
    rng: &mut R,
) -> Result<AccuracyEstimate> {
    eval_accuracy_mismatched(model, data, sigma2, sigma2, trials, rng)
}

/// The encoder (and its gate) sees `gate_sigma2`; the channel applies
/// `channel_sigma2`.
pub fn eval_accuracy_mismatched<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset,
    gate_sigma2: f64,
    channel_sigma2: f64,
    trials: usize,
    rng: &mut R,
) -> Result<AccuracyEstimate> {
    if trials == 0 {
        return Err(Error::invalid("evaluation needs at least one trial"));
    }
    if data.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if !(channel_sigma2 >= 0.0) || !(gate_sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variances must be >= 0, got {gate_sigma2} and {channel_sigma2}")));
    }
    let noisy = model.variant != crate::models::Variant::Quantization && channel_sigma2 > 0.0;
    let std = T::of(channel_sigma2.sqrt());
    let mut correct = vec![0usize; trials];
    let mut active_total = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.gather::<T>(chunk);
        let gate = Array1::from_elem(chunk.len(), T::of(gate_sigma2));
        let out = model.encode_batch(&x, &gate, false);
        active_total += out.active.iter().filter(|&&a| a).count();
        for hits in correct.iter_mut() {
            let mut z_hat = out.z.clone();
            if noisy {
                for (v, &on) in z_hat.iter_mut().zip(out.active.iter()) {
                    if on {
                        *v += std * T::standard_normal(rng);
                    }
                }
            }
            let logits = model.decode_batch(z_hat, false);
            *hits += count_correct(&logits, &labels);
        }
    }
    let n = data.len() as f64;
    let accs: Vec<f64> = correct.iter().map(|&c| 100.0 * c as f64 / n).collect();
    let mean = accs.iter().sum::<f64>() / trials as f64;
    let se = if trials > 1 {
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        (mean * (100.0 - mean) / n).sqrt()
    };
    Ok(AccuracyEstimate { mean, se, trials: accs, active_mean: active_total as f64 / n })
}

fn count_correct<T: Real>(logits: &Array2<T>, labels: &[usize]) -> usize {
    logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count()
}
