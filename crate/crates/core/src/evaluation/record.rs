use serde::{Deserialize, Serialize};

use crate::channel::{latency_analog, latency_digital, PEAK_POWER};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::{Task, Variant};

/// Noise condition a model was trained under, in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainPsnr {
    Fixed(f64),
    Range([f64; 2]),
}

impl TrainPsnr {
    pub fn of(config: &ExperimentConfig) -> Result<Self> {
        Ok(match config.variant {
            Variant::VlVfe => {
                let [lo, hi] = config.sigma2_range;
                let to_db = |s| crate::channel::sigma2_to_psnr(s, PEAK_POWER);
                TrainPsnr::Range([to_db(hi)?, to_db(lo)?])
            }
            _ => TrainPsnr::Fixed(config.psnr_db),
        })
    }
}

/// One evaluated operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub task: Task,
    pub beta: f64,
    pub train_psnr_db: TrainPsnr,
    pub test_psnr_db: f64,
    /// `known`, `m=<pilots>` or `blind`.
    pub estimator_mode: String,
    /// Mean transmitted dimensions per example.
    pub n_active: f64,
    pub bits_per_dim: Option<u32>,
    pub latency_ms: f64,
    pub accuracy_pct: f64,
    pub accuracy_se: f64,
    pub seed: u64,
    pub checkpoint_id: String,
    pub symbol_rate: f64,
}

impl RunRecord {
    /// Latency implied by `n_active` and the channel constants.
    pub fn expected_latency_ms(&self) -> Result<f64> {
        record_latency_ms(self.variant, self.n_active, self.bits_per_dim, self.test_psnr_db, self.symbol_rate)
    }

    pub fn check(&self) -> Result<()> {
        let expected = self.expected_latency_ms()?;
        if (expected - self.latency_ms).abs() > 1e-9 {
            return Err(Error::invalid(format!("record latency {} ms disagrees with {expected} ms", self.latency_ms)));
        }
        if !(0.0..=100.0).contains(&self.accuracy_pct) {
            return Err(Error::invalid(format!("accuracy {} outside [0, 100]", self.accuracy_pct)));
        }
        Ok(())
    }
}

/// Analog latency for continuous features; ideal-code digital latency for
/// the quantized baseline.
pub fn record_latency_ms(
    variant: Variant,
    n_active: f64,
    bits_per_dim: Option<u32>,
    psnr_db: f64,
    symbol_rate: f64,
) -> Result<f64> {
    let seconds = match (variant, bits_per_dim) {
        (Variant::Quantization, Some(bits)) => {
            let sigma2 = crate::channel::psnr_to_sigma2(psnr_db, PEAK_POWER)?;
            latency_digital(n_active.round() as usize, bits, PEAK_POWER, sigma2, symbol_rate)?
        }
        (Variant::Quantization, None) => return Err(Error::invalid("quantization record without bits_per_dim")),
        _ => latency_analog(n_active, symbol_rate),
    };
    Ok(seconds * 1e3)
}
