use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::accuracy::eval_accuracy_mismatched;
use super::record::{record_latency_ms, RunRecord, TrainPsnr};
use crate::channel::{psnr_to_sigma2, PilotMode, PEAK_POWER};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// Evaluates one trained model across a PSNR grid. Each trial draws a fresh
/// noise-variance estimate under `mode`; the encoder (and the gate of a
/// variable-length model) sees the estimate while the channel applies the
/// true variance. Models without a gate ignore the estimate.
pub fn dynamic_channel_eval(
    model: &mut Model<f32>,
    config: &ExperimentConfig,
    test: &Dataset,
    psnr_grid: &[f64],
    mode: PilotMode,
    checkpoint_id: &str,
) -> Result<Vec<RunRecord>> {
    if psnr_grid.is_empty() {
        return Err(Error::invalid("empty PSNR grid"));
    }
    let trials = config.eval_trials;
    let mut records = Vec::with_capacity(psnr_grid.len());
    for (k, &psnr) in psnr_grid.iter().enumerate() {
        let sigma2 = psnr_to_sigma2(psnr, PEAK_POWER)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX - 1 - k as u64);
        let mut accs = Vec::with_capacity(trials);
        let mut active = 0.0;
        for _ in 0..trials {
            let estimate = mode.estimate(sigma2, PEAK_POWER, &mut rng)?;
            let a = eval_accuracy_mismatched(model, test, estimate.estimate, sigma2, 1, &mut rng)?;
            accs.push(a.mean);
            active += a.active_mean;
        }
        let mean = accs.iter().sum::<f64>() / trials as f64;
        let se = if trials > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / ((trials - 1) * trials) as f64).sqrt()
        } else {
            (mean * (100.0 - mean) / test.len() as f64).sqrt()
        };
        let n_active = active / trials as f64;
        records.push(RunRecord {
            variant: config.variant,
            task: config.task,
            beta: config.beta,
            train_psnr_db: TrainPsnr::of(config)?,
            test_psnr_db: psnr,
            estimator_mode: mode.label(),
            n_active,
            bits_per_dim: config.bits_per_dim,
            latency_ms: record_latency_ms(config.variant, n_active, config.bits_per_dim, psnr, config.channel.symbol_rate)?,
            accuracy_pct: mean,
            accuracy_se: se,
            seed: config.seed,
            checkpoint_id: checkpoint_id.to_string(),
            symbol_rate: config.channel.symbol_rate,
        });
    }
    Ok(records)
}
