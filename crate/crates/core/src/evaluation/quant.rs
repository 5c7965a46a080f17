use std::ops::RangeInclusive;

use super::record::{record_latency_ms, RunRecord};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::Variant;

/// For each bit width, the widest feature (at most `n_max`) whose digital
/// latency at `psnr_db` fits `budget_ms`.
pub fn quantization_candidates(
    budget_ms: f64,
    psnr_db: f64,
    n_max: usize,
    bits: RangeInclusive<u32>,
    symbol_rate: f64,
) -> Result<Vec<(usize, u32)>> {
    let mut out = Vec::new();
    for b in bits {
        let fits = |n: usize| -> Result<bool> {
            Ok(record_latency_ms(Variant::Quantization, n as f64, Some(b), psnr_db, symbol_rate)? <= budget_ms)
        };
        // latency grows with n, so binary search the largest feasible width
        let (mut lo, mut hi) = (0usize, n_max);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(mid)? {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        if lo > 0 {
            out.push((lo, b));
        }
    }
    Ok(out)
}

/// Trains the quantization baseline at every budget-feasible `(n, bits)`
/// pair and returns the most accurate record.
pub fn search_quantization(
    base: &ExperimentConfig,
    budget_ms: f64,
    bits: RangeInclusive<u32>,
    runner: &mut dyn FnMut(&ExperimentConfig) -> Result<RunRecord>,
) -> Result<RunRecord> {
    let candidates = quantization_candidates(budget_ms, base.psnr_db, base.n_initial, bits, base.channel.symbol_rate)?;
    let mut best: Option<RunRecord> = None;
    for (n, b) in candidates {
        let mut c = base.clone();
        c.variant = Variant::Quantization;
        c.n_initial = n;
        c.bits_per_dim = Some(b);
        c.beta = 0.0;
        let r = runner(&c)?;
        if best.as_ref().is_none_or(|x| r.accuracy_pct > x.accuracy_pct) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::invalid(format!("no quantizer fits a {budget_ms} ms budget")))
}
