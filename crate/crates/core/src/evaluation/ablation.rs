use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::models::{Model, Prior, Variant};
use crate::run::{evaluate_record, execute, run_id, write_atomic, OpenMode};
use crate::training::{train, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub prior: Prior,
    pub psnr_db: f64,
    pub gamma0: f64,
    /// Importance of every initial dimension, pruned ones included.
    pub gamma: Vec<f64>,
    pub pruned: Vec<bool>,
    pub accuracy_pct: f64,
    pub accuracy_se: f64,
    pub n_active: f64,
}

impl AblationResult {
    pub fn from_model(model: &Model<f32>, prior: Prior, psnr_db: f64, gamma0: f64, accuracy: (f64, f64), n_active: f64) -> Result<Self> {
        let gamma = model.gamma().ok_or_else(|| Error::invalid("prior ablation needs a static importance layer"))?;
        Ok(Self {
            prior,
            psnr_db,
            gamma0,
            gamma: gamma.iter().map(|&g| g as f64).collect(),
            pruned: model.pruned_mask(),
            accuracy_pct: accuracy.0,
            accuracy_se: accuracy.1,
            n_active,
        })
    }

    /// Median importance of the surviving dimensions.
    pub fn surviving_median(&self) -> Option<f64> {
        let mut kept: Vec<f64> = self.gamma.iter().zip(&self.pruned).filter(|(_, &p)| !p).map(|(&g, _)| g).collect();
        if kept.is_empty() {
            return None;
        }
        kept.sort_by(f64::total_cmp);
        Some(kept[kept.len() / 2])
    }

    /// `index,gamma,pruned` lines, the data behind a γ bar chart.
    pub fn gamma_csv(&self) -> String {
        let mut out = String::from("index,gamma,pruned\n");
        for (i, (g, p)) in self.gamma.iter().zip(&self.pruned).enumerate() {
            out.push_str(&format!("{i},{g},{p}\n"));
        }
        out
    }

    pub fn write_gamma_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.gamma_csv().as_bytes())
    }
}

/// Trains a static encoder with `prior` at `psnr_db` and reports its
/// importance vector and accuracy. With `out_dir` the run is stored there
/// (resuming if present) and `gamma.csv` is written next to it.
pub fn prior_ablation(
    base: &ExperimentConfig,
    split: &Split,
    prior: Prior,
    psnr_db: f64,
    out_dir: Option<&Path>,
) -> Result<AblationResult> {
    let mut config = base.clone();
    config.variant = Variant::Vfe;
    config.prior = prior;
    config.psnr_db = psnr_db;
    let (mut model, record) = match out_dir {
        Some(dir) => {
            let (state, record) = execute(&config, split, dir, OpenMode::Resume)?;
            (state.model, record)
        }
        None => {
            let mut state = train(&config, &split.train, TrainState::new(&config)?, &mut |_| Ok(()))?;
            let record = evaluate_record(&mut state.model, &config, &split.test, psnr_db, &run_id(&config))?;
            (state.model, record)
        }
    };
    let result = AblationResult::from_model(
        &mut model,
        prior,
        psnr_db,
        config.gamma0,
        (record.accuracy_pct, record.accuracy_se),
        record.n_active,
    )?;
    if let Some(dir) = out_dir {
        result.write_gamma_csv(&dir.join("gamma.csv"))?;
    }
    Ok(result)
}
