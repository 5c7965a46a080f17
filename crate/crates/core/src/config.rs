//! Experiment configuration: TOML file, defaults and command-line overrides.
//!
//! A config file only needs `task`; every other key falls back to the
//! task's defaults. Overrides use dotted keys (`optimizer.lr=3e-4`) with TOML
//! literal values and win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{psnr_to_sigma2, PilotMode, DEFAULT_BANDWIDTH_HZ, DEFAULT_SYMBOL_RATE, PEAK_POWER};
use crate::encoder_layers::{DEFAULT_GATE_HIDDEN, DEFAULT_GATE_LAYERS};
use crate::error::{Error, Result};
use crate::ib_losses::Sigma2Sampler;
use crate::models::{ArchitectureSpec, BaselineSpec, ModelSpec, Prior, Task, Variant};
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Multiplier applied once `decay_at` of the epochs have run.
    pub lr_decay: f64,
    pub decay_at: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self { lr: 1e-3, lr_decay: 0.1, decay_at: 2.0 / 3.0, beta1: adam.beta1, beta2: adam.beta2, eps: adam.eps }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Learning rate for a zero-based epoch of a `total`-epoch run.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let boundary = (self.decay_at * total as f64).floor() as usize;
        if epoch >= boundary && boundary > 0 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    pub symbol_rate: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { bandwidth_hz: DEFAULT_BANDWIDTH_HZ, symbol_rate: DEFAULT_SYMBOL_RATE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: Variant,
    pub prior: Prior,
    /// Initial bottleneck width `n`.
    pub n_initial: usize,
    pub beta: f64,
    /// Values swept by `ibcomm sweep`; empty means just `beta`.
    pub beta_grid: Vec<f64>,
    /// Training PSNR of static variants.
    pub psnr_db: f64,
    /// Noise-variance range sampled while training the variable-length variant.
    pub sigma2_range: [f64; 2],
    /// PSNR points for dynamic evaluation.
    pub eval_psnr_db: Vec<f64>,
    pub gamma0: f64,
    /// Noise draws per example in the loss.
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub pilots: PilotMode,
    /// Quantization variant only.
    pub bits_per_dim: Option<u32>,
    /// Channel-noise passes over the test set per evaluation.
    pub eval_trials: usize,
    pub gate_hidden: usize,
    pub gate_layers: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub channel: ChannelConfig,
    /// Extra baselines trained by `ibcomm sweep`.
    pub baselines: Vec<BaselineSpec>,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        Self {
            task,
            variant: Variant::Vfe,
            prior: Prior::LogUniform,
            n_initial: task.default_width(),
            beta: 1e-3,
            beta_grid: Vec::new(),
            psnr_db: 20.0,
            sigma2_range: [Sigma2Sampler::DEFAULT.low, Sigma2Sampler::DEFAULT.high],
            eval_psnr_db: vec![10.0, 15.0, 20.0, 25.0],
            gamma0: task.default_gamma0(),
            samples: 1,
            batch_size: 128,
            epochs: task.default_epochs(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            pilots: PilotMode::Known,
            bits_per_dim: None,
            eval_trials: 10,
            gate_hidden: DEFAULT_GATE_HIDDEN,
            gate_layers: DEFAULT_GATE_LAYERS,
            train_limit: None,
            test_limit: None,
            channel: ChannelConfig::default(),
            baselines: Vec::new(),
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Parses TOML text on top of the task defaults, then applies overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let task = match table.get("task") {
            Some(toml::Value::String(s)) => s.parse::<Task>()?,
            Some(other) => return Err(Error::Config(format!("task: expected a string, got {other}"))),
            None => return Err(Error::Config("missing required key `task`".into())),
        };
        let mut merged = toml::Table::try_from(Self::defaults(task)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        let config: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Full snapshot; parsing it back yields an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable identifier of the full config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn with_override(&self, o: &str) -> Result<Self> {
        Self::from_toml_str(&self.to_toml(), &[o.to_string()])
    }

    pub fn sigma2(&self) -> Result<f64> {
        psnr_to_sigma2(self.psnr_db, PEAK_POWER)
    }

    pub fn sampler(&self) -> Result<Sigma2Sampler> {
        Sigma2Sampler::new(self.sigma2_range[0], self.sigma2_range[1])
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: ArchitectureSpec::for_task(self.task, self.n_initial),
            variant: self.variant,
            prior: self.prior,
            bits_per_dim: self.bits_per_dim,
            gamma0: self.gamma0,
            gate_hidden: self.gate_hidden,
            gate_layers: self.gate_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.n_initial == 0 {
            return bad("n_initial", "must be positive".into());
        }
        if !(self.beta >= 0.0) || self.beta_grid.iter().any(|b| !(*b >= 0.0)) {
            return bad("beta", "must be non-negative".into());
        }
        if !self.psnr_db.is_finite() {
            return bad("psnr_db", "must be finite".into());
        }
        if let Err(e) = self.sampler() {
            return bad("sigma2_range", e.to_string());
        }
        if !(self.gamma0 >= 0.0) {
            return bad("gamma0", "must be non-negative".into());
        }
        if self.samples == 0 {
            return bad("samples", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.optimizer.decay_at) {
            return bad("optimizer.decay_at", "must be a fraction in [0, 1]".into());
        }
        if self.eval_trials == 0 {
            return bad("eval_trials", "must be at least 1".into());
        }
        if let PilotMode::Pilots { m } = self.pilots {
            if m < 2 {
                return bad("pilots.m", format!("needs at least 2 pilots, got {m}"));
            }
        }
        if !(self.channel.symbol_rate > 0.0) || !(self.channel.bandwidth_hz > 0.0) {
            return bad("channel", "rates must be positive".into());
        }
        for b in &self.baselines {
            if let Err(e) = b.validate() {
                return bad("baselines", e.to_string());
            }
        }
        if let Err(e) = self.model_spec().validate() {
            return bad("variant", e.to_string());
        }
        Ok(())
    }
}

/// Sets `key=value` (dotted key, TOML literal value; bare words are strings).
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override `{spec}`: `{part}` is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !is_tagged(&t) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Tagged enums (`pilots = { mode = ... }`) replace rather than merge.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("mode")
}
