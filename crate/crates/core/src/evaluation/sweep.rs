use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::RunRecord;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::models::{BaselineKind, Variant};
use crate::run::{run_id, write_atomic};

/// One CSV line of a sweep's results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub task: String,
    pub beta: f64,
    pub psnr_db: f64,
    pub estimator_mode: String,
    pub n_active: f64,
    pub latency_ms: f64,
    pub accuracy_pct: f64,
    pub accuracy_se: f64,
    pub seed: u64,
    pub checkpoint_id: String,
}

impl From<&RunRecord> for SweepRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            variant: r.variant.to_string(),
            task: r.task.to_string(),
            beta: r.beta,
            psnr_db: r.test_psnr_db,
            estimator_mode: r.estimator_mode.clone(),
            n_active: r.n_active,
            latency_ms: r.latency_ms,
            accuracy_pct: r.accuracy_pct,
            accuracy_se: r.accuracy_se,
            seed: r.seed,
            checkpoint_id: r.checkpoint_id.clone(),
        }
    }
}

impl SweepRow {
    fn key(&self) -> (String, String, String) {
        (self.checkpoint_id.clone(), format!("{}", self.psnr_db), self.estimator_mode.clone())
    }
}

/// CSV results file; every write rewrites the whole file atomically, sorted
/// by latency.
#[derive(Clone, Debug)]
pub struct ResultStore {
    pub path: PathBuf,
}

impl ResultStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn failures_path(&self) -> PathBuf {
        self.path.with_extension("failures.jsonl")
    }

    pub fn load(&self) -> Result<Vec<SweepRow>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        read_rows(&self.path)
    }

    pub fn contains_run(&self, id: &str) -> Result<bool> {
        Ok(self.load()?.iter().any(|r| r.checkpoint_id == id))
    }

    /// Adds `rows`, replacing rows with the same run, PSNR and estimator.
    pub fn upsert(&self, rows: &[SweepRow]) -> Result<()> {
        let mut all: BTreeMap<_, SweepRow> = self.load()?.into_iter().map(|r| (r.key(), r)).collect();
        for r in rows {
            all.insert(r.key(), r.clone());
        }
        let mut sorted: Vec<SweepRow> = all.into_values().collect();
        sorted.sort_by(|a, b| {
            a.latency_ms.total_cmp(&b.latency_ms).then_with(|| a.variant.cmp(&b.variant)).then_with(|| a.key().cmp(&b.key()))
        });
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &sorted {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        write_atomic(&self.path, &bytes)
    }

    pub fn record_failure(&self, id: &str, error: &str) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(self.failures_path())?;
        writeln!(f, "{}", serde_json::json!({ "checkpoint_id": id, "error": error }))?;
        Ok(())
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Configs of every sweep point: one per β of the grid, then each
/// configured baseline.
pub fn sweep_points(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let grid = if base.beta_grid.is_empty() { vec![base.beta] } else { base.beta_grid.clone() };
    let mut points: Vec<ExperimentConfig> = grid
        .iter()
        .map(|&beta| {
            let mut c = base.clone();
            c.beta = beta;
            c.beta_grid.clear();
            c.baselines.clear();
            c
        })
        .collect();
    for b in &base.baselines {
        let mut c = base.clone();
        c.beta_grid.clear();
        c.baselines.clear();
        c.n_initial = b.n;
        c.beta = 0.0;
        match b.kind {
            BaselineKind::DeepJscc => {
                c.variant = Variant::DeepJscc;
                c.bits_per_dim = None;
            }
            BaselineKind::Quantization => {
                c.variant = Variant::Quantization;
                c.bits_per_dim = b.bits_per_dim;
            }
        }
        points.push(c);
    }
    points
}

#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Runs every sweep point not already in `store`. `runner` trains and
/// evaluates one config; a failing point is logged and the sweep moves on.
pub fn rate_distortion_sweep(
    base: &ExperimentConfig,
    store: &ResultStore,
    runner: &mut dyn FnMut(&ExperimentConfig) -> Result<Vec<RunRecord>>,
) -> Result<SweepReport> {
    let points = sweep_points(base);
    if points.is_empty() {
        return Err(crate::error::Error::Config("beta_grid: sweep has no points".into()));
    }
    let mut report = SweepReport::default();
    for config in points {
        let id = run_id(&config);
        if store.contains_run(&id)? {
            report.skipped.push(id);
            continue;
        }
        match runner(&config) {
            Ok(records) => {
                let rows: Vec<SweepRow> = records.iter().map(SweepRow::from).collect();
                store.upsert(&rows)?;
                report.completed.push(id);
            }
            Err(e) => {
                log::error!("sweep point {id} failed: {e}");
                store.record_failure(&id, &e.to_string())?;
                report.failed.push((id, e.to_string()));
            }
        }
    }
    Ok(report)
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}
