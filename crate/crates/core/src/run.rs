//! Run-directory layout and the train-then-evaluate driver.
//!
//! ```text
//! <run>/config.snapshot   full TOML config
//! <run>/metrics.jsonl     one EpochMetrics per line
//! <run>/checkpoint        latest model weights
//! <run>/train_state       optimizer state for --resume
//! <run>/record.json       final RunRecord
//! <run>/timing.jsonl      wall-clock seconds per epoch
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::psnr_to_sigma2;
use crate::checkpoint::{load_train_state, save_train_state};
use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{eval_accuracy, record_latency_ms, RunRecord, TrainPsnr};
use crate::models::Model;
use crate::training::{train, TrainState};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint";
pub const TRAIN_STATE: &str = "train_state";
pub const RECORD: &str = "record.json";
pub const TIMING: &str = "timing.jsonl";

/// What to do when the run directory already holds a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpenMode {
    Fresh,
    Resume,
    Force,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Opens `root` for `config`, writing the config snapshot.
    pub fn open(root: &Path, config: &ExperimentConfig, mode: OpenMode) -> Result<Self> {
        let dir = Self { root: root.to_path_buf() };
        let occupied = root.join(CONFIG_SNAPSHOT).exists() || root.join(METRICS).exists();
        match (occupied, mode) {
            (true, OpenMode::Fresh) => return Err(Error::RunDirectoryOccupied(root.to_path_buf())),
            (true, OpenMode::Force) => {
                for f in [CONFIG_SNAPSHOT, METRICS, CHECKPOINT, TRAIN_STATE, RECORD, TIMING] {
                    match std::fs::remove_file(root.join(f)) {
                        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                        _ => {}
                    }
                }
            }
            (true, OpenMode::Resume) => {
                let saved = ExperimentConfig::load(&root.join(CONFIG_SNAPSHOT), &[])?;
                if saved.hash() != config.hash() {
                    return Err(Error::Config(format!(
                        "{} was created with a different config; resume with that config or use --force",
                        root.display()
                    )));
                }
            }
            (false, _) => {}
        }
        std::fs::create_dir_all(root)?;
        write_atomic(&root.join(CONFIG_SNAPSHOT), config.to_toml().as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    /// Saved state to resume from, if any.
    pub fn saved_state(&self, config: &ExperimentConfig) -> Result<Option<TrainState<f32>>> {
        if !self.path(CHECKPOINT).exists() || !self.path(TRAIN_STATE).exists() {
            return Ok(None);
        }
        load_train_state(&self.path(CHECKPOINT), &self.path(TRAIN_STATE), &config.hash()).map(Some)
    }

    /// Rewrites `metrics.jsonl` from the full trace.
    pub fn write_metrics(&self, state: &TrainState<f32>) -> Result<()> {
        let mut text = String::new();
        for m in &state.trace {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        write_atomic(&self.path(METRICS), text.as_bytes())
    }

    pub fn append_timing(&self, epoch: usize, seconds: f64) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(self.path(TIMING))?;
        writeln!(f, "{}", serde_json::json!({ "epoch": epoch, "seconds": seconds }))?;
        Ok(())
    }

    pub fn write_record(&self, record: &RunRecord) -> Result<()> {
        write_atomic(&self.path(RECORD), serde_json::to_string_pretty(record)?.as_bytes())
    }

    pub fn read_record(&self) -> Result<RunRecord> {
        Ok(serde_json::from_slice(&std::fs::read(self.path(RECORD))?)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads the configured dataset with the train/test limits applied.
pub fn load_split(config: &ExperimentConfig) -> Result<Split> {
    let root = data::data_root(&config.data_dir);
    let split = data::load(config.task, &root)?;
    Ok(Split { train: split.train.truncated(config.train_limit), test: split.test.truncated(config.test_limit) })
}

/// Stable identifier of a run: variant, key settings and config hash.
pub fn run_id(config: &ExperimentConfig) -> String {
    format!("{}-{}-b{}-n{}-s{}-{}", config.task, config.variant, config.beta, config.n_initial, config.seed, config.hash())
}

/// Evaluates a trained model at the config's test conditions with the
/// transmitter knowing the channel.
pub fn evaluate_record(
    model: &mut Model<f32>,
    config: &ExperimentConfig,
    test: &Dataset,
    psnr_db: f64,
    checkpoint_id: &str,
) -> Result<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let acc = eval_accuracy(model, test, psnr_to_sigma2(psnr_db, crate::channel::PEAK_POWER)?, config.eval_trials, &mut rng)?;
    let latency_ms =
        record_latency_ms(config.variant, acc.active_mean, config.bits_per_dim, psnr_db, config.channel.symbol_rate)?;
    Ok(RunRecord {
        variant: config.variant,
        task: config.task,
        beta: config.beta,
        train_psnr_db: TrainPsnr::of(config)?,
        test_psnr_db: psnr_db,
        estimator_mode: "known".into(),
        n_active: acc.active_mean,
        bits_per_dim: config.bits_per_dim,
        latency_ms,
        accuracy_pct: acc.mean,
        accuracy_se: acc.se,
        seed: config.seed,
        checkpoint_id: checkpoint_id.to_string(),
        symbol_rate: config.channel.symbol_rate,
    })
}

/// Trains `config` inside `root`, checkpointing every epoch, then evaluates
/// at the training PSNR and writes `record.json`.
pub fn execute(config: &ExperimentConfig, split: &Split, root: &Path, mode: OpenMode) -> Result<(TrainState<f32>, RunRecord)> {
    config.validate()?;
    let dir = RunDir::open(root, config, mode)?;
    let hash = config.hash();
    let state = match (mode, dir.saved_state(config)?) {
        (OpenMode::Resume, Some(s)) => {
            log::info!("resuming {} after epoch {}", root.display(), s.epoch);
            s
        }
        _ => TrainState::new(config)?,
    };
    let mut clock = Instant::now();
    let state = train(config, &split.train, state, &mut |s: &TrainState<f32>| {
        let m = s.trace.last().expect("epoch recorded");
        log::info!(
            "epoch {:>3}  ce {:.4}  kl {:.3}  total {:.4}  active {:.2}  lr {:.1e}",
            m.epoch,
            m.cross_entropy,
            m.kl_total,
            m.total,
            m.active_dims,
            m.lr
        );
        let mut snapshot = s.clone();
        save_train_state(&dir.path(CHECKPOINT), &dir.path(TRAIN_STATE), &mut snapshot, &hash)?;
        dir.write_metrics(s)?;
        dir.append_timing(m.epoch, clock.elapsed().as_secs_f64())?;
        clock = Instant::now();
        Ok(())
    })?;
    let mut state = state;
    let record = evaluate_record(&mut state.model, config, &split.test, config.psnr_db, &run_id(config))?;
    dir.write_metrics(&state)?;
    dir.write_record(&record)?;
    Ok((state, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Task;

    pub(crate) fn toy_split() -> Split {
        let make = |n: usize, seed: u64| {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..10)).collect();
            let images = labels
                .iter()
                .flat_map(|&l| (0..784).map(move |k| if k % 10 == l as usize { 1.0 } else { -0.2 }))
                .collect();
            Dataset::new([1, 28, 28], images, labels).unwrap()
        };
        Split { train: make(96, 1), test: make(40, 2) }
    }

    fn toy_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(Task::Mnist);
        c.n_initial = 8;
        c.epochs = 2;
        c.batch_size = 32;
        c.eval_trials = 2;
        c
    }

    #[test]
    fn layout_and_refusal() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let c = toy_config();
        let (_, record) = execute(&c, &toy_split(), &root, OpenMode::Fresh).unwrap();
        for f in [CONFIG_SNAPSHOT, METRICS, CHECKPOINT, RECORD] {
            assert!(root.join(f).is_file(), "{f}");
        }
        record.check().unwrap();
        assert_eq!(RunDir { root: root.clone() }.read_record().unwrap(), record);
        assert_eq!(std::fs::read_to_string(root.join(METRICS)).unwrap().lines().count(), 2);
        assert!(matches!(execute(&c, &toy_split(), &root, OpenMode::Fresh), Err(Error::RunDirectoryOccupied(_))));
        execute(&c, &toy_split(), &root, OpenMode::Force).unwrap();
    }

    #[test]
    fn metrics_are_byte_identical_and_resume_matches() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = toy_config();
        c.epochs = 3;
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        execute(&c, &toy_split(), &a, OpenMode::Fresh).unwrap();
        execute(&c, &toy_split(), &b, OpenMode::Fresh).unwrap();
        let read = |p: &Path| std::fs::read(p.join(METRICS)).unwrap();
        assert_eq!(read(&a), read(&b));

        // interrupt after one epoch, then resume
        let r = tmp.path().join("r");
        let dir = RunDir::open(&r, &c, OpenMode::Fresh).unwrap();
        let split = toy_split();
        let mut partial =
            crate::training::train_until(&c, &split.train, TrainState::new(&c).unwrap(), 1, &mut |_| Ok(())).unwrap();
        save_train_state(&dir.path(CHECKPOINT), &dir.path(TRAIN_STATE), &mut partial, &c.hash()).unwrap();
        dir.write_metrics(&partial).unwrap();
        execute(&c, &split, &r, OpenMode::Resume).unwrap();
        assert_eq!(read(&a), read(&r));
        assert_eq!(std::fs::read(a.join(CHECKPOINT)).unwrap(), std::fs::read(r.join(CHECKPOINT)).unwrap());
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let tmp = tempfile::tempdir().unwrap();
        let c = toy_config();
        execute(&c, &toy_split(), tmp.path(), OpenMode::Fresh).unwrap();
        let mut other = c.clone();
        other.beta = 0.5;
        assert!(matches!(execute(&other, &toy_split(), tmp.path(), OpenMode::Resume), Err(Error::Config(_))));
    }
}
