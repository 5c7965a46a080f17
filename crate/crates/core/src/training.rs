//! Minibatch training loops for the static and variable-length encoders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ib_losses::{vib_loss, vl_vib_loss, VibLossTerms};
use crate::models::{build_model, Head, Model, Variant};
use crate::nn::Adam;
use crate::real::Real;

/// Noise condition an epoch was trained under.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma2Record {
    Fixed(f64),
    Range([f64; 2]),
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub cross_entropy: f64,
    pub kl_total: f64,
    pub total: f64,
    pub beta: f64,
    /// Transmitted dimensions: unpruned count for static encoders, mean
    /// per-example count for the gated one.
    pub active_dims: f64,
    pub sigma2: Sigma2Record,
    pub lr: f64,
    pub newly_pruned: usize,
}

impl EpochMetrics {
    pub fn terms(&self) -> VibLossTerms {
        VibLossTerms { cross_entropy: self.cross_entropy, kl_total: self.kl_total, beta: self.beta, total: self.total }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    /// 1.0, or 0.5 after recovering from a divergence.
    pub lr_scale: f64,
    /// Pruning mask after each completed epoch.
    pub pruned_history: Vec<Vec<bool>>,
    pub trace: Vec<EpochMetrics>,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            epoch: 0,
            model: build_model(&config.model_spec(), config.seed)?,
            optimizer: Adam::new(config.optimizer.adam()),
            lr_scale: 1.0,
            pruned_history: Vec::new(),
            trace: Vec::new(),
        })
    }

    pub fn is_complete(&self, config: &ExperimentConfig) -> bool {
        self.epoch >= config.epochs
    }
}

/// Random stream for one epoch: shuffling and channel noise depend only on
/// the seed and the epoch index, so resumed runs replay exactly.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Called after every completed epoch.
pub type EpochObserver<'a, T> = dyn FnMut(&TrainState<T>) -> Result<()> + 'a;

/// Static training at the configured PSNR with per-epoch pruning.
pub fn train_vfe<T: Real>(config: &ExperimentConfig, data: &Dataset) -> Result<TrainState<T>> {
    if config.variant != Variant::Vfe {
        return Err(Error::Config(format!("train_vfe needs variant vfe, got {}", config.variant)));
    }
    train(config, data, TrainState::new(config)?, &mut |_| Ok(()))
}

/// Training over a range of noise variances with per-pass deactivation.
pub fn train_vl_vfe<T: Real>(config: &ExperimentConfig, data: &Dataset) -> Result<TrainState<T>> {
    if config.variant != Variant::VlVfe {
        return Err(Error::Config(format!("train_vl_vfe needs variant vl-vfe, got {}", config.variant)));
    }
    train(config, data, TrainState::new(config)?, &mut |_| Ok(()))
}

/// Runs the remaining epochs of `state`. A non-finite loss rolls the epoch
/// back and retries it once at half the learning rate.
pub fn train<T: Real>(
    config: &ExperimentConfig,
    data: &Dataset,
    state: TrainState<T>,
    observer: &mut EpochObserver<'_, T>,
) -> Result<TrainState<T>> {
    train_until(config, data, state, config.epochs, observer)
}

/// Like [`train`] but stops once `stop` epochs are complete; the schedule
/// still follows `config.epochs`.
pub fn train_until<T: Real>(
    config: &ExperimentConfig,
    data: &Dataset,
    mut state: TrainState<T>,
    stop: usize,
    observer: &mut EpochObserver<'_, T>,
) -> Result<TrainState<T>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.shape != config.task.input_shape() {
        return Err(Error::invalid(format!(
            "dataset images are {:?}, {} expects {:?}",
            data.shape,
            config.task,
            config.task.input_shape()
        )));
    }
    while state.epoch < stop.min(config.epochs) {
        let epoch = state.epoch;
        let snapshot = (state.model.clone(), state.optimizer.clone());
        match run_epoch(&mut state, config, data, epoch) {
            Ok(metrics) => {
                state.epoch += 1;
                state.pruned_history.push(state.model.pruned_mask());
                state.trace.push(metrics);
                observer(&state)?;
            }
            Err(Error::TrainingDiverged { .. }) if state.lr_scale == 1.0 => {
                log::warn!("non-finite loss in epoch {}; restoring and halving the learning rate", epoch + 1);
                (state.model, state.optimizer) = snapshot;
                state.lr_scale = 0.5;
            }
            Err(e) => {
                (state.model, state.optimizer) = snapshot;
                return Err(e);
            }
        }
    }
    Ok(state)
}

fn run_epoch<T: Real>(state: &mut TrainState<T>, config: &ExperimentConfig, data: &Dataset, epoch: usize) -> Result<EpochMetrics> {
    let mut rng = epoch_rng(config.seed, epoch);
    let lr = config.optimizer.lr_at(epoch, config.epochs) * state.lr_scale;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    let sigma2 = config.sigma2()?;
    let sampler = config.sampler()?;
    let gated = config.variant == Variant::VlVfe;
    let diverged = || Error::TrainingDiverged { epoch: epoch + 1, last_good_epoch: epoch };

    let (mut ce, mut kl, mut total, mut active) = (0.0, 0.0, 0.0, 0.0);
    for chunk in order.chunks(config.batch_size) {
        let (x, y) = data.gather::<T>(chunk);
        state.model.zero_grad();
        let terms = if gated {
            vl_vib_loss(&mut state.model, &x, &y, &sampler, config.beta, config.samples, &mut rng, true)
        } else {
            vib_loss(&mut state.model, &x, &y, sigma2, config.beta, config.samples, &mut rng, true)
        };
        let terms = match terms {
            Ok(t) if t.total.is_finite() => t,
            Ok(_) | Err(Error::ModelContractViolation(_)) => return Err(diverged()),
            Err(e) => return Err(e),
        };
        optimizer_step(state, lr);
        let w = chunk.len() as f64;
        ce += terms.cross_entropy * w;
        kl += terms.kl_total * w;
        total += terms.total * w;
        active += state.model.last_active_mean * w;
    }

    let newly_pruned = match &mut state.model.head {
        Head::Static(layer) if config.variant == Variant::Vfe => layer.prune_static(T::of(config.gamma0)),
        _ => 0,
    };
    let n = data.len() as f64;
    let active_dims = if gated { active / n } else { state.model.static_active() as f64 };
    Ok(EpochMetrics {
        epoch: epoch + 1,
        cross_entropy: ce / n,
        kl_total: kl / n,
        total: total / n,
        beta: config.beta,
        active_dims,
        sigma2: if gated { Sigma2Record::Range(config.sigma2_range) } else { Sigma2Record::Fixed(sigma2) },
        lr,
        newly_pruned,
    })
}

fn optimizer_step<T: Real>(state: &mut TrainState<T>, lr: f64) {
    if let Some(layer) = state.model.head.bottleneck_mut() {
        layer.mask_pruned_grads();
    }
    let step = state.optimizer.begin_step(lr);
    let optimizer = &mut state.optimizer;
    let mut index = 0;
    state.model.visit_params(&mut |_, p| {
        optimizer.update(index, p, step);
        index += 1;
    });
    if let Some(layer) = state.model.head.bottleneck_mut() {
        layer.clamp_gamma();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Task;

    /// Two-cluster toy images: class = sign of the mean pixel.
    pub(crate) fn toy_data(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label: u16 = rng.random_range(0..10);
            let centre = label as f32 / 4.5 - 1.0;
            images.extend((0..784).map(|k| centre * ((k % 7) as f32 / 3.0 - 1.0) + rng.random_range(-0.3..0.3)));
            labels.push(label);
        }
        Dataset::new([1, 28, 28], images, labels).unwrap()
    }

    fn toy_config(variant: Variant) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(Task::Mnist);
        c.variant = variant;
        c.n_initial = 16;
        c.epochs = 4;
        c.batch_size = 32;
        c.seed = 5;
        c
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = toy_data(256, 1);
        let c = toy_config(Variant::Vfe);
        let a = train_vfe::<f32>(&c, &data).unwrap();
        let b = train_vfe::<f32>(&c, &data).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.pruned_history, b.pruned_history);
        let c = toy_config(Variant::VlVfe);
        let a = train_vl_vfe::<f32>(&c, &data).unwrap();
        let b = train_vl_vfe::<f32>(&c, &data).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let data = toy_data(128, 2);
        let c = toy_config(Variant::Vfe);
        let full = train::<f32>(&c, &data, TrainState::new(&c).unwrap(), &mut |_| Ok(())).unwrap();
        let partial = train_until::<f32>(&c, &data, TrainState::new(&c).unwrap(), 2, &mut |_| Ok(())).unwrap();
        assert_eq!(partial.epoch, 2);
        let resumed = train::<f32>(&c, &data, partial, &mut |_| Ok(())).unwrap();
        assert_eq!(full.trace, resumed.trace);
        assert_eq!(full.model.gamma(), resumed.model.gamma());
    }

    #[test]
    fn pruning_is_monotone_and_beta_zero_never_prunes() {
        let data = toy_data(256, 3);
        let mut c = toy_config(Variant::Vfe);
        c.beta = 0.05;
        c.gamma0 = 0.5;
        let s = train_vfe::<f32>(&c, &data).unwrap();
        for pair in s.pruned_history.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                assert!(!a || *b);
            }
        }
        c.beta = 0.0;
        c.gamma0 = 0.0;
        let s = train_vfe::<f32>(&c, &data).unwrap();
        assert!(s.pruned_history.iter().flatten().all(|&p| !p));
        assert_eq!(s.trace.len(), 4);
    }

    #[test]
    fn huge_beta_prunes_nearly_everything() {
        let data = toy_data(256, 4);
        let mut c = toy_config(Variant::Vfe);
        c.beta = 1.0;
        c.epochs = 16;
        c.optimizer.lr = 2e-2;
        c.optimizer.lr_decay = 1.0;
        let s = train_vfe::<f32>(&c, &data).unwrap();
        assert!(s.model.static_active() <= 2, "{} still active {:?} {:?}", s.model.static_active(), s.model.gamma(), s.trace);
    }

    #[test]
    fn gated_training_never_prunes() {
        let data = toy_data(128, 5);
        let mut c = toy_config(Variant::VlVfe);
        c.beta = 0.05;
        let s = train_vl_vfe::<f32>(&c, &data).unwrap();
        assert!(s.model.pruned_mask().iter().all(|&p| !p));
    }

    #[test]
    fn divergence_rolls_back_then_aborts() {
        let data = toy_data(64, 6);
        let mut c = toy_config(Variant::Vfe);
        c.epochs = 3;
        let mut state = TrainState::<f32>::new(&c).unwrap();
        // poison the decoder so every loss is NaN
        state.model.server.visit_params("s", &mut |_, p| p.value.fill(f32::NAN));
        let err = train(&c, &data, state, &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { epoch: 1, last_good_epoch: 0 }), "{err}");
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let data = toy_data(8, 7);
        assert!(train_vfe::<f32>(&toy_config(Variant::VlVfe), &data).is_err());
        assert!(train_vl_vfe::<f32>(&toy_config(Variant::Vfe), &data).is_err());
    }
}
