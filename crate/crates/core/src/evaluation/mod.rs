//! Experiment suites: accuracy under noise, sweeps, dynamic channels and
//! prior ablations.

pub mod ablation;
pub mod accuracy;
pub mod dynamic;
pub mod features;
pub mod plot;
pub mod quant;
pub mod record;
pub mod sweep;

pub use ablation::{prior_ablation, AblationResult};
pub use accuracy::{eval_accuracy, eval_accuracy_mismatched, AccuracyEstimate, EVAL_BATCH};
pub use dynamic::dynamic_channel_eval;
pub use features::{received_features, write_features_csv};
pub use plot::{plot_dynamic, plot_rate_distortion};
pub use quant::{quantization_candidates, search_quantization};
pub use record::{record_latency_ms, RunRecord, TrainPsnr};
pub use sweep::{rate_distortion_sweep, read_rows, spearman, sweep_points, ResultStore, SweepReport, SweepRow};
