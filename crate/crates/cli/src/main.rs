use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ibcomm::channel::{psnr_to_sigma2, PilotMode, PEAK_POWER};
use ibcomm::checkpoint::load_model;
use ibcomm::config::ExperimentConfig;
use ibcomm::data::{self, fetch};
use ibcomm::evaluation::{
    dynamic_channel_eval, plot_dynamic, plot_rate_distortion, rate_distortion_sweep, read_rows, received_features,
    write_features_csv, ResultStore, RunRecord,
};
use ibcomm::models::{Task, Variant};
use ibcomm::run::{self, execute, load_split, run_id, OpenMode, CONFIG_SNAPSHOT};
use ibcomm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "ibcomm", version, about = "Train and evaluate task-oriented feature encoders over noisy channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model into a run directory.
    Train(TrainArgs),
    /// Train every point of a beta grid (plus baselines) and collect a CSV.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint and print its record as JSON.
    Eval(EvalArgs),
    /// Download and install a dataset.
    FetchData(FetchArgs),
    /// Render a results CSV as an SVG figure.
    Plot(PlotArgs),
}

#[derive(Args)]
struct Overrides {
    /// Override `beta`.
    #[arg(long)]
    beta: Option<f64>,
    /// Override `psnr_db`.
    #[arg(long)]
    psnr: Option<f64>,
    /// Override `epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Generic override, e.g. `--set optimizer.lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn list(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(b) = self.beta {
            out.push(format!("beta={b:e}"));
        }
        if let Some(p) = self.psnr {
            out.push(format!("psnr_db={p:?}"));
        }
        if let Some(e) = self.epochs {
            out.push(format!("epochs={e}"));
        }
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        out.extend(self.set.iter().cloned());
        out
    }
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Run directory (default: `<output_dir>/<run id>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue a partially trained run in the same directory.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// Sweep directory (default: `<output_dir>/sweep`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG figure next to the CSV.
    #[arg(long)]
    plot: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Test PSNR in dB (default: the training PSNR).
    #[arg(long)]
    psnr: Option<f64>,
    /// Channel knowledge: `known`, `blind` or `m=<pilots>`.
    #[arg(long, default_value = "known")]
    mode: String,
    /// Noise trials over the test set.
    #[arg(long)]
    trials: Option<usize>,
    /// Dataset root (default: IBCOMM_DATA, then the run's `data_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate on the first N test examples only.
    #[arg(long)]
    limit: Option<usize>,
    /// Write the received features of the first 1000 test examples here.
    #[arg(long)]
    export_features: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    /// mnist, cifar10 or tiny-imagenet.
    task: String,
    /// URL or local archive to install from.
    #[arg(long)]
    source: Option<String>,
    /// Dataset root (default: IBCOMM_DATA, then ./data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reinstall even when present.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PlotArgs {
    csv: PathBuf,
    /// Output SVG (default: the CSV path with an .svg extension).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `rd` for accuracy vs latency, `dynamic` for latency/accuracy vs PSNR.
    #[arg(long, default_value = "rd")]
    kind: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::FetchData(a) => cmd_fetch(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidArchitecture(_) | Error::RunDirectoryOccupied(_) => {
            EXIT_USAGE
        }
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> ibcomm::Result<ExperimentConfig> {
    ExperimentConfig::load(path, &overrides.list())
}

fn cmd_train(a: TrainArgs) -> ibcomm::Result<()> {
    let config = load_config(&a.config, &a.overrides)?;
    let dir = a.out.unwrap_or_else(|| config.output_dir.join(run_id(&config)));
    let mode = match (a.resume, a.force) {
        (true, _) => OpenMode::Resume,
        (_, true) => OpenMode::Force,
        _ => OpenMode::Fresh,
    };
    if mode == OpenMode::Fresh && dir.join(CONFIG_SNAPSHOT).exists() {
        return Err(Error::RunDirectoryOccupied(dir));
    }
    let split = load_split(&config)?;
    let (_, record) = execute(&config, &split, &dir, mode)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    log::info!("run written to {}", dir.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> ibcomm::Result<()> {
    let config = load_config(&a.config, &a.overrides)?;
    let dir = a.out.unwrap_or_else(|| config.output_dir.join("sweep"));
    std::fs::create_dir_all(&dir)?;
    let dynamic = config.variant == Variant::VlVfe;
    let store = ResultStore::new(dir.join(if dynamic { "dynamic.csv" } else { "rd.csv" }));
    let split = load_split(&config)?;
    let grid = config.eval_psnr_db.clone();
    let pilots = config.pilots;
    let mut runner = |c: &ExperimentConfig| -> ibcomm::Result<Vec<RunRecord>> {
        let id = run_id(c);
        let (mut state, record) = execute(c, &split, &dir.join("runs").join(&id), OpenMode::Resume)?;
        if !dynamic {
            return Ok(vec![record]);
        }
        // the gated model is evaluated under the configured channel
        // knowledge; static baselines need none
        let mode = if c.variant == Variant::VlVfe { pilots } else { PilotMode::Known };
        dynamic_channel_eval(&mut state.model, c, &split.test, &grid, mode, &id)
    };
    let report = rate_distortion_sweep(&config, &store, &mut runner)?;
    log::info!(
        "sweep: {} trained, {} already present, {} failed; results in {}",
        report.completed.len(),
        report.skipped.len(),
        report.failed.len(),
        store.path.display()
    );
    if a.plot {
        let rows = store.load()?;
        let svg = store.path.with_extension("svg");
        if dynamic { plot_dynamic(&rows, &svg)? } else { plot_rate_distortion(&rows, &svg)? }
        log::info!("figure written to {}", svg.display());
    }
    if !report.failed.is_empty() {
        return Err(Error::invalid(format!("{} sweep point(s) failed; see {}", report.failed.len(), store.failures_path().display())));
    }
    Ok(())
}

fn parse_mode(s: &str) -> ibcomm::Result<PilotMode> {
    match s {
        "known" => Ok(PilotMode::Known),
        "blind" => Ok(PilotMode::Blind),
        _ => {
            let m = s
                .strip_prefix("m=")
                .and_then(|m| m.parse::<usize>().ok())
                .ok_or_else(|| Error::invalid(format!("--mode `{s}`: expected known, blind or m=<pilots>")))?;
            if m < 2 {
                return Err(Error::invalid(format!("--mode {s}: needs at least 2 pilots")));
            }
            Ok(PilotMode::Pilots { m })
        }
    }
}

fn cmd_eval(a: EvalArgs) -> ibcomm::Result<()> {
    let mode = parse_mode(&a.mode)?;
    let (mut model, header) = load_model::<f32>(&a.checkpoint)?;
    let task: Task = header.spec.arch.task;
    let snapshot = a.checkpoint.parent().map(|p| p.join(CONFIG_SNAPSHOT)).filter(|p| p.exists());
    let mut config = match snapshot {
        Some(p) => ExperimentConfig::load(&p, &[])?,
        None => {
            let mut c = ExperimentConfig::defaults(task);
            c.variant = header.spec.variant;
            c.prior = header.spec.prior;
            c.bits_per_dim = header.spec.bits_per_dim;
            c
        }
    };
    if let Some(t) = a.trials {
        config.eval_trials = t;
    }
    if a.limit.is_some() {
        config.test_limit = a.limit;
    }
    let psnr = a.psnr.unwrap_or(config.psnr_db);
    let root = a.data.unwrap_or_else(|| data::data_root(&config.data_dir));
    let test = data::load(task, &root)?.test.truncated(config.test_limit);
    let id = a.checkpoint.display().to_string();
    let record = if mode == PilotMode::Known {
        run::evaluate_record(&mut model, &config, &test, psnr, &id)?
    } else {
        dynamic_channel_eval(&mut model, &config, &test, &[psnr], mode, &id)?.remove(0)
    };
    if let Some(path) = a.export_features {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (features, labels) = received_features(&mut model, &test, psnr_to_sigma2(psnr, PEAK_POWER)?, 1000, &mut rng);
        write_features_csv(&path, &features, &labels)?;
        log::info!("received features written to {}", path.display());
    }
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn cmd_fetch(a: FetchArgs) -> ibcomm::Result<()> {
    let task: Task = a.task.parse()?;
    let root = a.data.unwrap_or_else(|| data::data_root(Path::new("data")));
    let files = fetch::fetch(task, &root, a.source.as_deref(), a.force)?;
    if files.is_empty() {
        println!("{task} already installed under {}", root.display());
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> ibcomm::Result<()> {
    let rows = read_rows(&a.csv)?;
    let out = a.out.unwrap_or_else(|| a.csv.with_extension("svg"));
    match a.kind.as_str() {
        "rd" => plot_rate_distortion(&rows, &out)?,
        "dynamic" => plot_dynamic(&rows, &out)?,
        k => return Err(Error::invalid(format!("--kind `{k}`: expected rd or dynamic"))),
    }
    println!("{}", out.display());
    Ok(())
}
