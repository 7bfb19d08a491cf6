//! `gridcast` command-line interface.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridcast::benchmark::{run_benchmark, BenchmarkConfig};
use gridcast::checkpoint;
use gridcast::json::to_canonical_json;
use gridcast::linalg::Vector;
use gridcast::measurement::{fmt_real, generate_state_series_with, GridTopology, LoadProfile, SeriesShape, StateSeries};
use gridcast::metrics::{evaluate, write_profile_csv, Predictor, ProbeSpec};
use gridcast::model::{Architecture, ConvSpec, ModelConfig};
use gridcast::training::{gradcheck_with, split_dataset, train, Forecaster, SplitSpec, Stencil, TrainOptions};
use gridcast::Error;

use config::RunConfig;

#[derive(Debug)]
pub enum Failure {
    /// Invalid arguments or configuration (exit 2).
    Usage(String),
    /// Unreadable or malformed data (exit 3).
    Data(String),
    /// Missing, corrupt or incompatible checkpoint (exit 4).
    Mismatch(String),
    /// A check ran and failed, or an output could not be written (exit 1).
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Mismatch(m) | Failure::Check(m) => m,
        }
    }
}

/// Classifies a library error raised after inputs were loaded.
fn compute_failure(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::SequenceTooShort { .. } | Error::IndexOutOfRange { .. } => {
            Failure::Usage(e.to_string())
        }
        Error::Shape { .. } | Error::Layout(_) => Failure::Mismatch(e.to_string()),
        _ => Failure::Check(e.to_string()),
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Check(format!("cannot write {}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "gridcast", version, about = "Sequence-to-sequence forecasting of power-system states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long = "arch")]
    architecture: Option<Architecture>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long = "hidden")]
    hidden_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long = "dropout")]
    dropout_rate: Option<f64>,
    #[arg(long)]
    conv_filters: Option<usize>,
    #[arg(long)]
    conv_kernel: Option<usize>,
    #[arg(long)]
    conv_stride: Option<usize>,
    /// Feed ground truth instead of predictions to the decoder during training.
    #[arg(long)]
    teacher_forcing: bool,
}

#[derive(Args, Clone)]
struct FitFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Rescale each batch gradient to at most this L2 norm.
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args, Clone)]
struct SplitFlags {
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    test_frac: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a state series and write it as CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        buses: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        profile: Option<LoadProfile>,
        /// Standard deviation of the reading jitter.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model and write its checkpoint and report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        split: SplitFlags,
    },
    /// Score a checkpoint on the test segment of a series.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        split: SplitFlags,
        /// Test-segment index of a one-step snapshot.
        #[arg(long)]
        snapshot_t: Option<usize>,
        /// Bus (1-based) for the multi-step trace.
        #[arg(long)]
        bus: Option<usize>,
        /// Test-segment index of the first traced step.
        #[arg(long)]
        origin: Option<usize>,
        #[arg(long)]
        trace_steps: Option<usize>,
    },
    /// Forecast from the most recent window of a series.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on toy models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check one architecture instead of all four.
        #[arg(long = "arch")]
        architecture: Option<Architecture>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Finite-difference step; defaults depend on the architecture.
        #[arg(long = "step")]
        fd_step: Option<f64>,
    },
    /// Repeated training of several architectures across sequence lengths.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "archs", value_delimiter = ',')]
        architectures: Option<Vec<Architecture>>,
        #[arg(long, value_delimiter = ',')]
        seq_lens: Option<Vec<usize>>,
        #[arg(long = "reps")]
        repetitions: Option<usize>,
        #[arg(long = "hidden")]
        hidden_size: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long = "dropout")]
        dropout_rate: Option<f64>,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        split: SplitFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { common, buses, steps, profile, noise } => {
            let file = config::load(common.config.as_deref())?;
            cmd_generate(&common, &file, buses, steps, profile, noise)
        }
        Command::Train { common, data, model, fit, split } => {
            let file = config::load(common.config.as_deref())?;
            cmd_train(&common, &file, data, &model, &fit, &split)
        }
        Command::Evaluate { common, checkpoint, data, split, snapshot_t, bus, origin, trace_steps } => {
            let file = config::load(common.config.as_deref())?;
            let probes = ProbeSpec {
                snapshot_t: snapshot_t.or(file.snapshot_t),
                trace: bus.or(file.bus).map(|b| {
                    (
                        b,
                        origin.or(file.origin).unwrap_or(0),
                        trace_steps.or(file.trace_steps).unwrap_or(50),
                    )
                }),
            };
            cmd_evaluate(&common, &file, checkpoint, data, &split, probes)
        }
        Command::Forecast { common, checkpoint, data, horizon } => {
            let file = config::load(common.config.as_deref())?;
            cmd_forecast(&common, &file, checkpoint, data, horizon)
        }
        Command::Gradcheck { common, architecture, threshold, trials, fd_step } => {
            let file = config::load(common.config.as_deref())?;
            cmd_gradcheck(&common, &file, architecture, threshold, trials, fd_step)
        }
        Command::Benchmark {
            common,
            data,
            architectures,
            seq_lens,
            repetitions,
            hidden_size,
            depth,
            horizon,
            dropout_rate,
            fit,
            split,
        } => {
            let file = config::load(common.config.as_deref())?;
            let defaults = BenchmarkConfig::default();
            let bench = BenchmarkConfig {
                architectures: architectures.or(file.architectures.clone()).unwrap_or(defaults.architectures),
                seq_lens: seq_lens.or(file.seq_lens.clone()).unwrap_or(defaults.seq_lens),
                repetitions: repetitions.or(file.repetitions).unwrap_or(defaults.repetitions),
                base_seed: common.seed.or(file.seed).unwrap_or(defaults.base_seed),
                hidden_size: hidden_size.or(file.hidden_size).unwrap_or(defaults.hidden_size),
                depth: depth.or(file.depth).unwrap_or(defaults.depth),
                horizon: horizon.or(file.horizon).unwrap_or(defaults.horizon),
                dropout_rate: dropout_rate.or(file.dropout_rate).unwrap_or(defaults.dropout_rate),
                split: split_spec(&split, &file)?,
                epochs: fit.epochs.or(file.epochs).unwrap_or(defaults.epochs),
                batch_size: fit.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
                lr: fit.lr.or(file.lr).unwrap_or(defaults.lr),
                patience: fit.patience.or(file.patience).unwrap_or(defaults.patience),
            };
            cmd_benchmark(&common, &file, data, &bench)
        }
    }
}

fn out_dir(common: &Common, file: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
    Ok(dir)
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::Usage(format!("missing required --{flag}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(io_failure(path))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> gridcast::Result<()>) -> Result<(), Failure> {
    let file = File::create(path).map_err(io_failure(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| Failure::Check(format!("cannot write {}: {e}", path.display())))?;
    w.flush().map_err(io_failure(path))
}

fn load_series(path: &Path) -> Result<StateSeries, Failure> {
    let file = File::open(path).map_err(|e| Failure::Data(format!("cannot open {}: {e}", path.display())))?;
    StateSeries::read_csv(BufReader::new(file)).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Forecaster, Failure> {
    if !path.is_file() {
        return Err(Failure::Mismatch(format!("checkpoint {} not found", path.display())));
    }
    checkpoint::load(path).map_err(|e| Failure::Mismatch(format!("{}: {e}", path.display())))
}

fn ensure_compatible(f: &Forecaster, data: &StateSeries) -> Result<(), Failure> {
    let want = f.model.config().input_dim;
    if want != data.state_dim() {
        return Err(Failure::Mismatch(format!(
            "checkpoint expects {want} state variables but the data has {}",
            data.state_dim()
        )));
    }
    Ok(())
}

fn split_spec(flags: &SplitFlags, file: &RunConfig) -> Result<SplitSpec, Failure> {
    let d = SplitSpec::default();
    let spec = SplitSpec {
        train_frac: flags.train_frac.or(file.train_frac).unwrap_or(d.train_frac),
        val_frac: flags.val_frac.or(file.val_frac).unwrap_or(d.val_frac),
        test_frac: flags.test_frac.or(file.test_frac).unwrap_or(d.test_frac),
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(spec)
}

fn cmd_generate(
    common: &Common,
    file: &RunConfig,
    buses: Option<usize>,
    steps: Option<usize>,
    profile: Option<LoadProfile>,
    noise: Option<f64>,
) -> Result<(), Failure> {
    let buses = buses.or(file.buses).unwrap_or(6);
    let steps = steps.or(file.steps).unwrap_or(2000);
    let profile = profile.or(file.profile).unwrap_or(LoadProfile::SinusoidalLoad);
    let shape = SeriesShape {
        noise_sigma: noise.or(file.noise).unwrap_or(SeriesShape::default().noise_sigma),
        ..SeriesShape::default()
    };
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let topology = GridTopology::chain(buses).map_err(|e| Failure::Usage(e.to_string()))?;
    let series = generate_state_series_with(&topology, steps, seed, profile, &shape)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let path = out_dir(common, file)?.join("states.csv");
    write_with(&path, |w| series.write_csv(w))?;
    let (lo, hi) = series.magnitude_range();
    println!(
        "wrote {}: T={} K={} |V| min={lo:.6} max={hi:.6}",
        path.display(),
        series.len(),
        series.bus_count()
    );
    Ok(())
}

fn model_config(flags: &ModelFlags, file: &RunConfig, input_dim: usize, seed: u64) -> Result<ModelConfig, Failure> {
    let arch = flags.architecture.or(file.architecture).unwrap_or(Architecture::Bigru);
    let mut cfg = ModelConfig::standard(
        arch,
        input_dim,
        flags.hidden_size.or(file.hidden_size).unwrap_or(16),
        flags.seq_len.or(file.seq_len).unwrap_or(5),
        flags.horizon.or(file.horizon).unwrap_or(5),
        seed,
    );
    cfg.depth = flags.depth.or(file.depth).unwrap_or(cfg.depth);
    cfg.dropout_rate = flags.dropout_rate.or(file.dropout_rate).unwrap_or(cfg.dropout_rate);
    cfg.teacher_forcing = flags.teacher_forcing || file.teacher_forcing.unwrap_or(false);
    if let Some(a) = file.rnn_activation {
        cfg.rnn_activation = a;
    }
    if let Some(conv) = cfg.conv.as_mut() {
        *conv = ConvSpec {
            filters: flags.conv_filters.or(file.conv_filters).unwrap_or(conv.filters),
            kernel: flags.conv_kernel.or(file.conv_kernel).unwrap_or(conv.kernel),
            stride: flags.conv_stride.or(file.conv_stride).unwrap_or(conv.stride),
        };
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(
    common: &Common,
    file: &RunConfig,
    data: Option<PathBuf>,
    model: &ModelFlags,
    fit: &FitFlags,
    split: &SplitFlags,
) -> Result<(), Failure> {
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let spec = split_spec(split, file)?;
    let data_path = required(data.or(file.data.clone()), "data")?;
    let series = load_series(&data_path)?;
    let cfg = model_config(model, file, series.state_dim(), seed)?;
    let d = TrainOptions::default();
    let opts = TrainOptions {
        epochs: fit.epochs.or(file.epochs).unwrap_or(d.epochs),
        batch_size: fit.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        lr: fit.lr.or(file.lr).unwrap_or(d.lr),
        patience: fit.patience.or(file.patience).unwrap_or(d.patience),
        seed,
        clip_norm: fit.clip_norm.or(file.clip_norm),
        standardize: true,
    };
    let dir = out_dir(common, file)?;
    let (forecaster, report) = train(&cfg, &series, &spec, &opts).map_err(compute_failure)?;
    for (i, (loss, val)) in report.epoch_losses.iter().zip(&report.val_nrmse).enumerate() {
        println!("epoch {} loss {loss:.6e} val_nrmse {val:.6e}", i + 1);
    }
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&forecaster, &ckpt).map_err(|e| Failure::Check(e.to_string()))?;
    let json = report.to_canonical_json().map_err(|e| Failure::Check(e.to_string()))?;
    write_file(&dir.join("report.json"), json.as_bytes())?;
    println!(
        "{} params={} best_epoch={} test_nrmse={} wall_clock={:.2}s",
        report.architecture,
        report.param_count,
        report.best_epoch,
        fmt_real(report.test_nrmse),
        report.wall_clock_seconds
    );
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    file: &RunConfig,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    split: &SplitFlags,
    probes: ProbeSpec,
) -> Result<(), Failure> {
    let spec = split_spec(split, file)?;
    let forecaster = load_checkpoint(&required(checkpoint.or(file.checkpoint.clone()), "checkpoint")?)?;
    let series = load_series(&required(data.or(file.data.clone()), "data")?)?;
    ensure_compatible(&forecaster, &series)?;
    let cfg = forecaster.model.config();
    let parts = split_dataset(&series, &spec, cfg.seq_len + cfg.horizon).map_err(compute_failure)?;
    let result = evaluate(&forecaster, &parts.test, cfg.horizon, probes).map_err(compute_failure)?;

    let dir = out_dir(common, file)?;
    let json = to_canonical_json(&result).map_err(|e| Failure::Check(e.to_string()))?;
    write_file(&dir.join("eval.json"), json.as_bytes())?;
    write_with(&dir.join("horizon_profile.csv"), |w| write_profile_csv(&result.per_horizon_nrmse, w))?;
    write_with(&dir.join("variable_profile.csv"), |w| {
        writeln!(w, "variable,nrmse")?;
        for (i, v) in result.per_variable_nrmse.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, fmt_real(*v))?;
        }
        Ok(())
    })?;
    if let Some(s) = &result.snapshot {
        write_with(&dir.join("snapshot.csv"), |w| s.write_csv(w))?;
    }
    if let Some(t) = &result.bus_trace {
        write_with(&dir.join("bus_trace.csv"), |w| t.write_csv(w))?;
    }
    println!("test_nrmse {}", fmt_real(result.overall_nrmse));
    Ok(())
}

fn cmd_forecast(
    common: &Common,
    file: &RunConfig,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    horizon: Option<usize>,
) -> Result<(), Failure> {
    let forecaster = load_checkpoint(&required(checkpoint.or(file.checkpoint.clone()), "checkpoint")?)?;
    let series = load_series(&required(data.or(file.data.clone()), "data")?)?;
    ensure_compatible(&forecaster, &series)?;
    let horizon = horizon.or(file.horizon).unwrap_or(forecaster.model.config().horizon);
    if horizon == 0 {
        return Err(Failure::Usage("--horizon must be at least 1".into()));
    }
    let l = forecaster.seq_len();
    if series.len() < l {
        return Err(Failure::Usage(format!(
            "series has {} steps but the model needs a window of {l}",
            series.len()
        )));
    }
    let window: Vec<Vector> = series.states()[series.len() - l..].to_vec();
    let pred = forecaster.predict(&window, horizon).map_err(compute_failure)?;
    let path = out_dir(common, file)?.join("forecast.csv");
    let header = series.header().replacen('t', "step", 1);
    write_with(&path, |w| {
        writeln!(w, "{header}")?;
        for (k, v) in pred.iter().enumerate() {
            let row: Vec<String> = v.iter().map(|x| fmt_real(*x)).collect();
            writeln!(w, "{},{}", k + 1, row.join(","))?;
        }
        Ok(())
    })?;
    println!("wrote {} ({horizon} steps)", path.display());
    Ok(())
}

/// Default toy model for `gradcheck`, and the step that suits its stencil.
fn toy_config(arch: Architecture, seed: u64) -> (ModelConfig, f64) {
    let mut cfg = ModelConfig::standard(arch, 4, 5, 6, 2, seed);
    cfg.depth = 2;
    cfg.dropout_rate = 0.1;
    if let Some(conv) = cfg.conv.as_mut() {
        conv.filters = 2;
        conv.kernel = 3;
    }
    let step = if arch == Architecture::ConvBigru { 3e-4 } else { 1e-3 };
    (cfg, step)
}

fn cmd_gradcheck(
    common: &Common,
    file: &RunConfig,
    architecture: Option<Architecture>,
    threshold: Option<f64>,
    trials: Option<usize>,
    fd_step: Option<f64>,
) -> Result<(), Failure> {
    let threshold = threshold.or(file.threshold).unwrap_or(1e-4);
    let trials = trials.or(file.trials).unwrap_or(20);
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let archs: Vec<Architecture> = match architecture.or(file.architecture) {
        Some(a) => vec![a],
        None => Architecture::ALL.to_vec(),
    };
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for arch in archs {
        let (cfg, default_step) = toy_config(arch, seed);
        let step = fd_step.or(file.fd_step).unwrap_or(default_step);
        let report = gradcheck_with(&cfg, step, trials, seed, Stencil::FourPoint).map_err(|e| Failure::Usage(e.to_string()))?;
        let pass = report.max_relative_error < threshold;
        println!(
            "{arch} max_relative_error {:.3e} worst {} ({} entries) {}",
            report.max_relative_error,
            report.worst_tensor,
            report.params_checked,
            if pass { "ok" } else { "FAIL" }
        );
        if !pass {
            failed.push(arch.to_string());
        }
        reports.push((arch.to_string(), report));
    }
    if common.out.is_some() || file.out.is_some() {
        let map: std::collections::BTreeMap<_, _> = reports.into_iter().collect();
        let json = to_canonical_json(&map).map_err(|e| Failure::Check(e.to_string()))?;
        write_file(&out_dir(common, file)?.join("gradcheck.json"), json.as_bytes())?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check above threshold {threshold:e} for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_benchmark(common: &Common, file: &RunConfig, data: Option<PathBuf>, bench: &BenchmarkConfig) -> Result<(), Failure> {
    bench.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let series = load_series(&required(data.or(file.data.clone()), "data")?)?;
    let dir = out_dir(common, file)?;
    let result = run_benchmark(bench, &series).map_err(compute_failure)?;
    write_with(&dir.join("table.csv"), |w| result.write_table_csv(w))?;
    write_with(&dir.join("runs.csv"), |w| result.write_runs_csv(w))?;
    result
        .write_table_csv(std::io::stdout().lock())
        .map_err(|e| Failure::Check(e.to_string()))?;
    Ok(())
}
