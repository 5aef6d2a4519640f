use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Bad input from the caller: flags, config files or model settings.
/// Reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "cnnqoe", version, about = "Continuous QoE prediction with causal dilated convolutions")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic trace CSVs.
    Synth(SynthArgs),
    /// Train a model on a directory of traces.
    Train(RunArgs),
    /// Score a model, or retrain its configuration per fold of a split protocol.
    Evaluate(EvaluateArgs),
    /// Dump per-second predictions for one trace.
    Predict(PredictArgs),
    /// Time single-window inference.
    Bench(BenchArgs),
    /// Print a model's layers and complexity.
    Inspect(InspectArgs),
    /// Rank architectures over the kernel size, depth and width grid.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of independent traces. Ignored with --contents/--patterns.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Trace length in seconds.
    #[arg(long, default_value_t = 120, value_parser = clap::value_parser!(u64).range(1..))]
    duration: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cross this many quality schedules with --patterns stall patterns.
    #[arg(long, requires = "patterns", value_parser = clap::value_parser!(u64).range(1..))]
    contents: Option<u64>,
    #[arg(long, requires = "contents", value_parser = clap::value_parser!(u64).range(1..))]
    patterns: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Settings shared by commands that train. Each flag overrides the
/// config-file key of the same name.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kernel_size: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    filters: Option<String>,
    /// proposed or original_tcn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    /// Input window in seconds; defaults to the receptive field.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Early-stopping patience in epochs; needs validation traces.
    #[arg(long)]
    patience: Option<String>,
    /// Directory of trace CSVs.
    #[arg(long)]
    traces: Option<String>,
    #[arg(long)]
    val_traces: Option<String>,
    /// holdout, leave_one_out, random_80_20 or random_fraction.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    train_fraction: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Accept configurations outside the recommended ranges.
    #[arg(long)]
    override_receptive_field: bool,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let pairs: [(&'static str, Option<String>); 16] = [
            ("kernel_size", self.kernel_size.clone()),
            ("blocks", self.blocks.clone()),
            ("filters", self.filters.clone()),
            ("variant", self.variant.clone()),
            ("dropout", self.dropout.clone()),
            ("window", self.window.clone()),
            ("learning_rate", self.learning_rate.clone()),
            ("epochs", self.epochs.map(|e| e.to_string())),
            ("batch_size", self.batch_size.clone()),
            ("seed", self.seed.clone()),
            ("optimizer", self.optimizer.clone()),
            ("patience", self.patience.clone()),
            ("traces", self.traces.clone()),
            ("val_traces", self.val_traces.clone()),
            ("protocol", self.protocol.clone()),
            ("train_fraction", self.train_fraction.clone()),
        ];
        let mut out: Vec<_> = pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
        if let Some(d) = &self.out_dir {
            out.push(("out_dir", d.clone()));
        }
        out
    }

    fn resolve(&self) -> anyhow::Result<config::RunConfig> {
        config::RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Trained model file; its normalization sidecar must sit next to it.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Trace CSV to predict.
    #[arg(long)]
    trace: PathBuf,
    /// Output CSV; defaults to `<trace id>.pred.csv` next to the model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Timed repetitions (at least 30).
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(30..))]
    reps: u64,
    #[arg(long, default_value_t = 50)]
    warmup: u64,
    /// Window length; defaults to the model's receptive field.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    window: Option<u64>,
    /// Also write the measurements as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Worker threads for candidate training.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a.resolve()?, a.override_receptive_field),
        Command::Evaluate(a) => {
            commands::evaluate(&a.model, &a.run.resolve()?, a.run.override_receptive_field)
        }
        Command::Predict(a) => commands::predict(&a.model, &a.trace, a.out.as_deref()),
        Command::Bench(a) => commands::bench(&a),
        Command::Inspect(a) => commands::inspect(&a.model),
        Command::Grid(a) => commands::grid(&a.run.resolve()?, a.jobs as usize),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            let usage = e.chain().any(|c| {
                c.downcast_ref::<UsageError>().is_some()
                    || matches!(c.downcast_ref::<cnnqoe::QoeError>(), Some(cnnqoe::QoeError::Config(_)))
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
