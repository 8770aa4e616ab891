use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use simcse_core::eval::DEFAULT_HEATMAP_BINS;
use simcse_core::experiments::TableKind;
use simcse_core::objectives::Task;

mod commands;
mod config;
mod error;

use commands::{EvalArgs, ExperimentArgs, RunArgs};
use error::{CliError, CliResult};

/// Train, evaluate and inspect SimCSE mini-BERT sentence encoders.
///
/// Any config value can be overridden with a dotted flag, e.g. `--optim.lr 3e-5`
/// or `--pipeline.sup.epochs=2`.
#[derive(Debug, Parser)]
#[command(name = "simcse-forge", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunOpts {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Seed for every stage; beats the config file and SIMCSE_FORGE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Starting checkpoint; replaces the config's `init`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write outputs here instead of a fresh directory under output_dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Procedure {
    Single,
    Multitask,
    UnsupSimcse,
    SupSimcse,
    TwoTier,
    Transfer,
}

impl Procedure {
    fn name(self) -> &'static str {
        match self {
            Procedure::Single => "single",
            Procedure::Multitask => "multitask",
            Procedure::UnsupSimcse => "unsup-simcse",
            Procedure::SupSimcse => "sup-simcse",
            Procedure::TwoTier => "two-tier",
            Procedure::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a training procedure and write checkpoint, metrics and manifest.
    Train {
        procedure: Procedure,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Score a checkpoint on a dataset; STS also writes heatmap.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// sst, paraphrase or sts.
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Directory for heatmap.csv; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_HEATMAP_BINS)]
        bins: usize,
        /// Skip malformed rows instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Print the report as TSV.
        #[arg(long)]
        tsv: bool,
    },
    /// Write pooled embeddings as TSV: sentence, then one column per dimension.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sentence per line.
        #[arg(long)]
        sentences: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a toy dataset.
    Synth {
        /// sst, paraphrase, sts, nli, sentences, or a schema name.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a comparison grid of models and tasks.
    Experiment {
        #[arg(value_parser = parse_table)]
        table: TableKind,
        #[command(flatten)]
        run: RunOpts,
        /// Synthetic train size for tasks without data paths.
        #[arg(long, default_value_t = 64)]
        train_size: usize,
        #[arg(long, default_value_t = 32)]
        dev_size: usize,
        #[arg(long)]
        paraphrase_epochs: Option<usize>,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: simcse_core::Error| e.to_string())
}

fn parse_table(s: &str) -> Result<TableKind, String> {
    s.parse().map_err(|e: simcse_core::Error| e.to_string())
}

fn run_args(run: RunOpts, overrides: Vec<(String, String)>) -> RunArgs {
    RunArgs {
        config: run.config,
        overrides,
        seed: run.seed,
        init: run.init,
        run_dir: run.run_dir,
    }
}

fn dispatch(cli: Cli, overrides: Vec<(String, String)>) -> CliResult<()> {
    let takes_overrides = matches!(cli.command, Command::Train { .. } | Command::Experiment { .. });
    if !takes_overrides && !overrides.is_empty() {
        return Err(CliError::Usage(format!("config override --{} needs --config", overrides[0].0)));
    }
    match cli.command {
        Command::Train { procedure, run } => commands::train(procedure.name(), &run_args(run, overrides)).map(drop),
        Command::Eval {
            checkpoint,
            data,
            task,
            out,
            bins,
            lenient,
            tsv,
        } => commands::eval(&EvalArgs {
            checkpoint,
            data,
            task,
            out,
            bins,
            lenient,
            tsv,
        }),
        Command::Embed {
            checkpoint,
            sentences,
            out,
        } => commands::embed(&checkpoint, &sentences, out.as_deref()),
        Command::Synth { kind, size, seed, out } => commands::synth(&kind, size, seed, &out),
        Command::Experiment {
            table,
            run,
            train_size,
            dev_size,
            paraphrase_epochs,
        } => commands::experiment(&ExperimentArgs {
            run: run_args(run, overrides),
            table,
            train_size,
            dev_size,
            paraphrase_epochs,
        })
        .map(drop),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match config::split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
