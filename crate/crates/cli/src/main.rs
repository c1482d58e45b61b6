use clap::{Parser, Subcommand};
use sdflow_cli::*;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sdflow", version, about = "Similarity-driven VQ tokenization + categorical flow matching for time series")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,
    /// Worker threads (falls back to SDFLOW_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a config key (repeatable): --set key=value
    #[arg(long = "set", global = true, value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    #[command(subcommand)]
    command: Command,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Train the Stage-1 VQ-VAE tokenizer.
    TrainVqvae,
    /// Train the Stage-2 flow over a frozen tokenizer.
    TrainFlow {
        #[arg(long)]
        stage1: PathBuf,
    },
    /// Generate windows from a trained pipeline.
    Generate {
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Skip ODE integration (KDE-only baseline).
        #[arg(long)]
        kde_only: bool,
    },
    /// Score a synthetic set against the configured real dataset.
    Evaluate {
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
    },
    /// Numerical verification experiments.
    Analyze {
        /// One of: spectrum, transport, pinsker, kde-rate.
        #[arg(long)]
        which: String,
        #[arg(long)]
        stage2: Option<PathBuf>,
    },
    /// Conditional generation from a half-window history CSV.
    Forecast {
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Comparison tables over one experimental axis.
    Ablate {
        /// One of: prior, rank, bandwidth, steps, heldout-fraction.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        stage1: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    let cfg = match resolve_config(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let result = match &cli.command {
        Command::TrainVqvae => cmd_train_vqvae(&cfg, cli.seed, &cli.out).map(|_| ()),
        Command::TrainFlow { stage1 } => {
            cmd_train_flow(&cfg, stage1, cli.seed, &cli.out).map(|_| ())
        }
        Command::Generate { stage2, n, tau, steps, kde_only } => {
            cmd_generate(&cfg, stage2, *n, *tau, *steps, *kde_only, cli.seed, &cli.out).map(|_| ())
        }
        Command::Evaluate { stage2, synthetic } => {
            cmd_evaluate(&cfg, stage2, synthetic, cli.seed, &cli.out)
        }
        Command::Analyze { which, stage2 } => {
            cmd_analyze(&cfg, which, stage2.as_deref(), cli.seed, &cli.out)
        }
        Command::Forecast { stage2, history } => {
            cmd_forecast(&cfg, stage2, history, cli.seed, &cli.out)
        }
        Command::Ablate { axis, stage1 } => cmd_ablate(&cfg, axis, stage1, cli.seed, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
