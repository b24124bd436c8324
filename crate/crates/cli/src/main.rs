//! `spikelat`: train, evaluate and analyze latency-coded SNNs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "spikelat", version, about = "Latency-coded spiking networks trained with BPTT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint and resolved config to a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` override, repeatable; wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Accuracy, mean exit time and sparsity of a checkpoint.
    Eval {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value_t = DecodeArg::Latency)]
        decode: DecodeArg,
        /// Write per-sample decisions to this CSV.
        #[arg(long, value_name = "PATH")]
        decisions: Option<PathBuf>,
    },
    /// Energy, temporal-similarity or robustness CSVs for a checkpoint.
    Analyze {
        #[arg(value_enum)]
        which: Analysis,
        #[command(flatten)]
        source: Source,
        /// Spiking layer for `similarity`; 1 is the encoder output.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the latency-code raster of one sample as CSV.
    EncodeDemo {
        #[arg(long)]
        config: PathBuf,
        /// Trained weights for the feature layer; omitted uses the seeded initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to `config.txt` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Use only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Latency,
    Rate,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Energy,
    Similarity,
    Robustness,
}

fn configure_threads() -> Result<(), commands::Failure> {
    let Ok(raw) = std::env::var("SPIKELAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| commands::Failure::usage(anyhow::anyhow!("SPIKELAT_THREADS='{raw}' is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::Failure::runtime(e.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Eval {
            source,
            decode,
            decisions,
        } => commands::eval(&source, decode, decisions.as_deref()),
        Command::Analyze {
            which,
            source,
            layer,
            out,
        } => commands::analyze(which, &source, layer, out.as_deref()),
        Command::EncodeDemo {
            config,
            checkpoint,
            overrides,
            split,
            sample,
            out,
        } => commands::encode_demo(&config, checkpoint.as_deref(), &overrides, split, sample, out.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
