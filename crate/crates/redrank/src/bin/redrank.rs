//! Batch driver for the reduced-rank correlation pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use redrank::pipeline::{RunConfig, Runner, StageSelect};

#[derive(Parser)]
#[command(name = "redrank", version, about = "Reduced-rank correlation analytics over daily price panels")]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "redrank.toml")]
    config: PathBuf,

    /// Override the clustering base seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Skip stages whose outputs already exist in the output directory.
    #[arg(long, global = true)]
    resume: bool,

    /// Size of the worker thread pool; defaults to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and align the price panel, writing the ingest report.
    Ingest,
    /// Sliding-window mean-value indicator series per approach.
    Indicators,
    /// Pairwise distance matrices and averaged distances.
    Distances,
    /// k-means market states over disjoint epochs.
    States,
    /// Growing snapshot sequences and transition detection.
    Snapshots,
    /// Event annotations against the computed series.
    Report,
    /// The full pipeline end to end.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> redrank::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| redrank::Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = RunConfig::from_toml_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.cluster.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    let select = match cli.command {
        Command::Ingest => StageSelect::Ingest,
        Command::Indicators => StageSelect::Indicators,
        Command::Distances => StageSelect::Distances,
        Command::States => StageSelect::States,
        Command::Snapshots => StageSelect::Snapshots,
        Command::Report => StageSelect::Report,
        Command::Run => StageSelect::All,
    };
    let mut runner = Runner::new(cfg, cli.resume)?;
    let manifest = runner.run(select)?;
    println!(
        "{}: {} stages, output hash {}",
        manifest.status,
        manifest.stages.len(),
        &manifest.output_hash[..16]
    );
    Ok(())
}
