mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Batch evaluation of recommenders, LLM-backed or classical, over a run
/// directory.
#[derive(Parser, Debug)]
#[command(name = "beyondrec", version, about)]
struct Cli {
    /// Directory holding config.toml, manifest.json and every artifact.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Rerun the stage even when its inputs and outputs are unchanged.
    #[arg(long, global = true)]
    force: bool,

    /// Log progress (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Snapshot the config, then load, filter and split the dataset.
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw the user sample behind the K-S gate.
    Sample,
    /// Build and arrange candidate pools for the sampled users.
    Pools,
    /// Render prompts (and profiles, for profile strategies).
    Prompts,
    /// Run the configured model over the prompts.
    Invoke,
    /// Parse responses and match titles to items.
    Parse,
    /// Score the matched recommendations.
    Eval,
    /// One sub-run per history length.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Shuffled versus positive-first passes.
    Position,
    /// History-only, profile-only and profile-plus-history variants.
    Profile {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Re-rank pools aggregated from the configured run files.
    Rerank,
    /// Render comparison tables and plot series from saved reports.
    Report {
        /// Run label or model name used as the significance reference.
        #[arg(long)]
        reference: Option<String>,
        /// Also draw SVG charts.
        #[arg(long)]
        svg: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<beyondrec::Error>() {
        Some(beyondrec::Error::MissingArtifact { .. }) => 3,
        Some(e) if e.is_upstream() => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match stages::run(&cli.run_dir, cli.force, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
