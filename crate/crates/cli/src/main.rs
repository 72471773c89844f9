//! `lhcnet`: scripted access to the LHC toolkit.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "lhcnet-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Feature-map and head geometry of a network spec.
    CheckShapes {
        /// `full`, `full-gated`, `tiny` or a spec TOML file.
        #[arg(long, default_value = "full")]
        spec: String,
    },
    /// Finite-difference gradient checks of every primitive and the LHC block.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-3)]
        block_tolerance: f64,
    },
    /// Parameter census of a network spec.
    CountParams {
        #[arg(long, default_value = "full")]
        spec: String,
    },
    /// Parses a FER2013 CSV and writes the preprocessed dataset container.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Runs the staged training protocol and saves a checkpoint.
    Train {
        /// FER2013 CSV; synthetic data is used when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "tiny")]
        spec: String,
    },
    /// Test-split accuracy and confusion matrix of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `on`, `off` or a TTA plan TOML file.
        #[arg(long, default_value = "off")]
        tta: String,
    },
    /// Compares plain and test-time-augmented accuracy.
    TtaEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "on")]
        tta: String,
    },
    /// Head-output correlation and block ablation.
    AnalyzeHeads {
        /// Trained checkpoint; a freshly seeded tiny network otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        block_index: usize,
        /// `switch_off`, `detrain` or `reinit:SEED`.
        #[arg(long, default_value = "switch_off")]
        mode: String,
    },
    /// Exact global/local efficiency comparison over all head splits.
    EfficiencyScan {
        /// Number of heads.
        #[arg(long, default_value_t = 8)]
        n: u64,
        /// Embedding dimension as a fraction of the head length H·W/n.
        #[arg(long, default_value_t = 0.5)]
        d_ratio: f64,
        #[arg(long, default_value_t = 56)]
        h: u64,
        #[arg(long, default_value_t = 56)]
        w: u64,
    },
}

#[derive(Debug, Parser)]
#[command(name = "lhcnet", version, about = "Local multi-head channel attention toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let inv = Cli::parse();
    match commands::run(&inv.common, &inv.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
