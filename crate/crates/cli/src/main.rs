//! `tspas`: the algorithm-selection pipeline as a command-line tool.
//!
//! Subcommands cover the full flow: `features` (instance files to feature
//! CSV), `rank` (univariate feature ranking), `render` (instance files to
//! image tensors and PGM previews), `evaluate` (cross-validated feature-based
//! selector with a JSON report), and `train-cnn` (cross-validated image-based
//! selector with checkpoints, training logs, and a JSON report).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tspas", version, about = "Per-instance algorithm selection for Euclidean TSP")]
struct Cli {
    /// Base random seed (config files may override it).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker count for per-instance and per-fold parallelism. Outputs do
    /// not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Solver cutoff time T in seconds.
    #[arg(long = "cutoff-t", global = true, default_value_t = 3600.0)]
    cutoff: f64,

    /// Penalty multiplier for unsolved runs (10 gives PAR10).
    #[arg(long, global = true, default_value_t = 10.0)]
    penalty_factor: f64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the feature CSV for a directory of instance files.
    Features {
        /// Directory containing TSPLIB-subset instance files.
        instances_dir: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Neighborhood size for the graph features.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Rank features by two-sided rank-test p-value between solver classes.
    Rank {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        perf: PathBuf,
        /// Optional explicit labels CSV (`instance_id,label`); wins over
        /// labels derived from the performance data.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Number of top features to keep.
        #[arg(long, default_value_t = 15)]
        top: usize,
        /// Instance subset: all, or the hardest per class by score (s150,
        /// s300) or by ratio (r150, r300).
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize instances into tensor files and PGM previews.
    Render {
        instances_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Channels to draw, comma-separated subset of points,mst,nng.
        #[arg(long, default_value = "points,mst,nng")]
        roles: String,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Neighborhood size for the graph channel.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Cross-validated feature-based selector evaluation.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        perf: PathBuf,
        /// Flat key-value experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Fold assignment CSV; generated (stratified, seeded) when absent.
        #[arg(long)]
        folds: Option<PathBuf>,
        /// Write the fold assignment that was used.
        #[arg(long)]
        emit_folds: Option<PathBuf>,
        /// Output report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated image-based selector: trains one network per fold.
    TrainCnn {
        /// Directory of tensor files produced by `render`.
        #[arg(long)]
        tensors: PathBuf,
        #[arg(long)]
        perf: PathBuf,
        /// Flat key-value training config.
        #[arg(long)]
        config: PathBuf,
        /// Fold assignment CSV (required; use `evaluate --emit-folds` or any
        /// `instance_id,fold` file).
        #[arg(long)]
        folds: PathBuf,
        /// Output directory for the report, checkpoints, and training logs.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let globals = commands::Globals {
        seed: cli.seed,
        jobs: cli.jobs.max(1),
        cutoff: cli.cutoff,
        penalty_factor: cli.penalty_factor,
    };
    let result = match cli.command {
        Command::Features { instances_dir, out, k } => {
            commands::cmd_features(&globals, &instances_dir, &out, k)
        }
        Command::Rank {
            features,
            perf,
            labels,
            top,
            subset,
            out,
        } => commands::cmd_rank(&globals, &features, &perf, labels.as_deref(), top, &subset, &out),
        Command::Render {
            instances_dir,
            out_dir,
            roles,
            size,
            k,
        } => commands::cmd_render(&globals, &instances_dir, &out_dir, &roles, size, k),
        Command::Evaluate {
            features,
            perf,
            config,
            folds,
            emit_folds,
            out,
        } => commands::cmd_evaluate(
            &globals,
            &features,
            &perf,
            &config,
            folds.as_deref(),
            emit_folds.as_deref(),
            &out,
        ),
        Command::TrainCnn {
            tensors,
            perf,
            config,
            folds,
            out_dir,
        } => commands::cmd_train_cnn(&globals, &tensors, &perf, &config, &folds, &out_dir),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
