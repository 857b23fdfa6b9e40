use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;
mod plot;

use manifest::UsageError;

#[derive(Parser)]
#[command(name = "patchvo", version, about = "Event-based patch visual odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track an event stream and write a TUM trajectory plus run statistics.
    Run {
        #[arg(long)]
        events: PathBuf,
        /// Flat `key = value` config; defaults to the baseline preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights directory; random weights from `--seed` when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align an estimate to ground truth and report ATE.
    Eval {
        #[arg(long)]
        est: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        trim_head_m: f64,
        #[arg(long, default_value_t = 0.0)]
        trim_tail_m: f64,
        /// Evaluate every `*.txt`/`*.tum` file here and report the median.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
        /// Rigid alignment instead of similarity.
        #[arg(long)]
        no_scale: bool,
        #[arg(long)]
        json: bool,
    },
    /// Print the analytical cost of a configuration.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Sweep patch-graph hyperparameters and select the Pareto knee.
    Sweep {
        /// Grid spec; the standard 396-cell grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "cost")]
        evaluator: commands::EvaluatorKind,
        /// Directory with an event file, `groundtruth.txt` and optional
        /// `config.txt` (pipeline evaluator).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// CSV of externally measured metrics (table evaluator).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Base configuration the graph values are applied to.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flow noise for the oracle evaluator, in feature pixels.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `progress.csv` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many newly evaluated cells.
        #[arg(long, hide = true)]
        max_cells: Option<usize>,
    },
    /// Write a synthetic event sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 400)]
        landmarks: usize,
        #[arg(long, default_value = "lateral")]
        motion: commands::MotionKind,
        #[arg(long, default_value_t = 240)]
        width: usize,
        #[arg(long, default_value_t = 180)]
        height: usize,
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write randomly initialized weights for a configuration.
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<patchvo::Error>() {
        Some(e) if !e.is_input_error() => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            events,
            config,
            weights,
            seed,
            out,
        } => commands::run(events, config, weights, seed, out),
        Command::Eval {
            est,
            gt,
            trim_head_m,
            trim_tail_m,
            runs_dir,
            no_scale,
            json,
        } => commands::eval(est, gt, trim_head_m, trim_tail_m, runs_dir, !no_scale, json),
        Command::Cost {
            config,
            preset,
            overrides,
            csv,
            json,
        } => commands::cost(config, preset, overrides, csv, json),
        Command::Sweep {
            grid,
            evaluator,
            dataset,
            metrics,
            config,
            weights,
            seed,
            noise,
            out,
            resume,
            max_cells,
        } => commands::sweep(commands::SweepArgs {
            grid,
            evaluator,
            dataset,
            metrics,
            config,
            weights,
            seed,
            noise,
            out,
            resume,
            max_cells,
        }),
        Command::Synth {
            out,
            frames,
            landmarks,
            motion,
            width,
            height,
            preset,
            seed,
        } => commands::synth(out, frames, landmarks, motion, width, height, &preset, seed),
        Command::InitWeights {
            config,
            preset,
            seed,
            out,
        } => commands::init_weights(config, preset, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
