//! `ewq`: entropy analysis, quantization planning, the metadata classifier
//! and benchmark statistics from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 the plan does not fit the cluster.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::BitsSpec;

#[derive(Parser, Debug)]
#[command(name = "ewq", version, about = "Entropy-weighted quantization planner")]
struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, env = "EWQ_CONFIG", global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Output {
    /// Write the result here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PlanFlags {
    /// Threshold aggressiveness: T = mean - x * std.
    #[arg(long)]
    pub x: Option<f64>,
    /// Bits per parameter, e.g. `raw=16,q8=8,q4=4.25,q1_58=2`.
    #[arg(long)]
    pub bits: Option<BitsSpec>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group a container's tensors into blocks; reads the header only.
    Inspect {
        model: PathBuf,
        #[arg(long)]
        layer_pattern: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Per-block weight entropy of a container.
    Analyze {
        model: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        layer_pattern: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Precision per block under the cluster's total capacity.
    Plan {
        report: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[command(flatten)]
        flags: PlanFlags,
        #[command(flatten)]
        output: Output,
    },
    /// Plan and place blocks on machines.
    Distribute {
        report: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[command(flatten)]
        flags: PlanFlags,
        /// `first-fit-decreasing` (default) or `first-fit`.
        #[arg(long)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        output: Output,
    },
    /// Metadata-only classifier.
    #[command(subcommand)]
    Fastewq(FastCommand),
    /// Accuracy and perplexity from per-question log-probability records.
    MmluStats {
        records: PathBuf,
        #[arg(long)]
        w1: Option<f64>,
        #[arg(long)]
        w2: Option<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Paired comparison of two variants' composite scores.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        w1: Option<f64>,
        #[arg(long)]
        w2: Option<f64>,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
pub enum Strategy {
    FirstFitDecreasing,
    FirstFit,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ForestFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum FastCommand {
    /// Train a forest on a block dataset.
    Train {
        dataset: PathBuf,
        /// Training fraction; 1.0 trains on every row.
        #[arg(long)]
        split: Option<f64>,
        #[command(flatten)]
        forest: ForestFlags,
        /// Also write the held-out rows as CSV.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Classify the transformer blocks of a schema; no weights needed.
    Predict {
        schema: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Classification report on labelled rows.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Plan a schema from classifier decisions.
    Plan {
        schema: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        bits: Option<BitsSpec>,
        #[command(flatten)]
        output: Output,
    },
    /// Write a synthetic dataset labelled by position in the model.
    Synth {
        #[arg(long, default_value_t = 200)]
        rows: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Done,
    Infeasible,
}

/// Marks an error as a usage error (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let cfg = match &cli.config {
        Some(p) if !p.as_os_str().is_empty() => config::Config::from_file(p)?,
        _ => config::Config::default(),
    };
    use commands as c;
    match cli.command {
        Command::Inspect {
            model,
            layer_pattern,
            output,
        } => c::inspect(&cfg, &model, layer_pattern, &output),
        Command::Analyze {
            model,
            epsilon,
            layer_pattern,
            output,
        } => c::analyze(&cfg, &model, epsilon, layer_pattern, &output),
        Command::Plan {
            report,
            cluster,
            flags,
            output,
        } => c::plan(&cfg, &report, &cluster, &flags, None, &output),
        Command::Distribute {
            report,
            cluster,
            flags,
            strategy,
            output,
        } => {
            let strategy = match strategy {
                Some(Strategy::FirstFit) => ewq_core::planner::PlacementStrategy::FirstFit,
                Some(Strategy::FirstFitDecreasing) => {
                    ewq_core::planner::PlacementStrategy::FirstFitDecreasing
                }
                None => cfg.placement,
            };
            c::plan(&cfg, &report, &cluster, &flags, Some(strategy), &output)
        }
        Command::Fastewq(FastCommand::Train {
            dataset,
            split,
            forest,
            heldout,
            output,
        }) => c::fast_train(&cfg, &dataset, split, &forest, heldout.as_deref(), &output),
        Command::Fastewq(FastCommand::Predict {
            schema,
            model,
            output,
        }) => c::fast_predict(&schema, &model, &output),
        Command::Fastewq(FastCommand::Eval {
            dataset,
            model,
            output,
        }) => c::fast_eval(&dataset, &model, &output),
        Command::Fastewq(FastCommand::Plan {
            schema,
            model,
            cluster,
            bits,
            output,
        }) => c::fast_plan(&cfg, &schema, &model, &cluster, bits.as_ref(), &output),
        Command::Fastewq(FastCommand::Synth { rows, seed, output }) => {
            c::fast_synth(rows, seed.unwrap_or(cfg.forest.seed), &output)
        }
        Command::MmluStats {
            records,
            w1,
            w2,
            output,
        } => c::mmlu_stats(&cfg, &records, w1, w2, &output),
        Command::Compare {
            a,
            b,
            w1,
            w2,
            output,
        } => c::compare(&cfg, &a, &b, w1, w2, &output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Infeasible) => {
            eprintln!("ewq: plan does not fit the cluster");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("ewq: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
