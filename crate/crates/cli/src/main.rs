//! `liesa` command line: audits, invariance curves, training and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bench;
mod commands;
mod manifest;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use liesa::autodiff::Precision;
use liesa::group::GroupId;

/// A checked property did not hold. Exits with status 1.
#[derive(Debug)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "property violation: {}", self.0)
    }
}

impl std::error::Error for Violation {}

#[derive(Parser, Debug)]
#[command(name = "liesa", version, about = "Equivariance audits, invariance curves and training runs")]
pub struct Cli {
    /// Global seed; every random stream of the run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Task {
    Constellation,
    Spring,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Sampling {
    Iid,
    Stratified,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Round-trip, oracle and invariance checks for one group.
    AuditGroup {
        #[arg(long)]
        group: GroupId,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        /// Test hook: perturb the log map so the audit must fail.
        #[arg(long, hide = true)]
        tamper_log: bool,
    },
    /// Invariance error against the number of lift samples.
    InvarianceCurve {
        #[arg(long, default_value = "se2")]
        group: GroupId,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,7")]
        lift_samples: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value = "f32")]
        precision: Precision,
        /// Model config JSON; its group must match `--group`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Sampling::Stratified)]
        sampling: Sampling,
        /// Share one stabiliser sample across all points of an example.
        #[arg(long)]
        shared_lift: bool,
        #[arg(long, default_value_t = 20)]
        examples: usize,
        #[arg(long, default_value_t = 5.0)]
        translation_scale: f64,
    },
    /// Train on one of the two tasks; writes a checkpoint and metrics.
    Train {
        #[arg(long, value_enum)]
        task: Option<Task>,
        /// Run config JSON; defaults depend on the task.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        group: Option<GroupId>,
        #[arg(long)]
        lift_samples: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-step roll-out error of a spring checkpoint.
    RolloutEval {
        /// Checkpoint directory written by `train`.
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Use the true Hamiltonian instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        ground_truth: bool,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        /// JSON-lines spring dataset; generated from the seed if absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trajectories: usize,
    },
    /// Naive against reordered group convolution: memory, time, agreement.
    BenchConv {
        /// JSON list of sweep points.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::AuditGroup {
            group,
            samples,
            tamper_log,
        } => commands::audit_group(&cli.out, group, samples, cli.seed, tamper_log),
        Command::InvarianceCurve {
            group,
            lift_samples,
            runs,
            precision,
            config,
            sampling,
            shared_lift,
            examples,
            translation_scale,
        } => commands::invariance_curve(
            &cli.out,
            cli.seed,
            commands::CurveArgs {
                group,
                lift_samples,
                runs,
                precision,
                config,
                stratified: matches!(sampling, Sampling::Stratified),
                per_point: !shared_lift,
                examples,
                translation_scale,
            },
        ),
        Command::Train {
            task,
            config,
            group,
            lift_samples,
            epochs,
        } => train::train(
            &cli.out,
            cli.seed,
            train::TrainArgs {
                task,
                config,
                group,
                lift_samples,
                epochs,
            },
        ),
        Command::RolloutEval {
            checkpoint,
            ground_truth,
            horizon,
            dataset,
            trajectories,
        } => train::rollout_eval(
            &cli.out,
            cli.seed,
            train::RolloutArgs {
                checkpoint: if ground_truth { None } else { checkpoint },
                horizon,
                dataset,
                trajectories,
            },
        ),
        Command::BenchConv { config } => bench::bench_conv(&cli.out, cli.seed, config),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Violation>() || matches!(err.downcast_ref::<liesa::Error>(), Some(liesa::Error::NonFinite { .. })) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
