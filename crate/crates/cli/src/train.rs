//! `train` and `rollout-eval`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use liesa::blocks::{LieTransformer, ModelConfig, TaskHead};
use liesa::checkpoint::{load_checkpoint, save_checkpoint};
use liesa::dynamics::constellation::{generate_constellation, Augment};
use liesa::dynamics::hamiltonian::{geometric_mean, rollout_errors, true_hamiltonian, PotentialConfig, PotentialNet};
use liesa::dynamics::io::read_jsonl;
use liesa::dynamics::spring::{generate_spring_dataset, SpringDataConfig, SpringExample};
use liesa::dynamics::train::{
    sample_windows, spring_step_errors, train_constellation, train_spring, ConstellationTrainConfig, EpochMetrics,
    SpringTrainConfig, CONSTELLATION_OUTPUTS,
};
use liesa::group::GroupId;
use liesa::probe::quantile;
use liesa::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::manifest::{ensure_dir, read_json, write_csv, write_json, write_manifest};
use crate::Task;

pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringRun {
    pub model: PotentialConfig,
    pub data: SpringDataConfig,
    pub train_trajectories: usize,
    pub val_trajectories: usize,
    pub train: SpringTrainConfig,
}

impl Default for SpringRun {
    fn default() -> Self {
        SpringRun {
            model: PotentialConfig::Transformer(ModelConfig::small(GroupId::T(2), 2, 1, TaskHead::Scalar, 32, 4, 2)),
            data: SpringDataConfig::default(),
            train_trajectories: 400,
            val_trajectories: 100,
            train: SpringTrainConfig {
                epochs: 15,
                lr: 1e-2,
                ..SpringTrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstellationRun {
    pub model: ModelConfig,
    pub examples: usize,
    #[serde(default)]
    pub augment: Augment,
    pub train: ConstellationTrainConfig,
}

impl Default for ConstellationRun {
    fn default() -> Self {
        ConstellationRun {
            model: ModelConfig::small(GroupId::T(2), 1, CONSTELLATION_OUTPUTS, TaskHead::Classifier, 16, 4, 2),
            examples: 2000,
            augment: Augment::None,
            train: ConstellationTrainConfig::default(),
        }
    }
}

/// Everything needed to reproduce a training run; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TrainRun {
    Spring(SpringRun),
    Constellation(ConstellationRun),
}

pub struct TrainArgs {
    pub task: Option<Task>,
    pub config: Option<PathBuf>,
    pub group: Option<GroupId>,
    pub lift_samples: Option<usize>,
    pub epochs: Option<usize>,
}

fn resolve(args: &TrainArgs, seed: u64) -> Result<TrainRun> {
    let mut run = match (&args.config, args.task) {
        (Some(path), task) => {
            let run: TrainRun = read_json(path)?;
            match (task, &run) {
                (Some(Task::Spring), TrainRun::Constellation(_)) | (Some(Task::Constellation), TrainRun::Spring(_)) => {
                    bail!(liesa::Error::Config("--task disagrees with the task in the config file".into()))
                }
                _ => run,
            }
        }
        (None, Some(Task::Spring)) => TrainRun::Spring(SpringRun::default()),
        (None, Some(Task::Constellation)) => TrainRun::Constellation(ConstellationRun::default()),
        (None, None) => bail!(liesa::Error::Config("give --task or --config".into())),
    };
    let model = match &mut run {
        TrainRun::Spring(s) => {
            s.train.seed = derive_seed(seed, 2);
            if let Some(e) = args.epochs {
                s.train.epochs = e;
            }
            match &mut s.model {
                PotentialConfig::Transformer(m) => Some(m),
                PotentialConfig::Mlp(_) => None,
            }
        }
        TrainRun::Constellation(c) => {
            c.train.seed = derive_seed(seed, 2);
            if let Some(e) = args.epochs {
                c.train.epochs = e;
            }
            Some(&mut c.model)
        }
    };
    match model {
        Some(m) => {
            if let Some(g) = args.group {
                m.group = g;
            }
            if let Some(k) = args.lift_samples {
                m.lift.num_lift_samples = k;
            }
            m.validate()?;
        }
        None if args.group.is_some() || args.lift_samples.is_some() => {
            bail!(liesa::Error::Config("--group and --lift-samples need a transformer model".into()))
        }
        None => {}
    }
    Ok(run)
}

fn metrics_rows(history: &[EpochMetrics]) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    history
        .iter()
        .map(|m| format!("{},{},{},{},{}", m.epoch, m.lr, m.train_loss, opt(m.val_loss), opt(m.train_accuracy)))
        .collect()
}

fn print_epoch(m: &EpochMetrics) {
    let val = m.val_loss.map(|v| format!(" val {v:.4e}")).unwrap_or_default();
    let acc = m.train_accuracy.map(|a| format!(" acc {a:.3}")).unwrap_or_default();
    eprintln!("epoch {:>4} lr {:.2e} train {:.4e}{val}{acc}", m.epoch, m.lr, m.train_loss);
}

/// Data seed `derive(seed, 0)`, model init `derive(seed, 1)`, training
/// streams `derive(seed, 2)`, validation windows `derive(seed, 3)`.
pub fn train(out: &Path, seed: u64, args: TrainArgs) -> Result<()> {
    let run = resolve(&args, seed)?;
    ensure_dir(out)?;
    let (history, store) = match &run {
        TrainRun::Spring(s) => {
            let total = s.train_trajectories + s.val_trajectories;
            let mut data = generate_spring_dataset(total, &s.data, derive_seed(seed, 0))?;
            let val_data = data.split_off(s.train_trajectories);
            let val = if val_data.is_empty() { Vec::new() } else { sample_windows(&val_data, s.train.horizon, derive_seed(seed, 3))? };
            let net = PotentialNet::new(&s.model)?;
            let mut store = net.init_store(derive_seed(seed, 1))?;
            let history = train_spring(&net, &mut store, &data, &val, &s.train, print_epoch)?;
            (history, store)
        }
        TrainRun::Constellation(c) => {
            let data = generate_constellation(c.examples, derive_seed(seed, 0), c.augment)?;
            let model = LieTransformer::new(c.model.clone())?;
            let mut store = model.init_store(derive_seed(seed, 1))?;
            let history = train_constellation(&model, &mut store, &data, &c.train, print_epoch)?;
            (history, store)
        }
    };
    save_checkpoint(&out.join(CHECKPOINT_DIR), &run, &store)?;
    let metrics = write_csv(out, "metrics.csv", "epoch,lr,train_loss,val_loss,train_accuracy", &metrics_rows(&history))?;
    write_manifest(
        out,
        "train",
        &run,
        seed,
        &[metrics, format!("{CHECKPOINT_DIR}/config.json"), format!("{CHECKPOINT_DIR}/params.bin")],
    )?;
    Ok(())
}

pub struct RolloutArgs {
    /// `None` evaluates the true Hamiltonian.
    pub checkpoint: Option<PathBuf>,
    pub horizon: usize,
    pub dataset: Option<PathBuf>,
    pub trajectories: usize,
}

#[derive(Serialize)]
struct RolloutRun {
    checkpoint: Option<String>,
    checkpoint_config: Option<TrainRun>,
    horizon: usize,
    dataset: Option<String>,
    trajectories: usize,
    data: SpringDataConfig,
}

#[derive(Serialize)]
struct RolloutSummary {
    horizon: usize,
    windows: usize,
    /// Mean over windows of the geometric mean over steps.
    geometric_mean_mse: f64,
    final_step_median_mse: f64,
}

fn check_particles(cfg: &PotentialConfig, data: &[SpringExample]) -> Result<()> {
    if let PotentialConfig::Mlp(m) = cfg {
        if let Some(e) = data.iter().find(|e| e.system.n() != m.num_particles) {
            bail!(liesa::Error::DimensionMismatch {
                expected: m.num_particles,
                actual: e.system.n(),
            });
        }
    }
    Ok(())
}

pub fn rollout_eval(out: &Path, seed: u64, args: RolloutArgs) -> Result<()> {
    if args.horizon == 0 {
        bail!(liesa::Error::Config("horizon must be at least 1".into()));
    }
    let loaded = match &args.checkpoint {
        Some(dir) => {
            let (run, store): (TrainRun, _) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            match run {
                TrainRun::Spring(s) => Some((s, store)),
                TrainRun::Constellation(_) => bail!(liesa::Error::Config("rollout-eval needs a spring checkpoint".into())),
            }
        }
        None => None,
    };
    let data_cfg = loaded.as_ref().map(|(s, _)| s.data.clone()).unwrap_or_default();
    let data = match &args.dataset {
        Some(path) => read_jsonl::<SpringExample>(path)?,
        None => generate_spring_dataset(args.trajectories, &data_cfg, derive_seed(seed, 0))?,
    };
    let windows = sample_windows(&data, args.horizon, derive_seed(seed, 1))?;
    let steps: Vec<Vec<f64>> = match &loaded {
        Some((s, store)) => {
            let net = PotentialNet::new(&s.model)?;
            check_particles(&s.model, &data)?;
            spring_step_errors(&net, store, &windows, args.horizon, derive_seed(seed, 2))?
        }
        None => {
            let (systems, trajs): (Vec<_>, Vec<_>) = windows.iter().cloned().unzip();
            let h = true_hamiltonian(&systems);
            rollout_errors(&h, &trajs, args.horizon, false)?.iter().map(|t| t.data().to_vec()).collect()
        }
    };

    let mut rows = Vec::with_capacity(steps.len());
    let mut final_median = 0.0;
    for (t, errs) in steps.iter().enumerate() {
        let mut sorted = errs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = quantile(&sorted, 0.5);
        final_median = median;
        rows.push(format!("{},{},{},{}", t + 1, median, quantile(&sorted, 0.25), quantile(&sorted, 0.75)));
    }
    let per_window: Vec<f64> = (0..windows.len())
        .map(|w| geometric_mean(&steps.iter().map(|s| s[w]).collect::<Vec<_>>()))
        .collect();
    let summary = RolloutSummary {
        horizon: args.horizon,
        windows: windows.len(),
        geometric_mean_mse: per_window.iter().sum::<f64>() / per_window.len() as f64,
        final_step_median_mse: final_median,
    };
    ensure_dir(out)?;
    let csv = write_csv(out, "rollout.csv", "t,median_mse,q25,q75", &rows)?;
    let json = write_json(out, "rollout_summary.json", &summary)?;
    let run = RolloutRun {
        checkpoint: args.checkpoint.as_ref().map(|p| p.display().to_string()),
        checkpoint_config: loaded.map(|(s, _)| TrainRun::Spring(s)),
        horizon: args.horizon,
        dataset: args.dataset.as_ref().map(|p| p.display().to_string()),
        trajectories: data.len(),
        data: data_cfg,
    };
    write_manifest(out, "rollout-eval", &run, seed, &[csv, json])?;
    println!(
        "horizon {}: geometric-mean mse {:.4e}, final-step median {:.4e} over {} windows",
        summary.horizon, summary.geometric_mean_mse, summary.final_step_median_mse, summary.windows
    );
    Ok(())
}
