//! Training loops for both tasks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::constellation::{ConstellationExample, MAX_INSTANCES, PATTERNS};
use super::hamiltonian::{rollout_errors, rollout_loss, LossMode, PotentialNet};
use super::spring::{SpringExample, SpringSystem, TrajectoryBatch};
use crate::autodiff::optim::{Adam, AdamConfig, CosineSchedule};
use crate::autodiff::{backward_params, Axis, ParameterStore, Tensor};
use crate::blocks::LieTransformer;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SpringTrainConfig {
    fn default() -> Self {
        SpringTrainConfig {
            epochs: 100,
            batch_size: 100,
            lr: 1e-3,
            min_lr: 0.0,
            horizon: 5,
            seed: 0,
        }
    }
}

impl SpringTrainConfig {
    /// `400 * sqrt(3000 / n)` epochs for `n` training trajectories.
    pub fn reference_epochs(n: usize) -> usize {
        (400.0 * (3000.0 / n as f64).sqrt()).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Geometric-mean roll-out error on the validation windows, if any.
    pub val_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
}

/// One window of `horizon` steps per example with a start drawn from `seed`.
pub fn sample_windows(data: &[SpringExample], horizon: usize, seed: u64) -> Result<Vec<(SpringSystem, TrajectoryBatch)>> {
    let mut rng = seeded(seed);
    data.iter()
        .map(|ex| {
            let last = ex.trajectory.len().checked_sub(horizon + 1).ok_or(Error::Config(format!(
                "trajectory of {} states is shorter than horizon {horizon}",
                ex.trajectory.len()
            )))?;
            let start = rng.gen_range(0..=last);
            Ok((ex.system.clone(), ex.trajectory.window(start, horizon)?))
        })
        .collect()
}

/// Mean of the per-window geometric roll-out errors.
pub fn evaluate_spring(
    net: &PotentialNet,
    store: &ParameterStore,
    windows: &[(SpringSystem, TrajectoryBatch)],
    horizon: usize,
    lift_seed: u64,
) -> Result<f64> {
    let (systems, trajs): (Vec<_>, Vec<_>) = windows.iter().cloned().unzip();
    let h = |q: &Tensor, p: &Tensor| net.energy(store, &systems, q, p, lift_seed);
    Ok(rollout_loss(&h, &trajs, horizon, LossMode::TestGeometric)?.item())
}

/// Per-step errors `t = 1 ..= horizon` for each window, `[t][window]`.
pub fn spring_step_errors(
    net: &PotentialNet,
    store: &ParameterStore,
    windows: &[(SpringSystem, TrajectoryBatch)],
    horizon: usize,
    lift_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (systems, trajs): (Vec<_>, Vec<_>) = windows.iter().cloned().unzip();
    let h = |q: &Tensor, p: &Tensor| net.energy(store, &systems, q, p, lift_seed);
    Ok(rollout_errors(&h, &trajs, horizon, false)?.iter().map(|t| t.data().to_vec()).collect())
}

/// Adam with cosine-annealed learning rate on the arithmetic-mean roll-out
/// loss. Windows are resampled every epoch.
pub fn train_spring(
    net: &PotentialNet,
    store: &mut ParameterStore,
    train: &[SpringExample],
    val: &[(SpringSystem, TrajectoryBatch)],
    cfg: &SpringTrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("need training data and a positive batch size".into()));
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        total_steps: cfg.epochs * batches_per_epoch,
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let es = derive_seed(cfg.seed, epoch as u64);
        let mut windows = sample_windows(train, cfg.horizon, derive_seed(es, 0))?;
        windows.shuffle(&mut seeded(derive_seed(es, 1)));
        let mut total = 0.0;
        let mut lr = cfg.lr;
        for chunk in windows.chunks(cfg.batch_size) {
            let (systems, trajs): (Vec<_>, Vec<_>) = chunk.iter().cloned().unzip();
            let lift_seed = derive_seed(es, 2 + step as u64);
            let loss = {
                let s: &ParameterStore = store;
                let h = |q: &Tensor, p: &Tensor| net.energy(s, &systems, q, p, lift_seed);
                rollout_loss(&h, &trajs, cfg.horizon, LossMode::TrainArithmetic)?
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite { step });
            }
            let grads = backward_params(&loss, store)?;
            lr = schedule.lr_at(step);
            adam.step_with_lr(store, &grads, lr)?;
            total += loss.item() * chunk.len() as f64;
            step += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_spring(net, store, val, cfg.horizon, derive_seed(cfg.seed, u64::MAX))?)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: total / train.len() as f64,
            val_loss,
            train_accuracy: None,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstellationTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for ConstellationTrainConfig {
    fn default() -> Self {
        ConstellationTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            seed: 0,
        }
    }
}

/// Number of logits a constellation classifier needs.
pub const CONSTELLATION_OUTPUTS: usize = PATTERNS.len() * (MAX_INSTANCES + 1);

/// Sum over patterns of the cross-entropy of each count, averaged over the
/// batch, and the number of correctly predicted counts.
pub fn constellation_loss(logits: &Tensor, labels: &[[usize; 4]]) -> Result<(Tensor, usize)> {
    let k = MAX_INSTANCES + 1;
    let b = labels.len();
    if logits.shape() != [b, CONSTELLATION_OUTPUTS] {
        return Err(Error::Shape {
            op: "constellation_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![b, CONSTELLATION_OUTPUTS],
        });
    }
    let per_pattern = logits.reshape(b * PATTERNS.len(), k)?;
    let log_probs = per_pattern.softmax(Axis::Cols).ln();
    let targets: Vec<usize> = labels.iter().flatten().copied().collect();
    let onehot = Tensor::from_fn(targets.len(), k, |r, c| if targets[r] == c { 1.0 } else { 0.0 });
    let loss = log_probs.mul(&onehot)?.reduce_sum().scale(-1.0 / b as f64);
    let correct = (0..targets.len())
        .filter(|&r| {
            let row = per_pattern.row_slice(r);
            let best = (0..k).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            best == targets[r]
        })
        .count();
    Ok((loss, correct))
}

/// Adam with the given betas on the constellation counting loss. Lifts are
/// redrawn for every batch.
pub fn train_constellation(
    model: &LieTransformer,
    store: &mut ParameterStore,
    data: &[ConstellationExample],
    cfg: &ConstellationTrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("need training data and a positive batch size".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamConfig::default()
    });
    let inputs = data.iter().map(|e| e.to_input()).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive_seed(cfg.seed, epoch as u64)));
        let (mut total, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| data[i].labels).collect();
            let logits = model.forward(store, &batch, derive_seed(cfg.seed ^ 0x9e37_79b9, step))?.output;
            let (loss, c) = constellation_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { step: step as usize });
            }
            let grads = backward_params(&loss, store)?;
            adam.step(store, &grads)?;
            total += loss.item() * chunk.len() as f64;
            correct += c;
            step += 1;
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr: cfg.lr,
            train_loss: total / data.len() as f64,
            val_loss: None,
            train_accuracy: Some(correct as f64 / (data.len() * PATTERNS.len()) as f64),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}
