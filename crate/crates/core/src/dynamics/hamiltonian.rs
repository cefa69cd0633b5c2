//! Learned Hamiltonians `H = K(p) + V_theta(q)`, roll-out losses and
//! conservation audits.

use serde::{Deserialize, Serialize};

use super::integrate::{hamilton_rhs, integrate, Method};
use super::spring::{Conserved, SpringSystem, TrajectoryBatch, SPACE_DIM};
use crate::autodiff::{ParameterStore, Tensor};
use crate::blocks::{LieTransformer, ModelConfig, TaskHead};
use crate::error::{Error, Result};
use crate::group::GroupId;
use crate::nn::{Activation, Mlp};

/// Non-invariant control: an MLP on `(q, m, k)` flattened.
#[derive(Clone, Debug)]
pub struct MlpPotential {
    mlp: Mlp,
    num_particles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpPotentialConfig {
    pub num_particles: usize,
    pub hidden: Vec<usize>,
}

impl MlpPotential {
    pub fn new(cfg: &MlpPotentialConfig) -> Result<Self> {
        let n = cfg.num_particles;
        let mut dims = vec![n * SPACE_DIM + 2 * n];
        dims.extend(&cfg.hidden);
        dims.push(1);
        Ok(MlpPotential {
            mlp: Mlp::new("vmlp", dims, Activation::Swish)?,
            num_particles: n,
        })
    }
}

/// A network giving the potential energy of particle configurations.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum PotentialNet {
    Transformer(LieTransformer),
    Mlp(MlpPotential),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialConfig {
    Transformer(ModelConfig),
    Mlp(MlpPotentialConfig),
}

impl PotentialNet {
    pub fn new(cfg: &PotentialConfig) -> Result<Self> {
        match cfg {
            PotentialConfig::Transformer(m) => {
                if m.head != TaskHead::Scalar || m.input_dim != 2 {
                    return Err(Error::Config("potential model needs a scalar head and input_dim 2 (m, k)".into()));
                }
                if m.group.space_dim() != Some(SPACE_DIM) {
                    return Err(Error::GroupMismatch(m.group, GroupId::T(SPACE_DIM)));
                }
                Ok(PotentialNet::Transformer(LieTransformer::new(m.clone())?))
            }
            PotentialConfig::Mlp(c) => Ok(PotentialNet::Mlp(MlpPotential::new(c)?)),
        }
    }

    pub fn init_store(&self, seed: u64) -> Result<ParameterStore> {
        match self {
            PotentialNet::Transformer(t) => t.init_store(seed),
            PotentialNet::Mlp(m) => {
                let mut store = ParameterStore::new(seed);
                m.mlp.init(&mut store)?;
                Ok(store)
            }
        }
    }

    /// `V(q)` per row of `q` (`B x nD`), row `b` belonging to `systems[b]`.
    pub fn potential(&self, store: &ParameterStore, systems: &[SpringSystem], q: &Tensor, seed: u64) -> Result<Tensor> {
        if systems.len() != q.rows() {
            return Err(Error::DimensionMismatch {
                expected: q.rows(),
                actual: systems.len(),
            });
        }
        match self {
            PotentialNet::Transformer(model) => {
                let examples = systems
                    .iter()
                    .enumerate()
                    .map(|(b, s)| {
                        let x = q.slice_rows(b, b + 1)?.reshape(s.n(), SPACE_DIM)?;
                        let f = Tensor::from_fn(s.n(), 2, |i, j| if j == 0 { s.masses[i] } else { s.ks[i] });
                        Ok((x, f.with_precision(q.precision())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(model.forward(store, &examples, seed)?.output)
            }
            PotentialNet::Mlp(m) => {
                let n = m.num_particles;
                let extra: Vec<f64> = systems.iter().flat_map(|s| s.masses.iter().chain(&s.ks).copied()).collect();
                let extra = Tensor::from_vec(systems.len(), 2 * n, extra)?;
                m.mlp.forward(store, &Tensor::concat_cols(&[q.clone(), extra])?)
            }
        }
    }

    pub fn energy(&self, store: &ParameterStore, systems: &[SpringSystem], q: &Tensor, p: &Tensor, seed: u64) -> Result<Tensor> {
        SpringSystem::kinetic_tensor(systems, p)?.add(&self.potential(store, systems, q, seed)?)
    }
}

/// How per-step errors are aggregated over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    TrainArithmetic,
    TestGeometric,
}

/// Stacks the first state of each window into `B x 2nD`.
pub fn initial_states(windows: &[TrajectoryBatch]) -> Result<Tensor> {
    let first = windows.first().ok_or(Error::Empty("trajectory windows"))?;
    let w = first.states[0].len();
    let data: Vec<f64> = windows.iter().flat_map(|t| t.states[0].iter().copied()).collect();
    Tensor::from_vec(windows.len(), w, data)
}

/// Per-step squared error `mean_coords (z_t - z_t^true)^2`, `B x 1` for
/// `t = 1 ..= horizon`.
pub fn rollout_errors(
    h: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
    windows: &[TrajectoryBatch],
    horizon: usize,
    create_graph: bool,
) -> Result<Vec<Tensor>> {
    let z0 = initial_states(windows)?;
    if windows.iter().any(|t| t.states.len() <= horizon) {
        return Err(Error::Config(format!("horizon {horizon} exceeds a trajectory window")));
    }
    let dt = windows[0].dt;
    let rhs = |z: &Tensor| hamilton_rhs(h, z, create_graph);
    let traj = integrate(&rhs, &z0, dt, horizon, Method::Rk4)?;
    (1..=horizon)
        .map(|t| {
            let target: Vec<f64> = windows.iter().flat_map(|w| w.states[t].iter().copied()).collect();
            let target = Tensor::from_vec(z0.rows(), z0.cols(), target)?;
            Ok(traj[t].sub(&target)?.square().mean_cols())
        })
        .collect()
}

/// Roll-out loss over `horizon` rk4 steps from each window's first state.
///
/// `TrainArithmetic` averages the per-step errors over steps and windows
/// and stays differentiable through the integrator and the inner gradient.
/// `TestGeometric` takes the geometric mean over steps per window, then the
/// arithmetic mean over windows.
pub fn rollout_loss(
    h: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
    windows: &[TrajectoryBatch],
    horizon: usize,
    mode: LossMode,
) -> Result<Tensor> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let errs = rollout_errors(h, windows, horizon, mode == LossMode::TrainArithmetic)?;
    let stacked = Tensor::concat_cols(&errs)?;
    match mode {
        LossMode::TrainArithmetic => Ok(stacked.reduce_mean()),
        LossMode::TestGeometric => Ok(stacked.ln().mean_cols().exp().reduce_mean()),
    }
}

/// Geometric mean of positive values.
pub fn geometric_mean(values: &[f64]) -> f64 {
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Relative drifts of conserved quantities along an integrated trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    /// `max_t |E_t - E_0| / |E_0|`.
    pub energy_drift: f64,
    /// `max_t |P_t - P_0| / sum_i |p_i(0)|`.
    pub linear_momentum_drift: f64,
    /// `max_t |L_t - L_0| / sum_i |q_i(0) x p_i(0)|`.
    pub angular_momentum_drift: f64,
}

/// Integrates `h` from `z0` and reports the drifts.
pub fn conservation_audit(
    h: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
    z0: &[f64],
    steps: usize,
    dt: f64,
    method: Method,
) -> Result<ConservationReport> {
    let rhs = |z: &Tensor| hamilton_rhs(h, z, false);
    let traj = integrate(&rhs, &Tensor::row(z0), dt, steps, method)?;
    let d = z0.len() / 2;
    let energy = |z: &Tensor| -> Result<f64> {
        let (q, p) = super::integrate::split_state(z)?;
        Ok(h(&q, &p)?.item())
    };
    let e0 = energy(&traj[0])?;
    let c0 = Conserved::momenta(&z0[..d], &z0[d..]);
    let p_scale: f64 = z0[d..].chunks(SPACE_DIM).map(|p| p[0].hypot(p[1])).sum();
    let l_scale: f64 = z0[..d]
        .chunks(SPACE_DIM)
        .zip(z0[d..].chunks(SPACE_DIM))
        .map(|(q, p)| (q[0] * p[1] - q[1] * p[0]).abs())
        .sum();
    let mut report = ConservationReport {
        energy_drift: 0.0,
        linear_momentum_drift: 0.0,
        angular_momentum_drift: 0.0,
    };
    for z in &traj {
        let c = Conserved::momenta(&z.data()[..d], &z.data()[d..]);
        report.energy_drift = report.energy_drift.max(((energy(z)? - e0) / e0).abs());
        let dp = (c.linear[0] - c0.linear[0]).hypot(c.linear[1] - c0.linear[1]);
        report.linear_momentum_drift = report.linear_momentum_drift.max(dp / p_scale);
        report.angular_momentum_drift = report.angular_momentum_drift.max((c.angular - c0.angular).abs() / l_scale);
    }
    Ok(report)
}

/// The true Hamiltonian of a batch of systems as a closure.
pub fn true_hamiltonian(systems: &[SpringSystem]) -> impl Fn(&Tensor, &Tensor) -> Result<Tensor> + '_ {
    move |q, p| SpringSystem::kinetic_tensor(systems, p)?.add(&SpringSystem::potential_tensor(systems, q)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::dynamics::spring::{generate_spring_dataset, SpringDataConfig};
    use crate::group::GroupId;

    fn data() -> Vec<crate::dynamics::spring::SpringExample> {
        generate_spring_dataset(4, &SpringDataConfig { steps: 20, ..Default::default() }, 1).unwrap()
    }

    fn small_potential(group: GroupId) -> PotentialNet {
        PotentialNet::new(&PotentialConfig::Transformer(ModelConfig::small(group, 2, 1, TaskHead::Scalar, 8, 2, 1))).unwrap()
    }

    #[test]
    fn spatial_group_must_match_particles() {
        let cfg = PotentialConfig::Transformer(ModelConfig::small(GroupId::T(3), 2, 1, TaskHead::Scalar, 8, 2, 1));
        assert!(matches!(PotentialNet::new(&cfg), Err(Error::GroupMismatch(GroupId::T(3), GroupId::T(2)))));
    }

    #[test]
    fn true_hamiltonian_reproduces_data() {
        let d = data();
        let systems: Vec<_> = d.iter().map(|e| e.system.clone()).collect();
        let windows: Vec<_> = d.iter().map(|e| e.trajectory.window(3, 5).unwrap()).collect();
        let h = true_hamiltonian(&systems);
        let loss = rollout_loss(&h, &windows, 5, LossMode::TrainArithmetic).unwrap();
        assert!(loss.item() < 1e-10, "{}", loss.item());
    }

    #[test]
    fn geometric_vs_arithmetic() {
        assert!((geometric_mean(&[1e-6, 1e-2]) - 1e-4).abs() < 1e-16);
        let t = Tensor::row(&[1e-6, 1e-2]);
        assert!((t.ln().mean_cols().exp().item() - 1e-4).abs() < 1e-16);
        assert!((t.reduce_mean().item() - 5.0005e-3).abs() < 1e-15);
    }

    #[test]
    fn gradients_reach_parameters() {
        let d = data();
        let systems: Vec<_> = d.iter().map(|e| e.system.clone()).collect();
        let windows: Vec<_> = d.iter().map(|e| e.trajectory.window(0, 3).unwrap()).collect();
        let net = small_potential(GroupId::T(2));
        let store = net.init_store(2).unwrap();
        let loss_at = |store: &ParameterStore| {
            let h = |q: &Tensor, p: &Tensor| net.energy(store, &systems, q, p, 0);
            rollout_loss(&h, &windows, 3, LossMode::TrainArithmetic).unwrap()
        };
        let loss = loss_at(&store);
        let grads = backward(&loss).unwrap();
        let name = "block0.att.wv.weight";
        let g = grads.get(store.get(name).unwrap()).unwrap().get(0, 1);
        let eps = 1e-5;
        let mut plus = store.clone();
        let w = store.get(name).unwrap();
        let mut data = w.data().to_vec();
        data[1] += eps;
        plus.set(name, Tensor::from_vec(w.rows(), w.cols(), data.clone()).unwrap()).unwrap();
        let mut minus = store.clone();
        data[1] -= 2.0 * eps;
        minus.set(name, Tensor::from_vec(w.rows(), w.cols(), data).unwrap()).unwrap();
        let fd = (loss_at(&plus).item() - loss_at(&minus).item()) / (2.0 * eps);
        assert!(g != 0.0);
        assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "{g} vs {fd}");
    }

    #[test]
    fn translation_invariant_model_has_zero_net_force() {
        let d = data();
        let systems = vec![d[0].system.clone()];
        let net = small_potential(GroupId::T(2));
        let store = net.init_store(3).unwrap();
        let h = |q: &Tensor, p: &Tensor| net.energy(&store, &systems, q, p, 0);
        let z = Tensor::row(&d[0].trajectory.states[0]);
        let r = hamilton_rhs(&h, &z, false).unwrap();
        let (mut fx, mut fy) = (0.0, 0.0);
        for i in 0..6 {
            fx += r.get(0, 12 + 2 * i);
            fy += r.get(0, 12 + 2 * i + 1);
        }
        assert!(fx.hypot(fy) < 1e-9);
        let report = conservation_audit(&h, &d[0].trajectory.states[0], 100, 0.02, Method::Rk4).unwrap();
        assert!(report.linear_momentum_drift < 1e-6, "{report:?}");
    }

    #[test]
    fn ground_truth_audit() {
        let d = data();
        let systems = vec![d[1].system.clone()];
        let h = true_hamiltonian(&systems);
        let r = conservation_audit(&h, &d[1].trajectory.states[0], 500, 0.01, Method::Leapfrog).unwrap();
        assert!(r.energy_drift < 1e-4 && r.linear_momentum_drift < 1e-4 && r.angular_momentum_drift < 1e-4, "{r:?}");
    }

    #[test]
    fn mlp_control_breaks_momentum() {
        let d = data();
        let systems = vec![d[0].system.clone()];
        let net = PotentialNet::new(&PotentialConfig::Mlp(MlpPotentialConfig {
            num_particles: 6,
            hidden: vec![16],
        }))
        .unwrap();
        let store = net.init_store(4).unwrap();
        let h = |q: &Tensor, p: &Tensor| net.energy(&store, &systems, q, p, 0);
        let r = conservation_audit(&h, &d[0].trajectory.states[0], 100, 0.02, Method::Rk4).unwrap();
        assert!(r.linear_momentum_drift > 1e-4, "{r:?}");
    }
}
