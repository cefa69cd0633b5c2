//! Fully connected spring systems: `H = sum_i |p_i|^2 / 2 m_i
//! + 1/2 sum_{i<j} k_i k_j |q_i - q_j|^2` in the plane.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub const SPACE_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringSystem {
    pub masses: Vec<f64>,
    pub ks: Vec<f64>,
}

impl SpringSystem {
    pub fn new(masses: Vec<f64>, ks: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.len() != ks.len() {
            return Err(Error::DimensionMismatch {
                expected: masses.len(),
                actual: ks.len(),
            });
        }
        if masses.iter().chain(&ks).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("masses and spring constants must be positive".into()));
        }
        Ok(SpringSystem { masses, ks })
    }

    /// `n` particles with masses and constants log-uniform in `[0.5, 2]`.
    pub fn random(n: usize, rng_seed: u64) -> Self {
        let mut rng = seeded(rng_seed);
        let mut draw = || (rng.gen_range(0.5f64.ln()..=2f64.ln())).exp();
        let masses = (0..n).map(|_| draw()).collect();
        let ks = (0..n).map(|_| draw()).collect();
        SpringSystem { masses, ks }
    }

    pub fn n(&self) -> usize {
        self.masses.len()
    }

    /// Length of `q` (and of `p`).
    pub fn coord_dim(&self) -> usize {
        self.n() * SPACE_DIM
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != 2 * self.coord_dim() {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.coord_dim(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        let n = self.n();
        let mut v = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d2: f64 = (0..SPACE_DIM).map(|c| (q[i * SPACE_DIM + c] - q[j * SPACE_DIM + c]).powi(2)).sum();
                v += 0.5 * self.ks[i] * self.ks[j] * d2;
            }
        }
        v
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| (0..SPACE_DIM).map(|c| p[i * SPACE_DIM + c].powi(2)).sum::<f64>() / (2.0 * self.masses[i]))
            .sum()
    }

    /// `-dV/dq`.
    pub fn force(&self, q: &[f64]) -> Vec<f64> {
        let n = self.n();
        let ksum: f64 = self.ks.iter().sum();
        let mut kq = [0.0; SPACE_DIM];
        for i in 0..n {
            for c in 0..SPACE_DIM {
                kq[c] += self.ks[i] * q[i * SPACE_DIM + c];
            }
        }
        let mut f = vec![0.0; n * SPACE_DIM];
        for i in 0..n {
            for c in 0..SPACE_DIM {
                f[i * SPACE_DIM + c] = -self.ks[i] * (ksum * q[i * SPACE_DIM + c] - kq[c]);
            }
        }
        f
    }

    /// Kinetic term for a batch of momenta, one system per row.
    pub fn kinetic_tensor(systems: &[SpringSystem], p: &Tensor) -> Result<Tensor> {
        let inv_m = per_coord(systems, |s| s.masses.iter().map(|m| 0.5 / m).collect(), p)?;
        Ok(p.square().mul(&inv_m)?.sum_cols())
    }

    /// Potential for a batch of positions, one system per row, using
    /// `sum_{i<j} k_i k_j |q_i - q_j|^2 = (sum k)(sum k |q|^2) - |sum k q|^2`.
    pub fn potential_tensor(systems: &[SpringSystem], q: &Tensor) -> Result<Tensor> {
        let kw = per_coord(systems, |s| s.ks.clone(), q)?;
        let ksum = Tensor::column(&systems.iter().map(|s| s.ks.iter().sum()).collect::<Vec<f64>>());
        let n = systems[0].n();
        let kq = kw.mul(q)?;
        let s1 = kq.mul(q)?.sum_cols();
        let s2 = kq.fold_sum_cols(n)?.square().sum_cols();
        Ok(s1.mul(&ksum)?.sub(&s2)?.scale(0.5))
    }

    /// Total energy, linear momentum and angular momentum of a state.
    pub fn invariants(&self, z: &[f64]) -> Result<Conserved> {
        self.check(z)?;
        let d = self.coord_dim();
        let (q, p) = z.split_at(d);
        Ok(Conserved {
            energy: self.kinetic(p) + self.potential(q),
            ..Conserved::momenta(q, p)
        })
    }
}

/// Per-coordinate weights `w_i` expanded to the `B x nD` layout.
fn per_coord(systems: &[SpringSystem], w: impl Fn(&SpringSystem) -> Vec<f64>, x: &Tensor) -> Result<Tensor> {
    if systems.len() != x.rows() || systems.iter().any(|s| s.coord_dim() != x.cols()) {
        return Err(Error::Shape {
            op: "spring systems",
            lhs: x.shape().to_vec(),
            rhs: vec![systems.len(), systems.first().map_or(0, |s| s.coord_dim())],
        });
    }
    let data = systems
        .iter()
        .flat_map(|s| w(s).into_iter().flat_map(|v| std::iter::repeat_n(v, SPACE_DIM)))
        .collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}

/// Quantities a symmetric Hamiltonian conserves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conserved {
    pub energy: f64,
    pub linear: [f64; 2],
    pub angular: f64,
}

impl Conserved {
    pub fn momenta(q: &[f64], p: &[f64]) -> Conserved {
        let mut linear = [0.0; 2];
        let mut angular = 0.0;
        for (qi, pi) in q.chunks(SPACE_DIM).zip(p.chunks(SPACE_DIM)) {
            linear[0] += pi[0];
            linear[1] += pi[1];
            angular += qi[0] * pi[1] - qi[1] * pi[0];
        }
        Conserved {
            energy: 0.0,
            linear,
            angular,
        }
    }
}

/// `H(q, p)` for a flat state `z = (q, p)`.
pub fn spring_hamiltonian(sys: &SpringSystem, z: &[f64]) -> Result<f64> {
    Ok(sys.invariants(z)?.energy)
}

/// A simulated trajectory `z_0 .. z_T` at spacing `dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
}

impl TrajectoryBatch {
    pub fn new(states: Vec<Vec<f64>>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let width = states.first().map(Vec::len).ok_or(Error::Empty("trajectory"))?;
        if states.iter().any(|s| s.len() != width) || width % 2 != 0 {
            return Err(Error::Config("trajectory states have inconsistent widths".into()));
        }
        Ok(TrajectoryBatch { states, dt })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// States `start ..= start + horizon`.
    pub fn window(&self, start: usize, horizon: usize) -> Result<TrajectoryBatch> {
        if start + horizon >= self.states.len() {
            return Err(Error::Config(format!(
                "window {start}+{horizon} exceeds trajectory of {} states",
                self.states.len()
            )));
        }
        TrajectoryBatch::new(self.states[start..=start + horizon].to_vec(), self.dt)
    }
}

/// Ground truth by kick-drift-kick leapfrog with `substeps` sub-steps per
/// recorded step.
pub fn simulate(sys: &SpringSystem, z0: &[f64], dt: f64, steps: usize, substeps: usize) -> Result<TrajectoryBatch> {
    sys.check(z0)?;
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Config(format!("need dt > 0 and substeps >= 1, got {dt}, {substeps}")));
    }
    let d = sys.coord_dim();
    let h = dt / substeps as f64;
    let (mut q, mut p) = (z0[..d].to_vec(), z0[d..].to_vec());
    let inv_m: Vec<f64> = (0..d).map(|k| 1.0 / sys.masses[k / SPACE_DIM]).collect();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z0.to_vec());
    let mut f = sys.force(&q);
    for step in 1..=steps {
        for _ in 0..substeps {
            for k in 0..d {
                p[k] += 0.5 * h * f[k];
                q[k] += h * p[k] * inv_m[k];
            }
            f = sys.force(&q);
            for k in 0..d {
                p[k] += 0.5 * h * f[k];
            }
        }
        if q.iter().chain(&p).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        states.push(q.iter().chain(&p).copied().collect());
    }
    TrajectoryBatch::new(states, dt)
}

/// One simulated system with its trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringExample {
    pub system: SpringSystem,
    pub trajectory: TrajectoryBatch,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringDataConfig {
    pub num_particles: usize,
    pub steps: usize,
    pub dt: f64,
    pub substeps: usize,
}

impl Default for SpringDataConfig {
    fn default() -> Self {
        SpringDataConfig {
            num_particles: 6,
            steps: 500,
            dt: 0.02,
            substeps: 20,
        }
    }
}

/// Trajectory `i` uses seed `derive_seed(rng_seed, i)` for its system and
/// its initial state `q, p ~ N(0, 1)`.
pub fn generate_spring_dataset(num_trajectories: usize, cfg: &SpringDataConfig, rng_seed: u64) -> Result<Vec<SpringExample>> {
    if num_trajectories == 0 || cfg.num_particles == 0 || cfg.steps == 0 {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    (0..num_trajectories)
        .map(|i| {
            let seed = derive_seed(rng_seed, i as u64);
            let system = SpringSystem::random(cfg.num_particles, derive_seed(seed, 0));
            let mut rng = seeded(derive_seed(seed, 1));
            let z0: Vec<f64> = (0..2 * system.coord_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let trajectory = simulate(&system, &z0, cfg.dt, cfg.steps, cfg.substeps)?;
            Ok(SpringExample { system, trajectory, seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate::{hamilton_rhs, integrate, Method};

    #[test]
    fn hamiltonian_examples() {
        let sys = SpringSystem::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(spring_hamiltonian(&sys, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(spring_hamiltonian(&sys, &[2.0, 3.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(spring_hamiltonian(&sys, &[0.0; 3]).is_err());
        assert!(SpringSystem::new(vec![1.0], vec![-1.0]).is_err());
    }

    #[test]
    fn rigid_motion_invariance() {
        let sys = SpringSystem::random(6, 3);
        let mut rng = seeded(4);
        let z: Vec<f64> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
        let (th, t) = (1.1_f64, [0.4, -2.0]);
        let (c, s) = (th.cos(), th.sin());
        let mut moved = z.clone();
        for i in 0..12 {
            let (x, y) = (z[2 * i], z[2 * i + 1]);
            let (tx, ty) = if i < 6 { (t[0], t[1]) } else { (0.0, 0.0) };
            moved[2 * i] = c * x - s * y + tx;
            moved[2 * i + 1] = s * x + c * y + ty;
        }
        let a = spring_hamiltonian(&sys, &z).unwrap();
        let b = spring_hamiltonian(&sys, &moved).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn tensor_form_matches_direct_sum() {
        let systems = [SpringSystem::random(6, 1), SpringSystem::random(6, 2)];
        let mut rng = seeded(5);
        let q = Tensor::from_vec(2, 12, (0..24).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let v = SpringSystem::potential_tensor(&systems, &q).unwrap();
        let k = SpringSystem::kinetic_tensor(&systems, &q).unwrap();
        for (b, s) in systems.iter().enumerate() {
            assert!((v.get(b, 0) - s.potential(q.row_slice(b))).abs() < 1e-12);
            assert!((k.get(b, 0) - s.kinetic(q.row_slice(b))).abs() < 1e-12);
        }
    }

    #[test]
    fn force_matches_autodiff() {
        let sys = SpringSystem::random(5, 9);
        let mut rng = seeded(6);
        let z: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let systems = [sys.clone()];
        let h = |q: &Tensor, p: &Tensor| {
            SpringSystem::kinetic_tensor(&systems, p)?.add(&SpringSystem::potential_tensor(&systems, q)?)
        };
        let rhs = hamilton_rhs(&h, &Tensor::row(&z), false).unwrap();
        let f = sys.force(&z[..10]);
        for k in 0..10 {
            assert!((rhs.get(0, 10 + k) - f[k]).abs() < 1e-12);
            assert!((rhs.get(0, k) - z[10 + k] / sys.masses[k / 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn simulate_matches_generic_leapfrog() {
        let sys = SpringSystem::random(4, 2);
        let mut rng = seeded(7);
        let z0: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let traj = simulate(&sys, &z0, 0.01, 50, 1).unwrap();
        let systems = [sys];
        let h = |q: &Tensor, p: &Tensor| {
            SpringSystem::kinetic_tensor(&systems, p)?.add(&SpringSystem::potential_tensor(&systems, q)?)
        };
        let rhs = |z: &Tensor| hamilton_rhs(&h, z, false);
        let generic = integrate(&rhs, &Tensor::row(&z0), 0.01, 50, Method::Leapfrog).unwrap();
        for (a, b) in traj.states.iter().zip(&generic) {
            assert!(Tensor::row(a).max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn dataset_conserves_and_is_deterministic() {
        let cfg = SpringDataConfig::default();
        let a = generate_spring_dataset(3, &cfg, 11).unwrap();
        let b = generate_spring_dataset(3, &cfg, 11).unwrap();
        assert_eq!(a, b);
        for ex in &a {
            assert_eq!(ex.trajectory.len(), 501);
            let c0 = ex.system.invariants(&ex.trajectory.states[0]).unwrap();
            for z in &ex.trajectory.states {
                let c = ex.system.invariants(z).unwrap();
                assert!(((c.energy - c0.energy) / c0.energy).abs() < 1e-4);
                assert!((c.linear[0] - c0.linear[0]).abs().max((c.linear[1] - c0.linear[1]).abs()) < 1e-8);
            }
        }
        let w = a[0].trajectory.window(10, 5).unwrap();
        assert_eq!(w.states[0], a[0].trajectory.states[10]);
        assert!(a[0].trajectory.window(496, 5).is_err());
    }
}
