//! Numerical audit of a group's exp/log maps and left-invariance of the
//! distance.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{compose, exp_map, inverse, log_map, oracle::generic_log, AlgebraVector, GroupElement, GroupId};
use crate::rng::seeded;

pub const ROUND_TRIP_TOL: f64 = 1e-8;
pub const ORACLE_TOL: f64 = 1e-7;
pub const INVARIANCE_TOL: f64 = 1e-9;

/// Rotation angles are drawn from `[0, pi - ANGLE_MARGIN]`.
const ANGLE_MARGIN: f64 = 0.05;
const TRANSLATION_SCALE: f64 = 3.0;
/// Offsets from `pi` at which a 3D log must refuse.
const NEAR_PI_OFFSETS: [f64; 4] = [0.0, 1e-9, 1e-7, 5e-7];

pub type LogFn<'a> = &'a dyn Fn(&GroupElement) -> Result<AlgebraVector>;

/// Maximum errors per property, plus the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAudit {
    pub group: GroupId,
    pub samples: usize,
    pub seed: u64,
    /// `max |log(exp v) - v|`.
    pub log_exp_round_trip: f64,
    /// `max |exp(log g) - g|` over matrix entries.
    pub exp_log_round_trip: f64,
    /// `max |log g - generic matrix log|`.
    pub oracle_log: f64,
    pub oracle_comparisons: usize,
    /// `max |d(ug, ug') - d(g, g')|`.
    pub distance_invariance: f64,
    pub distance_pairs: usize,
    /// Near-pi rotations that the log map rejected, out of `near_pi_trials`.
    pub near_pi_rejections: Option<usize>,
    pub near_pi_trials: usize,
    pub violations: Vec<String>,
}

impl GroupAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Algebra coordinates with rotation angle at most `pi - ANGLE_MARGIN`.
pub fn random_algebra(group: GroupId, rng: &mut ChaCha8Rng) -> AlgebraVector {
    let max_angle = PI - ANGLE_MARGIN;
    let mut t = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-TRANSLATION_SCALE..TRANSLATION_SCALE)).collect() };
    let coords = match group {
        GroupId::T(n) => t(n),
        GroupId::SO2 => vec![rng.gen_range(-max_angle..max_angle)],
        GroupId::Cyclic(n) => {
            let k = rng.gen_range(0..n) as f64;
            vec![crate::group::normalize_angle(2.0 * PI * k / n as f64)]
        }
        GroupId::SE2 => {
            let mut c = t(2);
            c.push(rng.gen_range(-max_angle..max_angle));
            c
        }
        GroupId::SO3 | GroupId::SE3 => {
            let mut c = if group == GroupId::SE3 { t(3) } else { Vec::new() };
            let w = unit_vector(rng) * rng.gen_range(0.0..max_angle);
            c.extend(w.iter());
            c
        }
    };
    AlgebraVector::new(group, coords).expect("coordinate count matches algebra_dim")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rotation_angle(v: &AlgebraVector) -> f64 {
    let c = v.coords();
    match v.group() {
        GroupId::T(_) => 0.0,
        GroupId::SO2 | GroupId::Cyclic(_) => c[0].abs(),
        GroupId::SE2 => c[2].abs(),
        GroupId::SO3 => Vector3::new(c[0], c[1], c[2]).norm(),
        GroupId::SE3 => Vector3::new(c[3], c[4], c[5]).norm(),
    }
}

/// Audits `group` with the crate's log map.
pub fn audit_group(group: GroupId, samples: usize, seed: u64) -> Result<GroupAudit> {
    audit_group_with(group, samples, seed, &log_map)
}

/// Audits `group` with a caller-supplied log map. Errors from `log` on
/// regular samples count as violations, not as failures of the audit.
pub fn audit_group_with(group: GroupId, samples: usize, seed: u64, log: LogFn<'_>) -> Result<GroupAudit> {
    group.validate()?;
    if samples == 0 {
        return Err(Error::Empty("audit samples"));
    }
    let mut rng = seeded(seed);
    let mut violations = Vec::new();
    let mut log_exp = 0.0_f64;
    let mut exp_log = 0.0_f64;
    let mut oracle = 0.0_f64;
    let mut oracle_comparisons = 0;
    let mut elements = Vec::with_capacity(samples);
    let mut log_failures = 0;

    for _ in 0..samples {
        let v = random_algebra(group, &mut rng);
        let g = exp_map(&v);
        match log(&g) {
            Ok(w) => {
                log_exp = log_exp.max(max_abs_diff(v.coords(), w.coords()));
                let back = exp_map(&w);
                exp_log = exp_log.max((back.matrix() - g.matrix()).amax());
                // The dense logarithm is not unique at angle pi.
                if rotation_angle(&v) < PI - 1e-3 {
                    let o = generic_log(&g)?;
                    oracle = oracle.max(max_abs_diff(w.coords(), o.coords()));
                    oracle_comparisons += 1;
                }
            }
            Err(_) => log_failures += 1,
        }
        elements.push(g);
    }
    if log_failures > 0 {
        violations.push(format!("log failed on {log_failures} regular samples"));
    }
    if log_exp >= ROUND_TRIP_TOL {
        violations.push(format!("log(exp v) round trip {log_exp:e} >= {ROUND_TRIP_TOL:e}"));
    }
    if exp_log >= ROUND_TRIP_TOL {
        violations.push(format!("exp(log g) round trip {exp_log:e} >= {ROUND_TRIP_TOL:e}"));
    }
    if oracle >= ORACLE_TOL {
        violations.push(format!("log vs dense matrix log {oracle:e} >= {ORACLE_TOL:e}"));
    }

    // d(g, g') through the supplied log, so a broken log shows up here too.
    let dist = |a: &GroupElement, b: &GroupElement| -> Option<f64> {
        let rel = compose(&inverse(a), b).ok()?;
        log(&rel).ok().map(|v| v.norm())
    };
    let mut invariance = 0.0_f64;
    let mut pairs = 0;
    for pair in elements.chunks_exact(2) {
        let u = exp_map(&random_algebra(group, &mut rng));
        let (Some(d0), Some(d1)) = (
            dist(&pair[0], &pair[1]),
            dist(&compose(&u, &pair[0])?, &compose(&u, &pair[1])?),
        ) else {
            // g^-1 g' landed on the log singularity.
            continue;
        };
        invariance = invariance.max((d0 - d1).abs());
        pairs += 1;
    }
    if invariance >= INVARIANCE_TOL {
        violations.push(format!("distance invariance {invariance:e} >= {INVARIANCE_TOL:e}"));
    }

    let (near_pi_rejections, near_pi_trials) = if matches!(group, GroupId::SO3 | GroupId::SE3) {
        let mut rejected = 0;
        for &offset in &NEAR_PI_OFFSETS {
            let mut c = if group == GroupId::SE3 { vec![0.5, -0.25, 1.0] } else { Vec::new() };
            c.extend((unit_vector(&mut rng) * (PI - offset)).iter());
            let g = exp_map(&AlgebraVector::new(group, c)?);
            if matches!(log(&g), Err(Error::LogSingularity { .. })) {
                rejected += 1;
            }
        }
        if rejected != NEAR_PI_OFFSETS.len() {
            violations.push(format!("only {rejected}/{} near-pi rotations rejected", NEAR_PI_OFFSETS.len()));
        }
        (Some(rejected), NEAR_PI_OFFSETS.len())
    } else {
        (None, 0)
    };

    Ok(GroupAudit {
        group,
        samples,
        seed,
        log_exp_round_trip: log_exp,
        exp_log_round_trip: exp_log,
        oracle_log: oracle,
        oracle_comparisons,
        distance_invariance: invariance,
        distance_pairs: pairs,
        near_pi_rejections,
        near_pi_trials,
        violations,
    })
}
