//! Closed-form exponential and logarithm maps.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{normalize_angle, rot2, AlgebraVector, GroupElement, GroupId};
use crate::error::{Error, Result};

/// Below this rotation angle the trigonometric ratios switch to Taylor series.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;

/// The 3D log refuses rotations whose angle is this close to `pi`.
pub const PI_SINGULARITY_TOL: f64 = 1e-6;

// Above this angle the rotation axis is recovered from the symmetric part.
const NEAR_PI_AXIS: f64 = PI - 1e-2;

fn small(theta: f64) -> bool {
    theta.abs() < TAYLOR_THRESHOLD
}

/// `sin(t)/t`
fn sinc(t: f64) -> f64 {
    if small(t) {
        let t2 = t * t;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        t.sin() / t
    }
}

/// `(1 - cos t)/t^2`
fn one_minus_cos_over_sq(t: f64) -> f64 {
    if small(t) {
        let t2 = t * t;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        let h = (0.5 * t).sin();
        2.0 * h * h / (t * t)
    }
}

/// `(t - sin t)/t^3`
fn t_minus_sin_over_cube(t: f64) -> f64 {
    if small(t) {
        let t2 = t * t;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (t - t.sin()) / (t * t * t)
    }
}

/// `t/(2 sin t)`
fn half_t_over_sin(t: f64) -> f64 {
    if small(t) {
        let t2 = t * t;
        0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0
    } else {
        t / (2.0 * t.sin())
    }
}

/// `(1 - (t/2) cot(t/2)) / t^2`, the `K^2` coefficient of the inverse left Jacobian.
fn inv_jacobian_coeff(t: f64) -> f64 {
    if small(t) {
        let t2 = t * t;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let h = 0.5 * t;
        (1.0 - h * h.cos() / h.sin()) / (t * t)
    }
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee_antisym(r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
}

fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    Matrix3::identity() + k * sinc(theta) + k * k * one_minus_cos_over_sq(theta)
}

/// `V` matrix mapping algebra translation to group translation in SE(3).
fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    Matrix3::identity() + k * one_minus_cos_over_sq(theta) + k * k * t_minus_sin_over_cube(theta)
}

fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    Matrix3::identity() - k * 0.5 + k * k * inv_jacobian_coeff(theta)
}

fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let vee = vee_antisym(r);
    let sin_t = 0.5 * vee.norm();
    let cos_t = 0.5 * (r.trace() - 1.0);
    let theta = sin_t.atan2(cos_t);
    if PI - theta < PI_SINGULARITY_TOL {
        return Err(Error::LogSingularity {
            angle: theta,
            tolerance: PI_SINGULARITY_TOL,
        });
    }
    if theta > NEAR_PI_AXIS {
        // n n^T = (R + R^T - 2 cos t I) / (2 (1 - cos t)); take the best-conditioned column.
        let sym = (r + r.transpose() - Matrix3::identity() * (2.0 * cos_t)) / (2.0 * (1.0 - cos_t));
        let i = (0..3)
            .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
            .unwrap();
        let mut axis = sym.column(i).into_owned() / sym[(i, i)].sqrt();
        axis /= axis.norm();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return Ok(axis * theta);
    }
    Ok(vee * half_t_over_sin(theta))
}

fn mat3(m: &DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[(i, j)])
}

/// Exponential map `exp(nu^{-1}(v))`.
///
/// For `C_n` the angle is rounded to the nearest multiple of `2 pi / n`, the
/// only points of the discrete group.
pub fn exp_map(v: &AlgebraVector) -> GroupElement {
    let group = v.group();
    let c = v.coords();
    let n = group.matrix_size();
    let mut m = DMatrix::<f64>::identity(n, n);
    match group {
        GroupId::T(d) => {
            for i in 0..d {
                m[(i, d)] = c[i];
            }
        }
        GroupId::SO2 => m.copy_from(&rot2(c[0])),
        GroupId::Cyclic(k) => {
            let step = 2.0 * PI / k as f64;
            m.copy_from(&rot2((c[0] / step).round() * step));
        }
        GroupId::SE2 => {
            let theta = c[2];
            let a = sinc(theta);
            let b = theta * one_minus_cos_over_sq(theta);
            m.view_mut((0, 0), (2, 2)).copy_from(&rot2(theta));
            m[(0, 2)] = a * c[0] - b * c[1];
            m[(1, 2)] = b * c[0] + a * c[1];
        }
        GroupId::SO3 => {
            let r = so3_exp(&Vector3::new(c[0], c[1], c[2]));
            m.copy_from(&DMatrix::from_fn(3, 3, |i, j| r[(i, j)]));
        }
        GroupId::SE3 => {
            let w = Vector3::new(c[3], c[4], c[5]);
            let r = so3_exp(&w);
            let t = so3_left_jacobian(&w) * Vector3::new(c[0], c[1], c[2]);
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = r[(i, j)];
                }
                m[(i, 3)] = t[i];
            }
        }
    }
    GroupElement::from_matrix_unchecked(group, m)
}

/// Linear map taking the raw translation of an element with rotation
/// coordinates `rot` to the translation block of its log coordinates
/// (`V^{-1}`). Identity for pure translations.
pub(crate) fn log_translation_operator(group: GroupId, rot: &[f64]) -> DMatrix<f64> {
    match group {
        GroupId::SE2 => {
            let theta = rot[0];
            let a = sinc(theta);
            let b = theta * one_minus_cos_over_sq(theta);
            let det = a * a + b * b;
            DMatrix::from_row_slice(2, 2, &[a / det, b / det, -b / det, a / det])
        }
        GroupId::SE3 => {
            let m = so3_left_jacobian_inv(&Vector3::new(rot[0], rot[1], rot[2]));
            DMatrix::from_fn(3, 3, |i, j| m[(i, j)])
        }
        GroupId::T(d) => DMatrix::identity(d, d),
        GroupId::SO2 | GroupId::SO3 | GroupId::Cyclic(_) => DMatrix::zeros(0, 0),
    }
}

/// Logarithm map `nu[log g]`, angles normalised to `(-pi, pi]`.
///
/// Fails with [`Error::LogSingularity`] for 3D rotations within
/// [`PI_SINGULARITY_TOL`] of `pi`, where the branch is ambiguous.
pub fn log_map(g: &GroupElement) -> Result<AlgebraVector> {
    let group = g.group();
    let m = g.matrix();
    let coords = match group {
        GroupId::T(_) => g.translation_part(),
        GroupId::SO2 | GroupId::Cyclic(_) => vec![normalize_angle(m[(1, 0)].atan2(m[(0, 0)]))],
        GroupId::SE2 => {
            let theta = normalize_angle(m[(1, 0)].atan2(m[(0, 0)]));
            let a = sinc(theta);
            let b = theta * one_minus_cos_over_sq(theta);
            let det = a * a + b * b;
            let (tx, ty) = (m[(0, 2)], m[(1, 2)]);
            vec![(a * tx + b * ty) / det, (-b * tx + a * ty) / det, theta]
        }
        GroupId::SO3 => {
            let w = so3_log(&mat3(m))?;
            vec![w.x, w.y, w.z]
        }
        GroupId::SE3 => {
            let r = mat3(&g.rotation());
            let w = so3_log(&r)?;
            let t = so3_left_jacobian_inv(&w) * Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
            vec![t.x, t.y, t.z, w.x, w.y, w.z]
        }
    };
    AlgebraVector::new(group, coords)
}

#[cfg(test)]
mod tests {
    use super::super::oracle::{matrix_exp_series, matrix_log};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exp_of_zero_is_identity() {
        for g in [GroupId::T(2), GroupId::SO2, GroupId::SE2, GroupId::SO3, GroupId::SE3, GroupId::Cyclic(4)] {
            assert_eq!(exp_map(&AlgebraVector::zero(g)), GroupElement::identity(g));
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        for g in [GroupId::T(3), GroupId::SO2, GroupId::SE2, GroupId::SO3, GroupId::SE3] {
            let v = log_map(&GroupElement::identity(g)).unwrap();
            assert!(v.coords().iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn so2_exp_matches_rotation_matrix() {
        let r = exp_map(&AlgebraVector::new(GroupId::SO2, vec![0.3]).unwrap());
        let (s, c) = 0.3f64.sin_cos();
        let expect = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((r.matrix() - expect).amax() < 1e-15);
    }

    #[test]
    fn t3_log_is_translation() {
        let t = GroupElement::translation(GroupId::T(3), &[1.5, -2.0, 0.5]).unwrap();
        assert_eq!(log_map(&t).unwrap().coords(), &[1.5, -2.0, 0.5]);
    }

    #[test]
    fn se3_exp_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            let g = exp_map(&AlgebraVector::new(GroupId::SE3, v.clone()).unwrap());
            let mut xi = DMatrix::zeros(4, 4);
            let w = Vector3::new(v[3], v[4], v[5]);
            let k = hat(&w);
            for i in 0..3 {
                for j in 0..3 {
                    xi[(i, j)] = k[(i, j)];
                }
                xi[(i, 3)] = v[i];
            }
            let series = matrix_exp_series(&xi, 30);
            assert!((g.matrix() - series).amax() < 1e-10);
        }
    }

    #[test]
    fn round_trip_small_and_moderate_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for group in [GroupId::SO2, GroupId::SE2, GroupId::SO3, GroupId::SE3] {
            for scale in [1e-9, 1e-5, 9.9e-5, 1.01e-4, 1e-2, 1.0] {
                for _ in 0..20 {
                    let v: Vec<f64> = (0..group.algebra_dim()).map(|_| rng.gen_range(-scale..scale)).collect();
                    let av = AlgebraVector::new(group, v.clone()).unwrap();
                    let back = log_map(&exp_map(&av)).unwrap();
                    for (a, b) in v.iter().zip(back.coords()) {
                        assert!((a - b).abs() < 1e-12 + 1e-9 * scale, "{group} {scale}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn so3_log_near_pi_uses_symmetric_part() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        for theta in [PI - 5e-3, PI - 1e-4, PI - 2e-6] {
            let w = axis * theta;
            let g = exp_map(&AlgebraVector::new(GroupId::SO3, vec![w.x, w.y, w.z]).unwrap());
            let back = log_map(&g).unwrap();
            let err = (Vector3::from_column_slice(back.coords()) - w).amax();
            assert!(err < 1e-7, "theta {theta}: {err}");
        }
    }

    #[test]
    fn so3_log_rejects_pi() {
        let g = exp_map(&AlgebraVector::new(GroupId::SO3, vec![0.0, 0.0, PI]).unwrap());
        assert!(matches!(log_map(&g), Err(Error::LogSingularity { .. })));
        let g = exp_map(&AlgebraVector::new(GroupId::SE3, vec![1.0, 0.0, 0.0, PI - 1e-8, 0.0, 0.0]).unwrap());
        assert!(matches!(log_map(&g), Err(Error::LogSingularity { .. })));
    }

    #[test]
    fn so3_log_matches_generic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.7..1.7)).collect();
            let g = exp_map(&AlgebraVector::new(GroupId::SO3, v).unwrap());
            let w = log_map(&g).unwrap();
            let l = matrix_log(g.matrix()).unwrap();
            let ow = [l[(2, 1)], l[(0, 2)], l[(1, 0)]];
            for (a, b) in w.coords().iter().zip(ow) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn se2_angle_normalised() {
        let g = exp_map(&AlgebraVector::new(GroupId::SE2, vec![0.2, 0.1, 3.5]).unwrap());
        let v = log_map(&g).unwrap();
        assert!(v.coords()[2] > -PI && v.coords()[2] <= PI);
        assert!((v.coords()[2] - (3.5 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn cyclic_exp_snaps_to_group() {
        let g = exp_map(&AlgebraVector::new(GroupId::Cyclic(4), vec![1.4]).unwrap());
        assert!((g.angle().unwrap() - PI / 2.0).abs() < 1e-15);
    }
}
