//! Group-agnostic dense matrix exponential and logarithm.
//!
//! These routines know nothing about the closed forms in `exp_log`; they exist
//! to cross-check them (tests and the `audit-group` command).

use nalgebra::DMatrix;

use super::{normalize_angle, AlgebraVector, GroupElement, GroupId};
use crate::error::{Error, Result};

/// Truncated power series `sum_{k < terms} A^k / k!`.
pub fn matrix_exp_series(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..terms {
        term = &term * a / k as f64;
        out += &term;
    }
    out
}

fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().ok_or_else(|| Error::Config("singular matrix in sqrtm".into()))?;
        let zi = z.clone().try_inverse().ok_or_else(|| Error::Config("singular matrix in sqrtm".into()))?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).amax();
        y = y_next;
        z = z_next;
        if delta < 1e-15 * y.amax().max(1.0) {
            return Ok(y);
        }
    }
    Ok(y)
}

/// Principal matrix logarithm by inverse scaling and squaring: repeated square
/// roots until `||A - I|| < 1/4`, then the Mercator series, then rescaling.
pub fn matrix_log(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut squarings = 0u32;
    while (&x - &eye).norm() > 0.25 {
        if squarings > 40 {
            return Err(Error::Config("matrix_log did not converge".into()));
        }
        x = sqrtm_denman_beavers(&x)?;
        squarings += 1;
    }
    let e = &x - &eye;
    let mut out = DMatrix::zeros(n, n);
    let mut power = e.clone();
    for k in 1..80 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        out += &power * (sign / k as f64);
        power = &power * &e;
        if power.amax() < 1e-300 {
            break;
        }
    }
    Ok(out * 2f64.powi(squarings as i32))
}

/// Reads the free parameters out of a Lie algebra matrix, in the same layout
/// as [`AlgebraVector`].
pub fn vee(group: GroupId, l: &DMatrix<f64>) -> Result<AlgebraVector> {
    let coords = match group {
        GroupId::T(n) => (0..n).map(|i| l[(i, n)]).collect(),
        GroupId::SO2 | GroupId::Cyclic(_) => vec![normalize_angle(l[(1, 0)])],
        GroupId::SE2 => vec![l[(0, 2)], l[(1, 2)], normalize_angle(l[(1, 0)])],
        GroupId::SO3 => vec![l[(2, 1)], l[(0, 2)], l[(1, 0)]],
        GroupId::SE3 => vec![l[(0, 3)], l[(1, 3)], l[(2, 3)], l[(2, 1)], l[(0, 2)], l[(1, 0)]],
    };
    AlgebraVector::new(group, coords)
}

/// `nu[log g]` through the generic dense logarithm.
pub fn generic_log(g: &GroupElement) -> Result<AlgebraVector> {
    vee(g.group(), &matrix_log(g.matrix())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_inverts_exp_series_for_rotation() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, -0.7, 0.2, 0.7, 0.0, -0.4, -0.2, 0.4, 0.0]);
        let r = matrix_exp_series(&a, 40);
        let l = matrix_log(&r).unwrap();
        assert!((l - a).amax() < 1e-12);
    }

    #[test]
    fn log_of_unipotent_translation() {
        let t = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.5, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0]);
        let l = matrix_log(&t).unwrap();
        assert!((l[(0, 2)] - 2.5).abs() < 1e-12 && (l[(1, 2)] + 1.0).abs() < 1e-12);
    }
}
