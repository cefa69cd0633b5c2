//! Matrix Lie groups acting on Euclidean base spaces.
//!
//! Elements are stored as real matrices: `n x n` rotations for the pure
//! rotation groups and `(n+1) x (n+1)` homogeneous blocks `[[R, x], [0, 1]]`
//! for translations and roto-translations. All arithmetic is done in `f64`.

mod exp_log;
mod lift;
pub mod oracle;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use exp_log::{exp_map, log_map, PI_SINGULARITY_TOL, TAYLOR_THRESHOLD};
pub use lift::{
    lift, lift_per_point, lift_with_section, lift_with_stabiliser, neighbourhood, random_transform,
    sample_stabiliser,
    sample_stabiliser_with, LiftSampling,
    LiftedFeatureMap,
};

const ORTHO_TOL: f64 = 1e-10;
const REORTHO_DRIFT: f64 = 1e-12;

/// Supported groups.
///
/// `Cyclic(n)` is the rotation subgroup `C_n < SO(2)`. When used as a lifting
/// group it stands for the discrete roto-translations `T(2) x| C_n`, whose
/// lifted elements are `SE(2)` matrices with rotation parts in `C_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum GroupId {
    T(usize),
    SO2,
    SE2,
    SO3,
    SE3,
    Cyclic(usize),
}

impl GroupId {
    pub fn validate(self) -> Result<Self> {
        match self {
            GroupId::T(n) if !(1..=3).contains(&n) => {
                Err(Error::Config(format!("T(n) requires n in 1..=3, got {n}")))
            }
            GroupId::Cyclic(0) => Err(Error::Config("Cyclic(n) requires n >= 1".into())),
            g => Ok(g),
        }
    }

    /// Side length of the matrix representation.
    pub fn matrix_size(self) -> usize {
        match self {
            GroupId::T(n) => n + 1,
            GroupId::SO2 | GroupId::Cyclic(_) => 2,
            GroupId::SE2 => 3,
            GroupId::SO3 => 3,
            GroupId::SE3 => 4,
        }
    }

    /// Dimension `d` of the free-parameter vector `nu[log g]`.
    pub fn algebra_dim(self) -> usize {
        match self {
            GroupId::T(n) => n,
            GroupId::SO2 | GroupId::Cyclic(_) => 1,
            GroupId::SE2 | GroupId::SO3 => 3,
            GroupId::SE3 => 6,
        }
    }

    /// Size of the rotation block.
    pub fn rotation_dim(self) -> usize {
        match self {
            GroupId::T(n) => n,
            GroupId::SO2 | GroupId::SE2 | GroupId::Cyclic(_) => 2,
            GroupId::SO3 | GroupId::SE3 => 3,
        }
    }

    /// Whether elements carry a translation column.
    pub fn has_translation(self) -> bool {
        matches!(self, GroupId::T(_) | GroupId::SE2 | GroupId::SE3)
    }

    /// Dimension of the Euclidean base space the group acts on transitively,
    /// or `None` for the pure rotation groups.
    pub fn space_dim(self) -> Option<usize> {
        match self {
            GroupId::T(n) => Some(n),
            GroupId::SE2 | GroupId::Cyclic(_) => Some(2),
            GroupId::SE3 => Some(3),
            GroupId::SO2 | GroupId::SO3 => None,
        }
    }

    /// The group whose matrices populate a lifted feature map.
    pub fn lifted_group(self) -> Result<GroupId> {
        match self {
            GroupId::T(_) | GroupId::SE2 | GroupId::SE3 => Ok(self),
            GroupId::Cyclic(_) => Ok(GroupId::SE2),
            g => Err(Error::NotHomogeneous(g)),
        }
    }

    pub fn is_rotation_only(self) -> bool {
        !self.has_translation()
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::T(n) => write!(f, "t{n}"),
            GroupId::SO2 => f.write_str("so2"),
            GroupId::SE2 => f.write_str("se2"),
            GroupId::SO3 => f.write_str("so3"),
            GroupId::SE3 => f.write_str("se3"),
            GroupId::Cyclic(n) => write!(f, "c{n}"),
        }
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parsed = match lower.as_str() {
            "so2" => GroupId::SO2,
            "se2" => GroupId::SE2,
            "so3" => GroupId::SO3,
            "se3" => GroupId::SE3,
            other => {
                let num = |rest: &str| {
                    rest.parse::<usize>()
                        .map_err(|_| Error::Config(format!("unknown group tag `{s}`")))
                };
                if let Some(rest) = other.strip_prefix('t') {
                    GroupId::T(num(rest)?)
                } else if let Some(rest) = other.strip_prefix('c') {
                    GroupId::Cyclic(num(rest)?)
                } else {
                    return Err(Error::Config(format!("unknown group tag `{s}`")));
                }
            }
        };
        parsed.validate()
    }
}

impl From<GroupId> for String {
    fn from(g: GroupId) -> Self {
        g.to_string()
    }
}

impl TryFrom<String> for GroupId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

pub(crate) fn rot2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// A point of the base space `R^{d_x}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialPoint(pub Vec<f64>);

impl SpatialPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        SpatialPoint(coords.into())
    }

    pub fn origin(dim: usize) -> Self {
        SpatialPoint(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// Free-parameter vector `nu[log g]` of a group element.
///
/// Layouts: `T(n)` -> `t`; `SO(2)`/`C_n` -> `theta`; `SE(2)` -> `(t', theta)`;
/// `SO(3)` -> rotation vector; `SE(3)` -> `(t', r')`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgebraVector {
    group: GroupId,
    coords: Vec<f64>,
}

impl AlgebraVector {
    pub fn new(group: GroupId, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != group.algebra_dim() {
            return Err(Error::DimensionMismatch {
                expected: group.algebra_dim(),
                actual: coords.len(),
            });
        }
        Ok(AlgebraVector { group, coords })
    }

    pub fn zero(group: GroupId) -> Self {
        AlgebraVector {
            group,
            coords: vec![0.0; group.algebra_dim()],
        }
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// A member of a matrix Lie group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    group: GroupId,
    matrix: DMatrix<f64>,
}

impl GroupElement {
    /// Validates shape, orthogonality, determinant and group-specific structure.
    pub fn new(group: GroupId, matrix: DMatrix<f64>) -> Result<Self> {
        let g = GroupElement { group, matrix };
        g.check()?;
        Ok(g)
    }

    pub(crate) fn from_matrix_unchecked(group: GroupId, matrix: DMatrix<f64>) -> Self {
        GroupElement { group, matrix }
    }

    pub fn identity(group: GroupId) -> Self {
        let n = group.matrix_size();
        GroupElement {
            group,
            matrix: DMatrix::identity(n, n),
        }
    }

    /// Builds an element from a rotation block and (for groups with
    /// translations) a translation vector.
    pub fn from_parts(group: GroupId, rotation: &DMatrix<f64>, translation: &[f64]) -> Result<Self> {
        let r = group.rotation_dim();
        if rotation.nrows() != r || rotation.ncols() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                actual: rotation.nrows(),
            });
        }
        let n = group.matrix_size();
        let mut m = DMatrix::identity(n, n);
        m.view_mut((0, 0), (r, r)).copy_from(rotation);
        if group.has_translation() {
            if translation.len() != r {
                return Err(Error::DimensionMismatch {
                    expected: r,
                    actual: translation.len(),
                });
            }
            for (i, t) in translation.iter().enumerate() {
                m[(i, r)] = *t;
            }
        } else if !translation.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 0,
                actual: translation.len(),
            });
        }
        GroupElement::new(group, m)
    }

    /// Pure translation `t_x` in `T(n)`, `SE(2)` or `SE(3)`.
    pub fn translation(group: GroupId, t: &[f64]) -> Result<Self> {
        if !group.has_translation() {
            return Err(Error::InvalidElement {
                group,
                reason: "group has no translations".into(),
            });
        }
        let r = group.rotation_dim();
        GroupElement::from_parts(group, &DMatrix::identity(r, r), t)
    }

    /// Planar rotation by `theta` in `SO(2)`, `SE(2)` or `C_n`.
    pub fn rotation2(group: GroupId, theta: f64) -> Result<Self> {
        match group {
            GroupId::SO2 | GroupId::SE2 | GroupId::Cyclic(_) => {
                let t: &[f64] = if group == GroupId::SE2 { &[0.0, 0.0] } else { &[] };
                GroupElement::from_parts(group, &rot2(theta), t)
            }
            _ => Err(Error::InvalidElement {
                group,
                reason: "not a planar rotation group".into(),
            }),
        }
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> DMatrix<f64> {
        let r = self.group.rotation_dim();
        self.matrix.view((0, 0), (r, r)).into_owned()
    }

    /// Translation column; empty for pure rotation groups.
    pub fn translation_part(&self) -> Vec<f64> {
        if !self.group.has_translation() {
            return Vec::new();
        }
        let r = self.group.rotation_dim();
        (0..r).map(|i| self.matrix[(i, r)]).collect()
    }

    /// Planar rotation angle in `(-pi, pi]` for groups with a 2x2 rotation block.
    pub fn angle(&self) -> Option<f64> {
        (self.group.rotation_dim() == 2 && !matches!(self.group, GroupId::T(_)))
            .then(|| normalize_angle(self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])))
    }

    fn check(&self) -> Result<()> {
        let group = self.group;
        let bad = |reason: String| Err(Error::InvalidElement { group, reason });
        let n = group.matrix_size();
        if self.matrix.nrows() != n || self.matrix.ncols() != n {
            return bad(format!("expected {n}x{n} matrix, got {}x{}", self.matrix.nrows(), self.matrix.ncols()));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return bad("non-finite entry".into());
        }
        let r = group.rotation_dim();
        let rot = self.rotation();
        let gram = rot.transpose() * &rot - DMatrix::identity(r, r);
        if gram.amax() > ORTHO_TOL {
            return bad(format!("rotation block not orthogonal (drift {:e})", gram.amax()));
        }
        if (rot.determinant() - 1.0).abs() > ORTHO_TOL {
            return bad("rotation block determinant is not +1".into());
        }
        if group.has_translation() {
            for j in 0..n {
                let expect = if j == n - 1 { 1.0 } else { 0.0 };
                if (self.matrix[(n - 1, j)] - expect).abs() > ORTHO_TOL {
                    return bad("bottom row is not [0 ... 0 1]".into());
                }
            }
        }
        if let GroupId::T(_) = group {
            if (rot - DMatrix::identity(r, r)).amax() > ORTHO_TOL {
                return bad("translation element has a non-identity rotation block".into());
            }
        }
        if let GroupId::Cyclic(k) = group {
            let step = 2.0 * PI / k as f64;
            let a = self.matrix[(1, 0)].atan2(self.matrix[(0, 0)]);
            let q = a / step;
            if (q - q.round()).abs() * step > 1e-9 {
                return bad(format!("angle {a} is not a multiple of 2pi/{k}"));
            }
        }
        Ok(())
    }

    /// Projects the rotation block back onto SO(n) if it drifted.
    fn reorthonormalize(&mut self) {
        let r = self.group.rotation_dim();
        let rot = self.rotation();
        let drift = (rot.transpose() * &rot - DMatrix::identity(r, r)).amax();
        if drift <= REORTHO_DRIFT {
            return;
        }
        let fixed = match r {
            2 => rot2(rot[(1, 0)].atan2(rot[(0, 0)])),
            _ => {
                let svd = rot.clone().svd(true, true);
                let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
                let mut p = &u * &vt;
                if p.determinant() < 0.0 {
                    let mut u2 = u.clone();
                    let last = u2.ncols() - 1;
                    u2.column_mut(last).neg_mut();
                    p = u2 * vt;
                }
                p
            }
        };
        self.matrix.view_mut((0, 0), (r, r)).copy_from(&fixed);
    }
}

/// Group product `a * b`.
pub fn compose(a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
    if a.group != b.group {
        return Err(Error::GroupMismatch(a.group, b.group));
    }
    let mut out = GroupElement {
        group: a.group,
        matrix: &a.matrix * &b.matrix,
    };
    out.reorthonormalize();
    Ok(out)
}

/// Closed-form block inverse `[[R^T, -R^T x], [0, 1]]`.
pub fn inverse(g: &GroupElement) -> GroupElement {
    let r = g.group.rotation_dim();
    let rt = g.rotation().transpose();
    let mut m = g.matrix.clone();
    m.view_mut((0, 0), (r, r)).copy_from(&rt);
    if g.group.has_translation() {
        let t = DVector::from_vec(g.translation_part());
        let nt = -(&rt * t);
        for i in 0..r {
            m[(i, r)] = nt[i];
        }
    }
    GroupElement {
        group: g.group,
        matrix: m,
    }
}

/// Action on the base space: `R x + t`.
pub fn act(g: &GroupElement, x: &SpatialPoint) -> Result<SpatialPoint> {
    let r = g.group.rotation_dim();
    if x.dim() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            actual: x.dim(),
        });
    }
    let t = g.translation_part();
    let out = (0..r)
        .map(|i| {
            let mut acc = (0..r).map(|j| g.matrix[(i, j)] * x.0[j]).sum::<f64>();
            if !t.is_empty() {
                acc += t[i];
            }
            acc
        })
        .collect();
    Ok(SpatialPoint(out))
}

/// Coordinates of `g^{-1} g2`.
///
/// With `use_log` this is `nu[log(g^{-1} g2)]`. Otherwise the canonical
/// parameterisation is returned: the raw translation of `g^{-1} g2` followed
/// by its rotation parameters (angle for planar groups, rotation vector in 3D).
pub fn relative_coords(g: &GroupElement, g2: &GroupElement, use_log: bool) -> Result<AlgebraVector> {
    if g.group != g2.group {
        return Err(Error::GroupMismatch(g.group, g2.group));
    }
    let rel = compose(&inverse(g), g2)?;
    if use_log {
        log_map(&rel)
    } else {
        canonical_coords(&rel)
    }
}

pub(crate) fn canonical_coords(rel: &GroupElement) -> Result<AlgebraVector> {
    let group = rel.group;
    let coords = match group {
        GroupId::T(_) => rel.translation_part(),
        GroupId::SO2 | GroupId::Cyclic(_) => vec![rel.angle().unwrap()],
        GroupId::SE2 => {
            let mut c = rel.translation_part();
            c.push(rel.angle().unwrap());
            c
        }
        GroupId::SO3 => log_map(rel)?.into_coords(),
        GroupId::SE3 => {
            let rot = GroupElement::from_matrix_unchecked(GroupId::SO3, rel.rotation());
            let mut c = rel.translation_part();
            c.extend(log_map(&rot)?.into_coords());
            c
        }
    };
    AlgebraVector::new(group, coords)
}

/// Affine form of [`relative_coords`] in the displacement of the two
/// elements' translation parts.
///
/// Returns `(A, r)` such that `relative_coords(g, g2, use_log)` equals
/// `A (t2 - t)` followed by `r`. `A` is `d x d` (empty for rotation groups)
/// and `r` holds the rotation coordinates, which do not depend on the
/// translations. Models use this to keep relative coordinates differentiable
/// in the input positions.
pub fn relative_linear_form(g: &GroupElement, g2: &GroupElement, use_log: bool) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if g.group != g2.group {
        return Err(Error::GroupMismatch(g.group, g2.group));
    }
    let group = g.group;
    let rel = compose(&inverse(g), g2)?;
    let rot = match group {
        GroupId::T(_) => Vec::new(),
        GroupId::SO2 | GroupId::Cyclic(_) | GroupId::SE2 => vec![rel.angle().unwrap()],
        GroupId::SO3 => return Ok((DMatrix::zeros(0, 0), log_map(&rel)?.into_coords())),
        GroupId::SE3 => log_map(&GroupElement::from_matrix_unchecked(GroupId::SO3, rel.rotation()))?.into_coords(),
    };
    if group.is_rotation_only() {
        return Ok((DMatrix::zeros(0, 0), rot));
    }
    let rt = g.rotation().transpose();
    let a = if use_log {
        exp_log::log_translation_operator(group, &rot) * rt
    } else {
        rt
    };
    Ok((a, rot))
}

/// Invariant distance `||nu[log(g^{-1} g2)]||`.
pub fn distance(g: &GroupElement, g2: &GroupElement) -> Result<f64> {
    Ok(relative_coords(g, g2, true)?.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_element(group: GroupId, rng: &mut ChaCha8Rng) -> GroupElement {
        let v: Vec<f64> = (0..group.algebra_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        exp_map(&AlgebraVector::new(group, v).unwrap())
    }

    #[test]
    fn linear_form_reproduces_relative_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for group in [GroupId::T(2), GroupId::T(3), GroupId::SE2, GroupId::SE3, GroupId::SO2, GroupId::SO3] {
            for use_log in [true, false] {
                for _ in 0..50 {
                    let g = random_element(group, &mut rng);
                    let g2 = random_element(group, &mut rng);
                    let expect = relative_coords(&g, &g2, use_log).unwrap();
                    let (a, r) = relative_linear_form(&g, &g2, use_log).unwrap();
                    let mut got: Vec<f64> = if a.nrows() > 0 {
                        let d = DVector::from_vec(g2.translation_part()) - DVector::from_vec(g.translation_part());
                        (a * d).iter().copied().collect()
                    } else {
                        Vec::new()
                    };
                    got.extend(r);
                    let err = got.iter().zip(expect.coords()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(err < 1e-12, "{group} use_log={use_log}: {err}");
                }
            }
        }
    }

    #[test]
    fn parse_and_display_round_trip() {
        for tag in ["t1", "t2", "t3", "so2", "se2", "so3", "se3", "c4"] {
            let g: GroupId = tag.parse().unwrap();
            assert_eq!(g.to_string(), tag);
        }
        assert!("t4".parse::<GroupId>().is_err());
        assert!("c0".parse::<GroupId>().is_err());
        assert!("foo".parse::<GroupId>().is_err());
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for group in [GroupId::T(2), GroupId::SE2, GroupId::SO3, GroupId::SE3] {
            let g = random_element(group, &mut rng);
            let e = GroupElement::identity(group);
            assert_eq!(compose(&e, &g).unwrap().matrix(), g.matrix());
            let id = compose(&g, &inverse(&g)).unwrap();
            assert!((id.matrix() - e.matrix()).amax() < 1e-10);
        }
    }

    #[test]
    fn compose_rejects_mixed_groups() {
        let a = GroupElement::identity(GroupId::SE2);
        let b = GroupElement::identity(GroupId::T(2));
        assert!(matches!(compose(&a, &b), Err(Error::GroupMismatch(..))));
    }

    #[test]
    fn se2_rotate_after_translate() {
        // rot(pi/2) * trans(1, 0) sends the origin to (0, 1).
        let r = GroupElement::rotation2(GroupId::SE2, PI / 2.0).unwrap();
        let t = GroupElement::translation(GroupId::SE2, &[1.0, 0.0]).unwrap();
        let g = compose(&r, &t).unwrap();
        let y = act(&g, &SpatialPoint::origin(2)).unwrap();
        assert!((y.0[0] - 0.0).abs() < 1e-12 && (y.0[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_examples() {
        let e = GroupElement::identity(GroupId::SE3);
        assert_eq!(inverse(&e), e);
        let t = GroupElement::translation(GroupId::T(2), &[1.5, -2.0]).unwrap();
        assert_eq!(inverse(&t).translation_part(), vec![-1.5, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_element(GroupId::SO3, &mut rng);
        let ri = inverse(&r);
        assert_eq!(ri.matrix(), &r.matrix().transpose());
        assert!((r.matrix() * ri.matrix() - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn act_examples() {
        let x = SpatialPoint::new(vec![1.0, 0.0]);
        assert_eq!(act(&GroupElement::identity(GroupId::SE2), &x).unwrap(), x);
        let r = GroupElement::rotation2(GroupId::SO2, PI / 2.0).unwrap();
        let y = act(&r, &x).unwrap();
        assert!(y.0[0].abs() < 1e-15 && (y.0[1] - 1.0).abs() < 1e-15);
        // rot(pi) then trans(1, 0): (1, 0) -> (-1, 0) -> (0, 0)
        let g = compose(
            &GroupElement::translation(GroupId::SE2, &[1.0, 0.0]).unwrap(),
            &GroupElement::rotation2(GroupId::SE2, PI).unwrap(),
        )
        .unwrap();
        let y = act(&g, &x).unwrap();
        assert!(y.0[0].abs() < 1e-12 && y.0[1].abs() < 1e-12);
        assert!(matches!(
            act(&g, &SpatialPoint::new(vec![1.0, 2.0, 3.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn action_is_a_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for group in [GroupId::T(3), GroupId::SE2, GroupId::SO3, GroupId::SE3] {
            let d = group.rotation_dim();
            for _ in 0..250 {
                let a = random_element(group, &mut rng);
                let b = random_element(group, &mut rng);
                let x = SpatialPoint::new((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
                let lhs = act(&compose(&a, &b).unwrap(), &x).unwrap();
                let rhs = act(&a, &act(&b, &x).unwrap()).unwrap();
                for (l, r) in lhs.0.iter().zip(&rhs.0) {
                    assert!((l - r).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_matrices() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GroupElement::new(GroupId::SO2, m).is_err());
        let refl = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GroupElement::new(GroupId::SO2, refl).is_err());
        let tr = GroupElement::rotation2(GroupId::SE2, 0.4).unwrap();
        assert!(GroupElement::new(GroupId::T(2), tr.matrix().clone()).is_err());
        assert!(GroupElement::rotation2(GroupId::Cyclic(4), 0.3).is_err());
        assert!(GroupElement::rotation2(GroupId::Cyclic(4), PI / 2.0).is_ok());
    }

    #[test]
    fn relative_coords_and_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_element(GroupId::SE2, &mut rng);
        assert!(relative_coords(&g, &g, true).unwrap().norm() < 1e-12);
        assert!(relative_coords(&g, &g, false).unwrap().norm() < 1e-12);

        let a = GroupElement::translation(GroupId::T(2), &[0.0, 0.0]).unwrap();
        let b = GroupElement::translation(GroupId::T(2), &[3.0, 4.0]).unwrap();
        assert_eq!(distance(&a, &b).unwrap(), 5.0);
        let x = GroupElement::translation(GroupId::T(2), &[1.0, -2.0]).unwrap();
        let rel = relative_coords(&x, &b, true).unwrap();
        assert_eq!(rel.coords(), &[2.0, 6.0]);
    }

    #[test]
    fn left_invariance_of_relative_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for group in [GroupId::SE2, GroupId::SE3, GroupId::T(3), GroupId::SO3] {
            let g = random_element(group, &mut rng);
            let g2 = random_element(group, &mut rng);
            for use_log in [true, false] {
                let base = relative_coords(&g, &g2, use_log).unwrap();
                for _ in 0..100 {
                    let u = random_element(group, &mut rng);
                    let ug = compose(&u, &g).unwrap();
                    let ug2 = compose(&u, &g2).unwrap();
                    let moved = relative_coords(&ug, &ug2, use_log).unwrap();
                    for (a, b) in base.coords().iter().zip(moved.coords()) {
                        assert!((a - b).abs() < 1e-9, "{group}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn distance_left_invariant_se2() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_element(GroupId::SE2, &mut rng);
        let g2 = random_element(GroupId::SE2, &mut rng);
        let d0 = distance(&g, &g2).unwrap();
        let worst = (0..50)
            .map(|_| {
                let u = random_element(GroupId::SE2, &mut rng);
                let d = distance(&compose(&u, &g).unwrap(), &compose(&u, &g2).unwrap()).unwrap();
                (d - d0).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-9);
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(-PI), PI);
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(normalize_angle(0.0), 0.0);
    }
}
