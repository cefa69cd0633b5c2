//! Lifting point clouds onto the group and neighbourhood selection.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{act, compose, distance, rot2, GroupElement, GroupId, SpatialPoint};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// A feature map on a finite subset of the group: the lifted set `G_f` with
/// one feature row per element.
#[derive(Clone, Debug)]
pub struct LiftedFeatureMap {
    group: GroupId,
    elements: Vec<GroupElement>,
    features: DMatrix<f64>,
    origin_index: Vec<usize>,
    stabiliser_index: Vec<usize>,
}

impl LiftedFeatureMap {
    /// Assembles a map from parts, checking that all elements share a group
    /// and that the bookkeeping vectors line up.
    pub fn new(
        elements: Vec<GroupElement>,
        features: DMatrix<f64>,
        origin_index: Vec<usize>,
        stabiliser_index: Vec<usize>,
    ) -> Result<Self> {
        let group = elements.first().ok_or(Error::Empty("lifted feature map"))?.group();
        if let Some(bad) = elements.iter().find(|g| g.group() != group) {
            return Err(Error::GroupMismatch(group, bad.group()));
        }
        for len in [features.nrows(), origin_index.len(), stabiliser_index.len()] {
            if len != elements.len() {
                return Err(Error::DimensionMismatch {
                    expected: elements.len(),
                    actual: len,
                });
            }
        }
        Ok(LiftedFeatureMap {
            group,
            elements,
            features,
            origin_index,
            stabiliser_index,
        })
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn origin_index(&self) -> &[usize] {
        &self.origin_index
    }

    pub fn stabiliser_index(&self) -> &[usize] {
        &self.stabiliser_index
    }

    /// Same elements, new features.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: features.nrows(),
            });
        }
        Ok(LiftedFeatureMap {
            features,
            ..self.clone()
        })
    }

    /// The regular representation: every element `g` becomes `u g`, features
    /// stay attached to their element.
    pub fn left_act(&self, u: &GroupElement) -> Result<Self> {
        let elements = self
            .elements
            .iter()
            .map(|g| compose(u, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(LiftedFeatureMap {
            elements,
            ..self.clone()
        })
    }

    /// Reorders elements so that new position `k` holds old element `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let features = DMatrix::from_fn(perm.len(), self.feature_dim(), |i, j| self.features[(perm[i], j)]);
        LiftedFeatureMap {
            group: self.group,
            elements: perm.iter().map(|&p| self.elements[p].clone()).collect(),
            features,
            origin_index: perm.iter().map(|&p| self.origin_index[p]).collect(),
            stabiliser_index: perm.iter().map(|&p| self.stabiliser_index[p]).collect(),
        }
    }

    /// Element indices sorted by `(origin_index, stabiliser_index)`.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by_key(|&k| (self.origin_index[k], self.stabiliser_index[k]));
        idx
    }

    /// Verifies `g x_0 = x_i` for every element and that elements sharing an
    /// origin carry identical features.
    pub fn check_against(&self, points: &[SpatialPoint]) -> Result<()> {
        let d = self.group.rotation_dim();
        let origin = SpatialPoint::origin(d);
        for (k, g) in self.elements.iter().enumerate() {
            let i = self.origin_index[k];
            let y = act(g, &origin)?;
            let err = y.0.iter().zip(&points[i].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err > 1e-8 {
                return Err(Error::InvalidElement {
                    group: self.group,
                    reason: format!("element {k} maps the origin {err:e} away from point {i}"),
                });
            }
        }
        for a in 0..self.len() {
            for b in (a + 1)..self.len() {
                if self.origin_index[a] == self.origin_index[b] && self.features.row(a) != self.features.row(b) {
                    return Err(Error::Config(format!("elements {a} and {b} share an origin but not features")));
                }
            }
        }
        Ok(())
    }
}

fn haar_so3<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

/// Samples the stabiliser `H` of the origin.
///
/// `T(n)`: the identity only. `SE(2)`: `count` rotations with angle uniform on
/// `[0, 2 pi)`. `SE(3)`: `count` Haar-uniform rotations from normalised
/// Gaussian quaternions. `C_n`: all `n` rotations, independent of `count`.
/// Elements are returned in the lifted group (homogeneous matrices).
pub fn sample_stabiliser(group: GroupId, count: usize, rng_seed: u64) -> Result<Vec<GroupElement>> {
    if count == 0 {
        return Err(Error::Empty("stabiliser sample count"));
    }
    let lifted = group.lifted_group()?;
    let mut rng = seeded(rng_seed);
    let out = match group {
        GroupId::T(_) => vec![GroupElement::identity(lifted)],
        GroupId::SE2 => (0..count)
            .map(|_| {
                let theta = rng.gen_range(0.0..2.0 * PI);
                GroupElement::from_parts(lifted, &rot2(theta), &[0.0, 0.0])
            })
            .collect::<Result<_>>()?,
        GroupId::Cyclic(n) => (0..n)
            .map(|k| GroupElement::from_parts(lifted, &rot2(2.0 * PI * k as f64 / n as f64), &[0.0, 0.0]))
            .collect::<Result<_>>()?,
        GroupId::SE3 => (0..count)
            .map(|_| {
                let r = haar_so3(&mut rng);
                let r = DMatrix::from_fn(3, 3, |i, j| r[(i, j)]);
                GroupElement::from_parts(lifted, &r, &[0.0; 3])
            })
            .collect::<Result<_>>()?,
        GroupId::SO2 | GroupId::SO3 => unreachable!("rejected by lifted_group"),
    };
    Ok(out)
}

/// A random element of the lifted group of `group`: Haar-uniform rotation
/// part (uniform over `C_n` for `Cyclic(n)`) and translation uniform in
/// `[-translation_scale, translation_scale]` per coordinate.
pub fn random_transform(group: GroupId, translation_scale: f64, rng_seed: u64) -> Result<GroupElement> {
    let lifted = group.lifted_group()?;
    let mut rng = seeded(rng_seed);
    let dim = group.space_dim().ok_or(Error::NotHomogeneous(group))?;
    let rotation = match group {
        GroupId::T(n) => DMatrix::identity(n, n),
        GroupId::SE2 => rot2(rng.gen_range(0.0..2.0 * PI)),
        GroupId::Cyclic(n) => rot2(2.0 * PI * rng.gen_range(0..n) as f64 / n as f64),
        GroupId::SE3 => {
            let r = haar_so3(&mut rng);
            DMatrix::from_fn(3, 3, |i, j| r[(i, j)])
        }
        GroupId::SO2 | GroupId::SO3 => unreachable!("rejected by lifted_group"),
    };
    let t: Vec<f64> = (0..dim)
        .map(|_| if translation_scale > 0.0 { rng.gen_range(-translation_scale..=translation_scale) } else { 0.0 })
        .collect();
    GroupElement::from_parts(lifted, &rotation, &t)
}

/// How continuous stabiliser samples are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftSampling {
    /// Independent draws, see [`sample_stabiliser`].
    #[default]
    Iid,
    /// Planar rotations at `phi + 2 pi k / count` with one uniform offset
    /// `phi`. Each sample is still marginally uniform. Falls back to `Iid`
    /// for groups without a natural grid (`SE(3)`).
    Stratified,
}

/// [`sample_stabiliser`] with a choice of sampling scheme.
pub fn sample_stabiliser_with(
    group: GroupId,
    count: usize,
    rng_seed: u64,
    sampling: LiftSampling,
) -> Result<Vec<GroupElement>> {
    match (sampling, group) {
        (LiftSampling::Stratified, GroupId::SE2) => {
            if count == 0 {
                return Err(Error::Empty("stabiliser sample count"));
            }
            let lifted = group.lifted_group()?;
            let step = 2.0 * PI / count as f64;
            let phi = seeded(rng_seed).gen_range(0.0..step);
            (0..count)
                .map(|k| GroupElement::from_parts(lifted, &rot2(phi + step * k as f64), &[0.0, 0.0]))
                .collect()
        }
        _ => sample_stabiliser(group, count, rng_seed),
    }
}

/// Lifts every point with its own stabiliser sample, drawn with seed
/// `derive_seed(rng_seed, i)` for point `i`.
pub fn lift_per_point(
    points: &[SpatialPoint],
    features: &DMatrix<f64>,
    group: GroupId,
    num_lift_samples: usize,
    rng_seed: u64,
    sampling: LiftSampling,
) -> Result<LiftedFeatureMap> {
    check_points(points, features, group)?;
    let lifted = group.lifted_group()?;
    let mut elements = Vec::new();
    let mut origin_index = Vec::new();
    let mut stabiliser_index = Vec::new();
    let mut rows = Vec::new();
    for (i, x) in points.iter().enumerate() {
        let s = GroupElement::translation(lifted, x.coords())?;
        let h = sample_stabiliser_with(group, num_lift_samples, derive_seed(rng_seed, i as u64), sampling)?;
        for (a, h) in h.iter().enumerate() {
            elements.push(compose(&s, h)?);
            origin_index.push(i);
            stabiliser_index.push(a);
            rows.push(i);
        }
    }
    let features = DMatrix::from_fn(rows.len(), features.ncols(), |k, j| features[(rows[k], j)]);
    LiftedFeatureMap::new(elements, features, origin_index, stabiliser_index)
}

fn check_points(points: &[SpatialPoint], features: &DMatrix<f64>, group: GroupId) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::Empty("lift input points"));
    }
    if features.nrows() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: features.nrows(),
        });
    }
    let d = group.space_dim().ok_or(Error::NotHomogeneous(group))?;
    if let Some(p) = points.iter().find(|p| p.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: p.dim(),
        });
    }
    Ok(d)
}

/// Lifts with an explicit section `s(x)` and stabiliser sample `H^`.
///
/// Emits `s(x_i) h` for every point and every `h`, ordered by point then by
/// stabiliser index.
pub fn lift_with_section<S>(
    points: &[SpatialPoint],
    features: &DMatrix<f64>,
    group: GroupId,
    stabiliser: &[GroupElement],
    section: S,
) -> Result<LiftedFeatureMap>
where
    S: Fn(&SpatialPoint) -> Result<GroupElement>,
{
    check_points(points, features, group)?;
    if stabiliser.is_empty() {
        return Err(Error::Empty("stabiliser sample"));
    }
    let h_count = stabiliser.len();
    let mut elements = Vec::with_capacity(points.len() * h_count);
    let mut origin_index = Vec::with_capacity(elements.capacity());
    let mut stabiliser_index = Vec::with_capacity(elements.capacity());
    for (i, x) in points.iter().enumerate() {
        let s = section(x)?;
        for (a, h) in stabiliser.iter().enumerate() {
            elements.push(compose(&s, h)?);
            origin_index.push(i);
            stabiliser_index.push(a);
        }
    }
    let features = DMatrix::from_fn(elements.len(), features.ncols(), |k, j| features[(k / h_count, j)]);
    LiftedFeatureMap::new(elements, features, origin_index, stabiliser_index)
}

/// Lifts with the translation section `s(x) = t_x` and a given `H^`.
pub fn lift_with_stabiliser(
    points: &[SpatialPoint],
    features: &DMatrix<f64>,
    group: GroupId,
    stabiliser: &[GroupElement],
) -> Result<LiftedFeatureMap> {
    let lifted = group.lifted_group()?;
    lift_with_section(points, features, group, stabiliser, |x| GroupElement::translation(lifted, x.coords()))
}

/// Lifts `(x_i, f_i)` to `{(t_{x_i} h, f_i) : h in H^}` with `H^` drawn by
/// [`sample_stabiliser`].
pub fn lift(
    points: &[SpatialPoint],
    features: &DMatrix<f64>,
    group: GroupId,
    num_lift_samples: usize,
    rng_seed: u64,
) -> Result<LiftedFeatureMap> {
    check_points(points, features, group)?;
    let h = sample_stabiliser(group, num_lift_samples, rng_seed)?;
    lift_with_stabiliser(points, features, group, &h)
}

/// Indices `j` with `d(g_center, g_j) <= radius`, subsampled uniformly without
/// replacement to at most `max_size` (the centre is always kept). Returned in
/// ascending order.
pub fn neighbourhood(
    map: &LiftedFeatureMap,
    center_index: usize,
    radius: f64,
    max_size: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    if !(radius > 0.0) || max_size == 0 {
        return Err(Error::Config("neighbourhood needs radius > 0 and max_size >= 1".into()));
    }
    let center = map.elements.get(center_index).ok_or(Error::DimensionMismatch {
        expected: map.len(),
        actual: center_index,
    })?;
    let mut others = Vec::new();
    for (j, g) in map.elements.iter().enumerate() {
        if j != center_index && distance(center, g)? <= radius {
            others.push(j);
        }
    }
    let mut chosen = if others.len() + 1 > max_size {
        let mut rng = seeded(derive_seed(rng_seed, center_index as u64));
        let picks = index::sample(&mut rng, others.len(), max_size - 1);
        picks.into_iter().map(|p| others[p]).collect()
    } else {
        others
    };
    chosen.push(center_index);
    chosen.sort_unstable();
    Ok(chosen)
}
