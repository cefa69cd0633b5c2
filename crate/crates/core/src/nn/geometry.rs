//! Batched lifted inputs and the (query, key) pair lists layers run on.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::group::{
    lift, lift_per_point, neighbourhood, relative_linear_form, GroupId, LiftSampling, LiftedFeatureMap,
    SpatialPoint,
};
use crate::rng::derive_seed;

/// How inputs are lifted onto the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub num_lift_samples: usize,
    #[serde(default)]
    pub sampling: LiftSampling,
    /// Draw a separate stabiliser sample for every point instead of one
    /// shared `H^` per example.
    #[serde(default)]
    pub per_point: bool,
}

impl LiftConfig {
    pub fn new(num_lift_samples: usize) -> Self {
        LiftConfig {
            num_lift_samples,
            sampling: LiftSampling::Iid,
            per_point: false,
        }
    }
}

/// Neighbourhood selection; `None` means unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighbourhoodConfig {
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub max_size: Option<usize>,
}

impl NeighbourhoodConfig {
    pub fn full() -> Self {
        NeighbourhoodConfig::default()
    }
}

/// Several lifted feature maps concatenated into one element list.
///
/// `positions` holds the translation part of every element and may track
/// gradients back to the input points.
#[derive(Clone, Debug)]
pub struct LiftedBatch {
    group: GroupId,
    maps: Vec<LiftedFeatureMap>,
    offsets: Vec<usize>,
    example_of: Rc<[usize]>,
    positions: Tensor,
    features: Tensor,
}

fn map_translations(map: &LiftedFeatureMap) -> Vec<f64> {
    map.elements().iter().flat_map(|g| g.translation_part()).collect()
}

impl LiftedBatch {
    fn assemble(maps: Vec<LiftedFeatureMap>, positions: Vec<Tensor>, features: Vec<Tensor>) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("batch"))?;
        let group = first.group();
        if let Some(m) = maps.iter().find(|m| m.group() != group) {
            return Err(Error::GroupMismatch(group, m.group()));
        }
        let mut offsets = vec![0];
        let mut example_of = Vec::new();
        for (b, m) in maps.iter().enumerate() {
            offsets.push(offsets[b] + m.len());
            example_of.extend(std::iter::repeat_n(b, m.len()));
        }
        Ok(LiftedBatch {
            group,
            offsets,
            example_of: example_of.into(),
            positions: Tensor::concat_rows(&positions)?,
            features: Tensor::concat_rows(&features)?,
            maps,
        })
    }

    /// Batch of already lifted maps; positions and features are constants.
    pub fn from_maps(maps: &[LiftedFeatureMap]) -> Result<Self> {
        let mut positions = Vec::with_capacity(maps.len());
        let mut features = Vec::with_capacity(maps.len());
        for m in maps {
            if m.group().is_rotation_only() {
                return Err(Error::NotHomogeneous(m.group()));
            }
            let d = m.elements()[0].translation_part().len();
            positions.push(Tensor::from_vec(m.len(), d, map_translations(m))?);
            features.push(Tensor::from_dmatrix(m.features()));
        }
        LiftedBatch::assemble(maps.to_vec(), positions, features)
    }

    /// Lifts point clouds given as `(positions n x d, features n x c)` pairs.
    /// Example `b` uses seed `derive_seed(seed, b)`. Gradients flow from the
    /// element positions and features back to the given tensors.
    pub fn from_points(group: GroupId, examples: &[(Tensor, Tensor)], lift_cfg: &LiftConfig, seed: u64) -> Result<Self> {
        let d = group.space_dim().ok_or(Error::NotHomogeneous(group))?;
        let mut maps = Vec::with_capacity(examples.len());
        let mut positions = Vec::with_capacity(examples.len());
        let mut features = Vec::with_capacity(examples.len());
        for (b, (x, f)) in examples.iter().enumerate() {
            if x.cols() != d || x.rows() != f.rows() {
                return Err(Error::Shape {
                    op: "LiftedBatch::from_points",
                    lhs: x.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            let points: Vec<SpatialPoint> = (0..x.rows()).map(|i| SpatialPoint::new(x.row_slice(i))).collect();
            let fm = f.to_dmatrix();
            let s = derive_seed(seed, b as u64);
            let map = if lift_cfg.per_point {
                lift_per_point(&points, &fm, group, lift_cfg.num_lift_samples, s, lift_cfg.sampling)?
            } else if lift_cfg.sampling == LiftSampling::Iid {
                lift(&points, &fm, group, lift_cfg.num_lift_samples, s)?
            } else {
                let h = crate::group::sample_stabiliser_with(group, lift_cfg.num_lift_samples, s, lift_cfg.sampling)?;
                crate::group::lift_with_stabiliser(&points, &fm, group, &h)?
            };
            let origin: Rc<[usize]> = map.origin_index().into();
            positions.push(x.gather_rows(&origin)?);
            features.push(f.gather_rows(&origin)?);
            maps.push(map);
        }
        LiftedBatch::assemble(maps, positions, features)
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn maps(&self) -> &[LiftedFeatureMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_examples(&self) -> usize {
        self.maps.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn example_of(&self) -> &Rc<[usize]> {
        &self.example_of
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// `1/|G_f|` per example as a `B x 1` column.
    pub fn inverse_counts(&self) -> Tensor {
        let inv: Vec<f64> = self.maps.iter().map(|m| 1.0 / m.len() as f64).collect();
        Tensor::column(&inv)
    }
}

/// Directed (query, key) pairs within each example, with the key's
/// coordinates relative to the query.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    n_elems: usize,
    query: Rc<[usize]>,
    key: Rc<[usize]>,
    support: Vec<usize>,
    inv_support: Tensor,
    rel: Tensor,
}

impl PairGeometry {
    /// Pairs `(g, g')` with `g'` in `nbhd(g)` inside the same example.
    /// Neighbourhoods of example `b` use seed `derive_seed(seed, b)`.
    pub fn build(batch: &LiftedBatch, nbhd: &NeighbourhoodConfig, use_log: bool, seed: u64) -> Result<Self> {
        let group = batch.group();
        let d = group.space_dim().ok_or(Error::NotHomogeneous(group))?;
        let rot_dim = group.algebra_dim() - d;
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut support = vec![0; batch.len()];
        let mut a_flat = Vec::new();
        let mut rot = Vec::new();
        for (b, map) in batch.maps().iter().enumerate() {
            let off = batch.offsets()[b];
            let n = map.len();
            let full = nbhd.radius.is_none() && nbhd.max_size.is_none_or(|m| m >= n);
            let nb_seed = derive_seed(seed, b as u64);
            for c in 0..n {
                let keys: Vec<usize> = if full {
                    (0..n).collect()
                } else {
                    neighbourhood(
                        map,
                        c,
                        nbhd.radius.unwrap_or(f64::INFINITY),
                        nbhd.max_size.unwrap_or(n),
                        nb_seed,
                    )?
                };
                support[off + c] = keys.len();
                let g = &map.elements()[c];
                for k in keys {
                    query.push(off + c);
                    key.push(off + k);
                    let (a, r) = relative_linear_form(g, &map.elements()[k], use_log)?;
                    if !matches!(group, GroupId::T(_)) {
                        a_flat.extend(a.transpose().iter().copied());
                    }
                    rot.extend(r);
                }
            }
        }
        let query: Rc<[usize]> = query.into();
        let key: Rc<[usize]> = key.into();
        let p = query.len();
        let pos = batch.positions();
        let disp = pos.gather_rows(&key)?.sub(&pos.gather_rows(&query)?)?;
        let trans = if matches!(group, GroupId::T(_)) {
            disp
        } else {
            let a = Tensor::from_vec(p, d * d, a_flat)?;
            disp.tile_cols(d).mul(&a)?.group_sum_cols(d)?
        };
        let rel = if rot_dim > 0 {
            Tensor::concat_cols(&[trans, Tensor::from_vec(p, rot_dim, rot)?])?
        } else {
            trans
        };
        let inv: Vec<f64> = query.iter().map(|&q| 1.0 / support[q] as f64).collect();
        Ok(PairGeometry {
            n_elems: batch.len(),
            inv_support: Tensor::column(&inv),
            query,
            key,
            support,
            rel,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.n_elems
    }

    pub fn num_pairs(&self) -> usize {
        self.query.len()
    }

    pub fn query(&self) -> &Rc<[usize]> {
        &self.query
    }

    pub fn key(&self) -> &Rc<[usize]> {
        &self.key
    }

    /// Neighbourhood size of every element.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// `1/|nbhd(query)|` per pair, `P x 1`.
    pub fn inv_support(&self) -> &Tensor {
        &self.inv_support
    }

    /// Relative coordinates of the key seen from the query, `P x dim`.
    pub fn rel(&self) -> &Tensor {
        &self.rel
    }

    pub fn at_query(&self, x: &Tensor) -> Result<Tensor> {
        x.gather_rows(&self.query)
    }

    pub fn at_key(&self, x: &Tensor) -> Result<Tensor> {
        x.gather_rows(&self.key)
    }

    /// Sums pair rows into their query element, `P x c -> N x c`.
    pub fn sum_to_query(&self, x: &Tensor) -> Result<Tensor> {
        x.scatter_add_rows(&self.query, self.n_elems)
    }

    /// Softmax of every column over each query's pairs.
    pub fn segment_softmax(&self, scores: &Tensor) -> Result<Tensor> {
        let [p, m] = scores.shape();
        if p != self.num_pairs() {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: scores.shape().to_vec(),
                rhs: vec![self.num_pairs()],
            });
        }
        // Per-segment maxima are constants; the result does not depend on them.
        let mut max = vec![f64::NEG_INFINITY; self.n_elems * m];
        for (r, &q) in self.query.iter().enumerate() {
            for j in 0..m {
                let v = scores.get(r, j);
                if v > max[q * m + j] {
                    max[q * m + j] = v;
                }
            }
        }
        max.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = 0.0);
        let shift = Tensor::from_vec(self.n_elems, m, max)?.gather_rows(&self.query)?;
        let e = scores.sub(&shift)?.exp();
        let total = self.sum_to_query(&e)?.gather_rows(&self.query)?;
        e.mul(&total.powf(-1.0))
    }
}
