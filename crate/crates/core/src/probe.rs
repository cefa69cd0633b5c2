//! Empirical invariance of a model's readout under random group transforms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Precision, Tensor};
use crate::attention::LieSelfAttention;
use crate::blocks::{g_pool_batch, LieTransformer, ModelConfig};
use crate::dynamics::constellation::{generate_constellation, Augment};
use crate::error::{Error, Result};
use crate::group::{act, random_transform, GroupElement, GroupId, SpatialPoint};
use crate::nn::{LiftConfig, LiftedBatch, NeighbourhoodConfig, PairGeometry};
use crate::rng::derive_seed;

/// Median and quartiles of a sample, plus the raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub max: f64,
    pub errors: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ErrorStats {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Empty("error sample"));
        }
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(ErrorStats {
            median: quantile(&sorted, 0.5),
            q25: quantile(&sorted, 0.25),
            q75: quantile(&sorted, 0.75),
            max: *sorted.last().unwrap(),
            errors,
        })
    }
}

/// Applies `u` to every row of an `n x d` position matrix.
pub fn transform_positions(u: &GroupElement, positions: &Tensor) -> Result<Tensor> {
    let mut out = Vec::with_capacity(positions.len());
    for i in 0..positions.rows() {
        out.extend(act(u, &SpatialPoint::new(positions.row_slice(i).to_vec()))?.0);
    }
    Tensor::from_vec(positions.rows(), positions.cols(), out)
}

/// Max-abs difference between the outputs on `example` and on `u . example`,
/// the two inputs lifted with independent seeds.
pub fn invariance_error(
    model: &LieTransformer,
    store: &ParameterStore,
    example: &(Tensor, Tensor),
    u: &GroupElement,
    seed: u64,
) -> Result<f64> {
    let p = store.iter().next().map_or(Precision::F64, |(_, t)| t.precision());
    let (x, f) = (example.0.with_precision(p), example.1.with_precision(p));
    let moved = transform_positions(u, &example.0)?.with_precision(p);
    let a = model.forward(store, &[(x, f.clone())], derive_seed(seed, 0))?.output;
    let b = model.forward(store, &[(moved, f)], derive_seed(seed, 1))?.output;
    Ok(a.max_abs_diff(&b))
}

/// Errors for `num_transforms` random transforms of one example (translations
/// uniform in `[-translation_scale, translation_scale]`).
pub fn invariance_error_probe(
    model: &LieTransformer,
    store: &ParameterStore,
    example: &(Tensor, Tensor),
    num_transforms: usize,
    translation_scale: f64,
    seed: u64,
) -> Result<ErrorStats> {
    let group = model.config().group;
    let errors = (0..num_transforms)
        .map(|t| {
            let s = derive_seed(seed, t as u64);
            let u = random_transform(group, translation_scale, derive_seed(s, 0))?;
            invariance_error(model, store, example, &u, derive_seed(s, 1))
        })
        .collect::<Result<Vec<_>>>()?;
    ErrorStats::from_errors(errors)
}

/// One row of an invariance curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lift_samples: usize,
    pub stats: ErrorStats,
}

/// Invariance error against the number of lift samples. Run `r` uses model
/// seed `derive_seed(seed, r)`, example `examples[r % len]` and one random
/// transform; the same runs are repeated at every lift-sample count.
pub fn invariance_curve(
    base: &ModelConfig,
    examples: &[(Tensor, Tensor)],
    lift_samples: &[usize],
    runs: usize,
    precision: Precision,
    translation_scale: f64,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if examples.is_empty() {
        return Err(Error::Empty("probe examples"));
    }
    lift_samples
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.lift.num_lift_samples = n;
            let model = LieTransformer::new(cfg)?;
            let errors = (0..runs)
                .map(|r| {
                    let rs = derive_seed(seed, r as u64);
                    let mut store = model.init_store(derive_seed(rs, 0))?;
                    store.set_precision(precision);
                    let u = random_transform(base.group, translation_scale, derive_seed(rs, 1))?;
                    invariance_error(&model, &store, &examples[r % examples.len()], &u, derive_seed(rs, 2))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CurvePoint {
                lift_samples: n,
                stats: ErrorStats::from_errors(errors)?,
            })
        })
        .collect()
}

/// Inputs for invariance probes: unaugmented constellations in the plane,
/// 12 points uniform in `[-5, 5]^3` in space.
pub fn probe_examples(group: GroupId, count: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
    use rand::Rng;
    match group.space_dim().ok_or(Error::NotHomogeneous(group))? {
        2 => generate_constellation(count, seed, Augment::None)?.iter().map(|e| e.to_input()).collect(),
        dim => (0..count)
            .map(|i| {
                let mut rng = crate::rng::seeded(derive_seed(seed, i as u64));
                let x = Tensor::from_vec(12, dim, (0..12 * dim).map(|_| rng.gen_range(-5.0..5.0)).collect())?;
                Ok((x, Tensor::full(12, 1, 1.0)))
            })
            .collect(),
    }
}

/// Mean of the pooled layer output over `resamples` independent lifts of
/// `example`, `1 x d`.
#[allow(clippy::too_many_arguments)]
pub fn mean_pooled_output(
    layer: &LieSelfAttention,
    store: &ParameterStore,
    group: GroupId,
    example: &(Tensor, Tensor),
    lift: &LiftConfig,
    nbhd: &NeighbourhoodConfig,
    resamples: usize,
    seed: u64,
) -> Result<Tensor> {
    const CHUNK: usize = 16;
    let mut sum: Option<Tensor> = None;
    let mut done = 0;
    while done < resamples {
        let take = CHUNK.min(resamples - done);
        let s = derive_seed(seed, done as u64);
        let batch = LiftedBatch::from_points(group, &vec![example.clone(); take], lift, s)?;
        let geom = PairGeometry::build(&batch, nbhd, layer.config().use_log_map, s)?;
        let pooled = g_pool_batch(&layer.forward(store, batch.features(), &geom)?, &batch)?.sum_rows();
        sum = Some(match sum {
            Some(acc) => acc.add(&pooled)?,
            None => pooled,
        });
        done += take;
    }
    Ok(sum.ok_or(Error::Empty("resamples"))?.scale(1.0 / resamples as f64))
}

/// `mean_j |E[f(u X)]_j - E[f(X)]_j|` with both expectations estimated
/// from `resamples` independent lifts, `f` being one attention layer
/// followed by G-pooling.
#[allow(clippy::too_many_arguments)]
pub fn mc_expectation_gap(
    layer: &LieSelfAttention,
    store: &ParameterStore,
    group: GroupId,
    example: &(Tensor, Tensor),
    u: &GroupElement,
    lift: &LiftConfig,
    nbhd: &NeighbourhoodConfig,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    let moved = (transform_positions(u, &example.0)?, example.1.clone());
    let a = mean_pooled_output(layer, store, group, example, lift, nbhd, resamples, derive_seed(seed, 0))?;
    let b = mean_pooled_output(layer, store, group, &moved, lift, nbhd, resamples, derive_seed(seed, 1))?;
    Ok(a.sub(&b)?.data().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::TaskHead;
    use crate::group::GroupId;

    fn cloud(n: usize, seed: u64) -> (Tensor, Tensor) {
        use rand::Rng;
        let mut rng = crate::rng::seeded(seed);
        let x = Tensor::from_vec(n, 2, (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        (x, Tensor::full(n, 1, 1.0))
    }

    #[test]
    fn slope_of_power_law() {
        let x = [4.0, 16.0, 64.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn quartiles() {
        let s = ErrorStats::from_errors(vec![4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.q25, s.median, s.q75, s.max), (2.0, 3.0, 4.0, 5.0));
        assert!(ErrorStats::from_errors(vec![]).is_err());
    }

    #[test]
    fn translation_model_is_invariant() {
        let model = LieTransformer::new(ModelConfig::small(GroupId::T(2), 1, 4, TaskHead::Classifier, 8, 2, 2)).unwrap();
        let store = model.init_store(1).unwrap();
        let stats = invariance_error_probe(&model, &store, &cloud(6, 2), 10, 5.0, 3).unwrap();
        assert!(stats.max < 1e-9, "{stats:?}");
    }

    #[test]
    fn se2_error_drops_with_lift_samples() {
        let mut cfg = ModelConfig::small(GroupId::SE2, 1, 4, TaskHead::Classifier, 8, 2, 1);
        cfg.lift.sampling = crate::group::LiftSampling::Stratified;
        let ex = [cloud(5, 4), cloud(5, 5)];
        let curve = invariance_curve(&cfg, &ex, &[1, 8], 6, Precision::F64, 2.0, 7).unwrap();
        assert!(curve[1].stats.median < curve[0].stats.median, "{curve:?}");
    }
}
