//! `bench-conv`: naive against reordered group convolution.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use liesa::autodiff::{ParameterStore, Tensor};
use liesa::conv::{analytic_kernel_memory, ConvConfig, ConvMemory, GroupConv};
use liesa::group::GroupId;
use liesa::nn::{LiftConfig, LiftedBatch, NeighbourhoodConfig, PairGeometry};
use liesa::rng::{derive_seed, seeded};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{ensure_dir, read_json, write_csv, write_manifest};
use crate::Violation;

pub const AGREEMENT_TOL: f64 = 1e-6;
const TIMING_REPEATS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub group: GroupId,
    pub points: usize,
    pub lift_samples: usize,
    pub d_v: usize,
    pub d_out: usize,
    pub d_mid: usize,
    #[serde(default)]
    pub nbhd: NeighbourhoodConfig,
}

pub fn default_sweep() -> Vec<BenchPoint> {
    let p = |group, points, lift_samples, d_v, d_out, d_mid| BenchPoint {
        group,
        points,
        lift_samples,
        d_v,
        d_out,
        d_mid,
        nbhd: NeighbourhoodConfig::full(),
    };
    vec![
        p(GroupId::T(2), 32, 1, 64, 64, 8),
        p(GroupId::SE2, 16, 2, 16, 16, 8),
        p(GroupId::Cyclic(4), 8, 4, 8, 8, 4),
        p(GroupId::SE3, 8, 2, 8, 8, 8),
        // d_mid = d_out * d_v: no saving expected
        p(GroupId::T(2), 16, 1, 4, 4, 16),
    ]
}

fn median_ms(mut f: impl FnMut() -> Result<(Tensor, ConvMemory)>) -> Result<(f64, Tensor, ConvMemory)> {
    let mut times = Vec::with_capacity(TIMING_REPEATS);
    let mut last = None;
    for _ in 0..TIMING_REPEATS {
        let start = Instant::now();
        let r = f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(r);
    }
    times.sort_by(f64::total_cmp);
    let (out, mem) = last.expect("at least one repeat");
    Ok((times[TIMING_REPEATS / 2], out, mem))
}

pub fn bench_conv(out: &Path, seed: u64, config: Option<PathBuf>) -> Result<()> {
    let sweep = match &config {
        Some(path) => read_json::<Vec<BenchPoint>>(path)?,
        None => default_sweep(),
    };
    if sweep.is_empty() {
        bail!(liesa::Error::Config("empty sweep".into()));
    }
    let mut rows = Vec::with_capacity(sweep.len());
    let mut disagreements = Vec::new();
    for (i, bp) in sweep.iter().enumerate() {
        let ps = derive_seed(seed, i as u64);
        let dim = bp.group.space_dim().ok_or(liesa::Error::NotHomogeneous(bp.group))?;
        let mut cfg = ConvConfig::new(bp.d_v, bp.d_out, vec![16, bp.d_mid]);
        cfg.nbhd = bp.nbhd;
        let conv = GroupConv::new(cfg, bp.group, "conv")?;
        let mut store = ParameterStore::new(ps);
        conv.init(&mut store)?;
        let mut rng = seeded(derive_seed(ps, 1));
        let x = Tensor::from_vec(bp.points, dim, (0..bp.points * dim).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
        let f = Tensor::from_vec(bp.points, bp.d_v, (0..bp.points * bp.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let batch = LiftedBatch::from_points(bp.group, &[(x, f)], &LiftConfig::new(bp.lift_samples), derive_seed(ps, 2))?;
        let geom = PairGeometry::build(&batch, &bp.nbhd, true, derive_seed(ps, 3))?;
        let (naive_ms, a, naive_mem) = median_ms(|| Ok(conv.forward_naive(&store, batch.features(), &geom)?))?;
        let (trick_ms, b, trick_mem) = median_ms(|| Ok(conv.forward_pointconv(&store, batch.features(), &geom)?))?;
        let diff = a.max_abs_diff(&b);
        let elements = geom.num_elements();
        let nbhd = geom.num_pairs().div_ceil(elements);
        let (an, at) = analytic_kernel_memory(elements, nbhd, bp.d_v, bp.d_out, bp.d_mid);
        if !(diff <= AGREEMENT_TOL) {
            disagreements.push(format!("sweep point {i}: {diff:e}"));
        }
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{:.3},{}",
            bp.group,
            bp.points,
            bp.lift_samples,
            elements,
            nbhd,
            bp.d_v,
            bp.d_out,
            bp.d_mid,
            an,
            at,
            an as f64 / at as f64,
            naive_mem.kernel_scalars,
            trick_mem.kernel_scalars,
            naive_ms,
            trick_ms,
            diff
        ));
        println!(
            "{} n={} d_v={} d_out={} d_mid={}: memory ratio {:.2}, {:.2} ms vs {:.2} ms, diff {:.1e}",
            bp.group,
            elements,
            bp.d_v,
            bp.d_out,
            bp.d_mid,
            an as f64 / at as f64,
            naive_ms,
            trick_ms,
            diff
        );
    }
    ensure_dir(out)?;
    let file = write_csv(
        out,
        "bench_conv.csv",
        "group,points,lift_samples,elements,nbhd,d_v,d_out,d_mid,analytic_naive,analytic_pointconv,analytic_ratio,measured_naive,measured_pointconv,naive_ms,pointconv_ms,max_diff",
        &rows,
    )?;
    write_manifest(out, "bench-conv", &sweep, seed, &[file])?;
    if !disagreements.is_empty() {
        bail!(Violation(format!("naive and reordered outputs disagree: {}", disagreements.join(", "))));
    }
    Ok(())
}
