//! Finite-difference helpers shared by the gradient checks and the
//! acceptance run.
#![allow(dead_code)]

use std::rc::Rc;

use liesa::autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type UnaryFn = Box<dyn Fn(&Tensor) -> Tensor>;

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Projects `f(x)` onto fixed random weights, so every output entry matters.
pub fn project(y: &Tensor, w: &Tensor) -> Tensor {
    y.mul(w).unwrap().reduce_sum()
}

pub fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, w: &Tensor) -> Vec<f64> {
    let h = 1e-6;
    let base = x.data().to_vec();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            let fp = project(&f(&Tensor::from_vec(x.rows(), x.cols(), plus).unwrap()), w).item();
            let fm = project(&f(&Tensor::from_vec(x.rows(), x.cols(), minus).unwrap()), w).item();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // gradients that vanish identically leave only rounding noise
    diff / scale.max(1e-6)
}

pub fn unary_ops(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<(&'static str, UnaryFn)> {
    let other = random(r, c, rng);
    let row = random(1, c, rng);
    let col = random(r, 1, rng);
    let rhs = random(c, 3, rng);
    let idx: Rc<[usize]> = (0..r + 2).map(|_| rng.gen_range(0..r)).collect();
    let scatter_idx: Rc<[usize]> = (0..r).map(|_| rng.gen_range(0..2)).collect();
    let kron = random(r, 2, rng);
    vec![
        ("add", Box::new(move |x: &Tensor| x.add(&other).unwrap().mul(x).unwrap())),
        ("sub", Box::new(|x: &Tensor| x.sub(&x.scale(0.3).exp()).unwrap())),
        ("mul_row", Box::new({
            let row = row.clone();
            move |x: &Tensor| x.mul_row(&row).unwrap().add_row(&row).unwrap()
        })),
        ("mul_row_rhs", Box::new({
            let col = col.clone();
            move |x: &Tensor| col.expand_cols(x.cols()).unwrap().mul_row(&x.sum_rows()).unwrap()
        })),
        ("mul_col", Box::new({
            let col = col.clone();
            move |x: &Tensor| x.mul_col(&col).unwrap().add_col(&x.sum_cols()).unwrap()
        })),
        ("matmul", Box::new(move |x: &Tensor| x.matmul(&rhs).unwrap())),
        ("matmul_self", Box::new(|x: &Tensor| x.transpose().matmul(x).unwrap())),
        ("reductions", Box::new(|x: &Tensor| x.sum_rows().expand_rows(2).unwrap().mul(&x.mean_rows().expand_rows(2).unwrap()).unwrap())),
        ("reduce_sum", Box::new(|x: &Tensor| x.square().reduce_mean().add(&x.reduce_sum()).unwrap())),
        ("gather", Box::new(move |x: &Tensor| x.gather_rows(&idx).unwrap().square())),
        ("scatter", Box::new(move |x: &Tensor| x.scatter_add_rows(&scatter_idx, 2).unwrap().square())),
        ("concat_slice", Box::new(|x: &Tensor| {
            let c = x.cols();
            let y = Tensor::concat_cols(&[x.square(), x.clone()]).unwrap();
            let z = Tensor::concat_rows(&[y.clone(), y.exp()]).unwrap();
            z.slice_cols(c / 2, c + 1).unwrap().slice_rows(1, z.rows()).unwrap()
        })),
        ("reshape", Box::new(|x: &Tensor| x.reshape(1, x.len()).unwrap().square())),
        ("repeat_group", Box::new(|x: &Tensor| x.repeat_cols(4).square().group_sum_cols(2).unwrap())),
        ("tile_fold", Box::new(|x: &Tensor| x.tile_cols(2).exp().fold_sum_cols(2).unwrap().mul(x).unwrap())),
        ("row_kron", Box::new(move |x: &Tensor| x.row_kron(&kron).unwrap().row_kron(x).unwrap())),
        ("exp_ln", Box::new(|x: &Tensor| x.square().add_scalar(0.5).ln().exp())),
        ("sigmoid_swish", Box::new(|x: &Tensor| x.sigmoid().add(&x.swish()).unwrap())),
        ("relu", Box::new(|x: &Tensor| x.relu().scale(2.0).neg())),
        ("powf", Box::new(|x: &Tensor| x.square().add_scalar(1.0).powf(-1.5))),
        ("layer_scale", Box::new(move |x: &Tensor| x.layer_scale(&row).unwrap())),
    ]
}


/// Relative FD error of one attention layer on a lifted SE(2) input, with
/// respect to the input features and then every parameter in turn.
pub fn attention_fd_errors(norm: liesa::attention::NormKind, seed: u64) -> Vec<(String, f64)> {
    use liesa::attention::{AttentionConfig, LieSelfAttention};
    use liesa::autodiff::{grad, ParameterStore};
    use liesa::group::GroupId;
    use liesa::nn::{LiftConfig, LiftedBatch, NeighbourhoodConfig, PairGeometry};
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = AttentionConfig::new(2, 4);
    cfg.norm_kind = norm;
    let layer = LieSelfAttention::new(cfg, GroupId::SE2, "att").unwrap();
    let mut store = ParameterStore::new(seed);
    layer.init(&mut store).unwrap();
    let x = random(4, 2, &mut rng).scale(2.0);
    let f = random(4, 4, &mut rng);
    let batch = LiftedBatch::from_points(GroupId::SE2, &[(x, f)], &LiftConfig::new(3), seed).unwrap();
    let geom = PairGeometry::build(&batch, &NeighbourhoodConfig::full(), true, seed).unwrap();
    let feats = batch.features().detach();
    let w = random(feats.rows(), 4, &mut rng);

    let mut out = Vec::new();
    let run = |s: &ParameterStore, v: &Tensor| layer.forward(s, v, &geom).unwrap();
    let fg = feats.requires_grad();
    let analytic = grad(&project(&run(&store, &fg), &w), &[&fg], false).unwrap().remove(0);
    let numeric = numeric_grad(&|v: &Tensor| run(&store, v), &feats, &w);
    out.push(("input".to_string(), rel_err(analytic.data(), &numeric)));

    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let p = store.get(&name).unwrap().clone();
        let analytic = grad(&project(&run(&store, &feats), &w), &[&p], false).unwrap().remove(0);
        let numeric = numeric_grad(
            &|v: &Tensor| {
                let mut s = store.clone();
                s.set(&name, v.clone()).unwrap();
                run(&s, &feats)
            },
            &p.detach(),
            &w,
        );
        out.push((name, rel_err(analytic.data(), &numeric)));
    }
    out
}
