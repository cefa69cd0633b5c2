//! Monte Carlo group convolution with a kernel MLP, evaluated either
//! directly or with the kernel's last linear layer moved outside the
//! neighbourhood sum.

use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::blocks::{equivariant_batch_norm, g_pool_batch, BatchNormState, TaskHead};
use crate::error::{Error, Result};
use crate::group::{GroupId, LiftedFeatureMap};
use crate::nn::{linear, Activation, LiftConfig, LiftedBatch, Mlp, NeighbourhoodConfig, PairGeometry};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub d_v: usize,
    pub d_out: usize,
    /// Hidden widths of the kernel MLP; the last one is `d_mid`.
    pub kernel_mlp_widths: Vec<usize>,
    #[serde(default)]
    pub nbhd: NeighbourhoodConfig,
    #[serde(default = "default_true")]
    pub use_log_map: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl ConvConfig {
    pub fn new(d_v: usize, d_out: usize, kernel_mlp_widths: Vec<usize>) -> Self {
        ConvConfig {
            d_v,
            d_out,
            kernel_mlp_widths,
            nbhd: NeighbourhoodConfig::full(),
            use_log_map: true,
            activation: Activation::Swish,
        }
    }

    pub fn d_mid(&self) -> usize {
        self.kernel_mlp_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_mid() == 0 || self.kernel_mlp_widths.contains(&0) {
            return Err(Error::Config("kernel MLP widths must be positive and non-empty".into()));
        }
        if self.d_v == 0 || self.d_out == 0 {
            return Err(Error::Config("d_v and d_out must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar counts of the buffers one evaluation materialises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMemory {
    /// Kernel values: `P * d_out * d_v` naive, `P * d_mid + d_mid * d_out * d_v`
    /// reordered.
    pub kernel_scalars: usize,
    /// Everything else sized by the pair count.
    pub pair_scalars: usize,
}

/// Analytic kernel-buffer sizes `(naive, reordered)` for `elements` group
/// elements with `nbhd` neighbours each.
pub fn analytic_kernel_memory(elements: usize, nbhd: usize, d_v: usize, d_out: usize, d_mid: usize) -> (usize, usize) {
    (elements * nbhd * d_out * d_v, elements * nbhd * d_mid + d_out * d_v * d_mid)
}

/// A convolution layer `f_out(g) = (1/|nbhd(g)|) sum_{g'} k(g^{-1} g') f(g')`
/// with `k = H . M(nu[log(g^{-1} g')])` reshaped to `d_out x d_v`.
///
/// Parameters: the kernel MLP `M` under `{prefix}.kernel` (activation after
/// every layer) and `H` as `{prefix}.h.weight`, `d_mid x (d_out * d_v)`,
/// column `o * d_v + v`.
#[derive(Clone, Debug)]
pub struct GroupConv {
    config: ConvConfig,
    kernel: Mlp,
    prefix: String,
    rel_dim: usize,
}

impl GroupConv {
    pub fn new(config: ConvConfig, group: GroupId, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let prefix = prefix.into();
        let rel_dim = group.lifted_group()?.algebra_dim();
        let mut dims = vec![rel_dim];
        dims.extend(&config.kernel_mlp_widths);
        let kernel = Mlp::new(format!("{prefix}.kernel"), dims, config.activation)?;
        Ok(GroupConv {
            config,
            kernel,
            prefix,
            rel_dim,
        })
    }

    pub fn config(&self) -> &ConvConfig {
        &self.config
    }

    pub fn h_name(&self) -> String {
        format!("{}.h.weight", self.prefix)
    }

    pub fn kernel_mlp(&self) -> &Mlp {
        &self.kernel
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        self.kernel.init(store)?;
        let c = &self.config;
        store.init_linear(&format!("{}.h", self.prefix), c.d_mid(), c.d_out * c.d_v, false)
    }

    /// `M(nu[log(g^{-1} g')])` per pair, `P x d_mid`.
    pub fn kernel_hidden(&self, store: &ParameterStore, geom: &PairGeometry) -> Result<Tensor> {
        if geom.rel().cols() != self.rel_dim {
            return Err(Error::DimensionMismatch {
                expected: self.rel_dim,
                actual: geom.rel().cols(),
            });
        }
        Ok(self.config.activation.apply(&self.kernel.forward(store, geom.rel())?))
    }

    fn check_input(&self, x: &Tensor, geom: &PairGeometry) -> Result<()> {
        if x.cols() != self.config.d_v || x.rows() != geom.num_elements() {
            return Err(Error::Shape {
                op: "group_conv",
                lhs: x.shape().to_vec(),
                rhs: vec![geom.num_elements(), self.config.d_v],
            });
        }
        Ok(())
    }

    /// Full kernel matrices per pair, then the neighbourhood average.
    pub fn forward_naive(&self, store: &ParameterStore, x: &Tensor, geom: &PairGeometry) -> Result<(Tensor, ConvMemory)> {
        self.check_input(x, geom)?;
        let m = self.kernel_hidden(store, geom)?;
        let k = m.matmul(store.get(&self.h_name())?)?;
        let out = apply_pair_kernel(&k, x, geom, self.config.d_out)?;
        let mem = ConvMemory {
            kernel_scalars: k.len(),
            pair_scalars: m.len() + k.len() + geom.num_pairs() * (self.config.d_v + self.config.d_out),
        };
        Ok((out, mem))
    }

    /// `reshape(H) . sum_{g'} M(g^{-1} g') (x) f(g')`: the sum over the
    /// neighbourhood runs on `d_mid * d_v` Kronecker features and the
    /// kernel matrices are never formed.
    pub fn forward_pointconv(&self, store: &ParameterStore, x: &Tensor, geom: &PairGeometry) -> Result<(Tensor, ConvMemory)> {
        self.check_input(x, geom)?;
        let c = &self.config;
        let (d_mid, d_v, d_out) = (c.d_mid(), c.d_v, c.d_out);
        let m = self.kernel_hidden(store, geom)?;
        let kron = m.mul_col(geom.inv_support())?.row_kron(&geom.at_key(x)?)?;
        let summed = geom.sum_to_query(&kron)?;
        let h = store.get(&self.h_name())?;
        let mut out: Option<Tensor> = None;
        for j in 0..d_mid {
            let hj = h.slice_rows(j, j + 1)?.reshape(d_out, d_v)?.transpose();
            let term = summed.slice_cols(j * d_v, (j + 1) * d_v)?.matmul(&hj)?;
            out = Some(match out {
                Some(o) => o.add(&term)?,
                None => term,
            });
        }
        let mem = ConvMemory {
            kernel_scalars: m.len() + h.len(),
            pair_scalars: m.len() + kron.len() + geom.num_pairs() * d_v,
        };
        Ok((out.expect("d_mid >= 1"), mem))
    }
}

/// `(1/|nbhd(g)|) sum_{g'} K(g, g') f(g')` for per-pair kernels `K`
/// flattened row-major into `P x (d_out * d_v)`.
pub fn apply_pair_kernel(k: &Tensor, x: &Tensor, geom: &PairGeometry, d_out: usize) -> Result<Tensor> {
    let d_v = x.cols();
    if k.rows() != geom.num_pairs() || k.cols() != d_out * d_v {
        return Err(Error::Shape {
            op: "apply_pair_kernel",
            lhs: k.shape().to_vec(),
            rhs: vec![geom.num_pairs(), d_out * d_v],
        });
    }
    let per_pair = k.mul(&geom.at_key(x)?.tile_cols(d_out))?.group_sum_cols(d_v)?;
    geom.sum_to_query(&per_pair.mul_col(geom.inv_support())?)
}

fn conv_map(
    conv: &GroupConv,
    store: &ParameterStore,
    map: &LiftedFeatureMap,
    rng_seed: u64,
    pointconv: bool,
) -> Result<LiftedFeatureMap> {
    if map.is_empty() {
        return Err(Error::Empty("lifted feature map"));
    }
    let batch = LiftedBatch::from_maps(std::slice::from_ref(map))?;
    let geom = PairGeometry::build(&batch, &conv.config.nbhd, conv.config.use_log_map, rng_seed)?;
    let (out, _) = if pointconv {
        conv.forward_pointconv(store, batch.features(), &geom)?
    } else {
        conv.forward_naive(store, batch.features(), &geom)?
    };
    map.with_features(out.to_dmatrix())
}

pub fn group_conv_naive(conv: &GroupConv, store: &ParameterStore, map: &LiftedFeatureMap, rng_seed: u64) -> Result<LiftedFeatureMap> {
    conv_map(conv, store, map, rng_seed, false)
}

pub fn group_conv_pointconv(conv: &GroupConv, store: &ParameterStore, map: &LiftedFeatureMap, rng_seed: u64) -> Result<LiftedFeatureMap> {
    conv_map(conv, store, map, rng_seed, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvModelConfig {
    pub group: GroupId,
    pub input_dim: usize,
    pub output_dim: usize,
    pub head: TaskHead,
    pub d_v: usize,
    pub num_layers: usize,
    pub kernel_mlp_widths: Vec<usize>,
    pub lift: LiftConfig,
    #[serde(default)]
    pub nbhd: NeighbourhoodConfig,
    #[serde(default = "default_true")]
    pub use_log_map: bool,
    #[serde(default)]
    pub pointconv: bool,
}

/// Baseline stack: embed, then `x + swish(BN(conv(x)))` per layer, G-pool and
/// a linear head.
#[derive(Debug)]
pub struct ConvModel {
    config: ConvModelConfig,
    layers: Vec<GroupConv>,
    bn: RefCell<Vec<BatchNormState>>,
    training: Cell<bool>,
}

impl ConvModel {
    pub fn new(config: ConvModelConfig) -> Result<Self> {
        if config.head == TaskHead::Scalar && config.output_dim != 1 {
            return Err(Error::Config("scalar head needs output_dim 1".into()));
        }
        let layers = (0..config.num_layers)
            .map(|l| {
                let mut c = ConvConfig::new(config.d_v, config.d_v, config.kernel_mlp_widths.clone());
                c.nbhd = config.nbhd;
                c.use_log_map = config.use_log_map;
                GroupConv::new(c, config.group, format!("conv{l}"))
            })
            .collect::<Result<_>>()?;
        let bn = (0..config.num_layers).map(|_| BatchNormState::new(config.d_v, 0.1, 1e-5)).collect();
        Ok(ConvModel {
            config,
            layers,
            bn: RefCell::new(bn),
            training: Cell::new(true),
        })
    }

    pub fn config(&self) -> &ConvModelConfig {
        &self.config
    }

    pub fn set_training(&self, training: bool) {
        self.training.set(training);
    }

    pub fn init_store(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new(seed);
        store.init_linear("embed", self.config.input_dim, self.config.d_v, true)?;
        for (l, conv) in self.layers.iter().enumerate() {
            conv.init(&mut store)?;
            store.init_const(&format!("bn{l}.beta"), 1, self.config.d_v, 1.0)?;
            store.init_const(&format!("bn{l}.gamma"), 1, self.config.d_v, 0.0)?;
        }
        store.init_linear("head", self.config.d_v, self.config.output_dim, true)?;
        Ok(store)
    }

    pub fn forward(&self, store: &ParameterStore, examples: &[(Tensor, Tensor)], seed: u64) -> Result<Tensor> {
        let batch = LiftedBatch::from_points(self.config.group, examples, &self.config.lift, seed)?;
        let geom = PairGeometry::build(&batch, &self.config.nbhd, self.config.use_log_map, seed)?;
        let mut x = linear(store, "embed", batch.features())?;
        for (l, conv) in self.layers.iter().enumerate() {
            let (h, _) = if self.config.pointconv {
                conv.forward_pointconv(store, &x, &geom)?
            } else {
                conv.forward_naive(store, &x, &geom)?
            };
            let h = equivariant_batch_norm(
                &h,
                &batch,
                &self.config.nbhd,
                store.get(&format!("bn{l}.beta"))?,
                store.get(&format!("bn{l}.gamma"))?,
                &mut self.bn.borrow_mut()[l],
                self.training.get(),
                seed,
            )?;
            x = x.add(&h.swish())?;
        }
        linear(store, "head", &g_pool_batch(&x, &batch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{lift_with_stabiliser, sample_stabiliser, GroupElement, SpatialPoint};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c4_map(n: usize, d: usize, rng: &mut ChaCha8Rng) -> LiftedFeatureMap {
        let pts: Vec<SpatialPoint> = (0..n)
            .map(|_| SpatialPoint::new(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]))
            .collect();
        let f = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let h = sample_stabiliser(GroupId::Cyclic(4), 1, 0).unwrap();
        lift_with_stabiliser(&pts, &f, GroupId::Cyclic(4), &h).unwrap()
    }

    fn geom_of(map: &LiftedFeatureMap, nbhd: &NeighbourhoodConfig) -> (LiftedBatch, PairGeometry) {
        let batch = LiftedBatch::from_maps(std::slice::from_ref(map)).unwrap();
        let geom = PairGeometry::build(&batch, nbhd, true, 0).unwrap();
        (batch, geom)
    }

    #[test]
    fn delta_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = c4_map(3, 2, &mut rng);
        let (batch, geom) = geom_of(&map, &NeighbourhoodConfig::full());
        let k = Tensor::from_fn(geom.num_pairs(), 4, |p, j| {
            let at_e = geom.rel().row_slice(p).iter().all(|v| v.abs() < 1e-12);
            if at_e && (j == 0 || j == 3) {
                1.0
            } else {
                0.0
            }
        });
        let out = apply_pair_kernel(&k, batch.features(), &geom, 2).unwrap();
        let n = map.len() as f64;
        for i in 0..map.len() {
            for j in 0..2 {
                assert!((out.get(i, j) - batch.features().get(i, j) / n).abs() < 1e-14);
            }
        }
        let tiny = NeighbourhoodConfig {
            radius: Some(1e-9),
            max_size: Some(1),
        };
        let (batch, geom) = geom_of(&map, &tiny);
        let k = Tensor::from_fn(geom.num_pairs(), 4, |_, j| if j == 0 || j == 3 { 1.0 } else { 0.0 });
        let out = apply_pair_kernel(&k, batch.features(), &geom, 2).unwrap();
        assert!(out.max_abs_diff(batch.features()) < 1e-15);
    }

    #[test]
    fn both_paths_are_equivariant_on_exact_lifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = c4_map(4, 3, &mut rng);
        let conv = GroupConv::new(ConvConfig::new(3, 5, vec![8, 4]), GroupId::Cyclic(4), "c").unwrap();
        let mut store = ParameterStore::new(3);
        conv.init(&mut store).unwrap();
        for k in 0..4 {
            let u = GroupElement::from_parts(
                GroupId::SE2,
                &crate::group::rot2(k as f64 * std::f64::consts::FRAC_PI_2),
                &[0.7, -1.1],
            )
            .unwrap();
            for pointconv in [false, true] {
                let a = conv_map(&conv, &store, &map, 0, pointconv).unwrap();
                let b = conv_map(&conv, &store, &map.left_act(&u).unwrap(), 0, pointconv).unwrap();
                let diff = (a.features() - b.features()).abs().max();
                assert!(diff < 1e-10, "k={k} pointconv={pointconv} diff={diff}");
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = c4_map(3, 2, &mut rng);
        let map = map.with_features(DMatrix::from_element(map.len(), 2, 1.5)).unwrap();
        let conv = GroupConv::new(ConvConfig::new(2, 2, vec![4]), GroupId::Cyclic(4), "c").unwrap();
        let mut store = ParameterStore::new(4);
        conv.init(&mut store).unwrap();
        store.set(&conv.h_name(), Tensor::zeros(4, 4)).unwrap();
        let out = group_conv_naive(&conv, &store, &map, 0).unwrap();
        assert!(out.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kronecker_degenerate_case_is_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = c4_map(3, 2, &mut rng);
        let conv = GroupConv::new(ConvConfig::new(2, 3, vec![1]), GroupId::Cyclic(4), "c").unwrap();
        let (batch, geom) = geom_of(&map, &NeighbourhoodConfig::full());
        let mut store = ParameterStore::new(6);
        conv.init(&mut store).unwrap();
        // M == 1: zero weights and a bias with swish(b) = 1
        let kernel_layer = conv.kernel_mlp().layer_name(0);
        store.set(&format!("{kernel_layer}.weight"), Tensor::zeros(3, 1)).unwrap();
        let b = {
            // solve b * sigmoid(b) = 1 by Newton
            let mut b = 1.0_f64;
            for _ in 0..50 {
                let s = 1.0 / (1.0 + (-b).exp());
                b -= (b * s - 1.0) / (s + b * s * (1.0 - s));
            }
            b
        };
        store.set(&format!("{kernel_layer}.bias"), Tensor::scalar(b)).unwrap();
        let (out, _) = conv.forward_pointconv(&store, batch.features(), &geom).unwrap();
        let h = store.get(&conv.h_name()).unwrap().reshape(3, 2).unwrap();
        let mean = batch.features().mean_rows();
        let expect = mean.matmul(&h.transpose()).unwrap();
        for i in 0..map.len() {
            for o in 0..3 {
                assert!((out.get(i, o) - expect.get(0, o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointconv_buffers_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<SpatialPoint> = (0..8).map(|_| SpatialPoint::new(vec![rng.gen(), rng.gen()])).collect();
        let map = crate::group::lift(&pts, &DMatrix::from_fn(8, 64, |i, j| ((i * j) as f64).sin()), GroupId::SE2, 4, 1).unwrap();
        let nb = NeighbourhoodConfig {
            radius: None,
            max_size: Some(32),
        };
        let (batch, geom) = geom_of(&map, &nb);
        let conv = GroupConv::new(ConvConfig::new(64, 64, vec![16, 8]), GroupId::SE2, "c").unwrap();
        let mut store = ParameterStore::new(8);
        conv.init(&mut store).unwrap();
        let (a, ma) = conv.forward_naive(&store, batch.features(), &geom).unwrap();
        let (b, mb) = conv.forward_pointconv(&store, batch.features(), &geom).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        assert!(ma.kernel_scalars >= 8 * mb.kernel_scalars, "{ma:?} {mb:?}");
        let (n, t) = analytic_kernel_memory(32, 32, 64, 64, 8);
        assert!(n as f64 / t as f64 > 8.0);
        let (n, t) = analytic_kernel_memory(32, 32, 2, 2, 4);
        assert!(n as f64 / t as f64 <= 1.0);
    }

    #[test]
    fn conv_model_runs_and_is_translation_invariant() {
        let cfg = ConvModelConfig {
            group: GroupId::T(2),
            input_dim: 2,
            output_dim: 1,
            head: TaskHead::Scalar,
            d_v: 8,
            num_layers: 2,
            kernel_mlp_widths: vec![8, 4],
            lift: LiftConfig::new(1),
            nbhd: NeighbourhoodConfig::full(),
            use_log_map: true,
            pointconv: true,
        };
        let model = ConvModel::new(cfg).unwrap();
        let store = model.init_store(1).unwrap();
        let x = Tensor::from_fn(5, 2, |i, j| (i as f64 * 0.7 + j as f64).sin());
        let f = Tensor::from_fn(5, 2, |i, j| 1.0 + 0.1 * (i + j) as f64);
        let xs = x.add_row(&Tensor::row(&[3.0, -2.0])).unwrap();
        let a = model.forward(&store, &[(x, f.clone())], 0).unwrap();
        let b = model.forward(&store, &[(xs, f)], 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }
}
