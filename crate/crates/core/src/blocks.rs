//! Pointwise and pooling layers on lifted features, and the full
//! lift → attention blocks → pool → head model.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LieSelfAttention};
use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::group::{distance, GroupElement, GroupId, LiftedFeatureMap};
use crate::nn::{linear, Activation, LiftConfig, LiftedBatch, Mlp, NeighbourhoodConfig, PairGeometry};
use crate::rng::{derive_seed, seeded};

/// `beta * (f(g) - m(g)) / sqrt(v(g) + eps) + gamma` with mean and variance
/// taken over the channels of each element.
pub fn equivariant_layer_norm(x: &Tensor, beta: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    let centred = x.sub(&x.mean_cols().expand_cols(d)?)?;
    let var = centred.square().mean_cols();
    centred.mul_col(&var.add_scalar(eps).powf(-0.5))?.mul_row(beta)?.add_row(gamma)
}

/// Map-level [`equivariant_layer_norm`].
pub fn layer_norm_map(map: &LiftedFeatureMap, beta: &Tensor, gamma: &Tensor, eps: f64) -> Result<LiftedFeatureMap> {
    let out = equivariant_layer_norm(&Tensor::from_dmatrix(map.features()), beta, gamma, eps)?;
    map.with_features(out.to_dmatrix())
}

/// Running statistics for [`equivariant_batch_norm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub steps: usize,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            steps: 0,
        }
    }
}

type Pairs = (Rc<[usize]>, Rc<[usize]>, Vec<usize>);

/// Pairs `(g, g')` over the whole batch with `d(g, g') <= radius`,
/// subsampled to `max_size` per query. Returns `(query, key, support)`.
fn batch_pairs(batch: &LiftedBatch, nbhd: &NeighbourhoodConfig, seed: u64) -> Result<Pairs> {
    let elements: Vec<&GroupElement> = batch.maps().iter().flat_map(|m| m.elements()).collect();
    let n = elements.len();
    let radius = nbhd.radius.unwrap_or(f64::INFINITY);
    let max_size = nbhd.max_size.unwrap_or(n).max(1);
    let mut query = Vec::new();
    let mut key = Vec::new();
    let mut support = Vec::with_capacity(n);
    for (c, g) in elements.iter().enumerate() {
        let mut others = Vec::new();
        for (j, h) in elements.iter().enumerate() {
            if j != c && (radius.is_infinite() || distance(g, h)? <= radius) {
                others.push(j);
            }
        }
        if others.len() + 1 > max_size {
            let mut rng = seeded(derive_seed(seed, c as u64));
            let picks = rand::seq::index::sample(&mut rng, others.len(), max_size - 1);
            others = picks.into_iter().map(|p| others[p]).collect();
        }
        others.push(c);
        others.sort_unstable();
        support.push(others.len());
        for j in others {
            query.push(c);
            key.push(j);
        }
    }
    Ok((query.into(), key.into(), support))
}

/// Batch normalisation with statistics `m(g)`, `v(g)` pooled over the
/// neighbourhood of `g` across every map in the batch.
///
/// With an unbounded neighbourhood this is ordinary per-channel batch
/// normalisation over all elements. In training mode the per-channel
/// averages of `m(g)` and `v(g)` update the running statistics; evaluation
/// mode uses those and fails if no training step has run.
#[allow(clippy::too_many_arguments)]
pub fn equivariant_batch_norm(
    x: &Tensor,
    batch: &LiftedBatch,
    nbhd: &NeighbourhoodConfig,
    beta: &Tensor,
    gamma: &Tensor,
    state: &mut BatchNormState,
    train: bool,
    rng_seed: u64,
) -> Result<Tensor> {
    let [n, d] = x.shape();
    if n == 0 {
        return Err(Error::Empty("batch norm input"));
    }
    if !train {
        if state.steps == 0 {
            return Err(Error::BatchNormUninitialised);
        }
        let mean = Tensor::row(&state.running_mean);
        let inv_std: Vec<f64> = state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        return x.sub(&mean.expand_rows(n)?)?.mul_row(&Tensor::row(&inv_std))?.mul_row(beta)?.add_row(gamma);
    }
    let (mean, var) = if nbhd.radius.is_none() && nbhd.max_size.is_none_or(|m| m >= n) {
        let m = x.mean_rows().expand_rows(n)?;
        let v = x.sub(&m)?.square().mean_rows().expand_rows(n)?;
        (m, v)
    } else {
        let (query, key, support) = batch_pairs(batch, nbhd, rng_seed)?;
        let inv: Vec<f64> = query.iter().map(|&q| 1.0 / support[q] as f64).collect();
        let inv = Tensor::column(&inv);
        let xk = x.gather_rows(&key)?;
        let m = xk.mul_col(&inv)?.scatter_add_rows(&query, n)?;
        let dev = xk.sub(&m.gather_rows(&query)?)?;
        let v = dev.square().mul_col(&inv)?.scatter_add_rows(&query, n)?;
        (m, v)
    };
    let m_bar = mean.mean_rows();
    let v_bar = var.mean_rows();
    let mo = state.momentum;
    for j in 0..d {
        state.running_mean[j] = (1.0 - mo) * state.running_mean[j] + mo * m_bar.get(0, j);
        state.running_var[j] = (1.0 - mo) * state.running_var[j] + mo * v_bar.get(0, j);
    }
    state.steps += 1;
    x.sub(&mean)?.mul(&var.add_scalar(state.eps).powf(-0.5))?.mul_row(beta)?.add_row(gamma)
}

/// The same MLP applied to every element's features.
pub fn pointwise_mlp(map: &LiftedFeatureMap, mlp: &Mlp, store: &ParameterStore) -> Result<LiftedFeatureMap> {
    let out = mlp.forward(store, &Tensor::from_dmatrix(map.features()))?;
    map.with_features(out.to_dmatrix())
}

/// Mean of the features of each example in a batch, `B x d`.
pub fn g_pool_batch(x: &Tensor, batch: &LiftedBatch) -> Result<Tensor> {
    x.scatter_add_rows(batch.example_of(), batch.num_examples())?.mul_col(&batch.inverse_counts())
}

/// `(1/|G_f|) sum_g f(g)` as a `1 x d` tensor.
pub fn g_pool(map: &LiftedFeatureMap) -> Result<Tensor> {
    if map.is_empty() {
        return Err(Error::Empty("lifted feature map"));
    }
    Ok(Tensor::from_dmatrix(map.features()).mean_rows())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockNorm {
    #[default]
    Layer,
    Batch,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub num_layers: usize,
    pub d_v: usize,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    /// Hidden widths of the pointwise MLP in each block.
    pub mlp_widths: Vec<usize>,
    #[serde(default)]
    pub norm_kind: BlockNorm,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention.feature_dim != self.d_v {
            return Err(Error::Config(format!(
                "attention feature_dim {} differs from d_v {}",
                self.attention.feature_dim, self.d_v
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskHead {
    /// One logit per output column.
    Classifier,
    /// A single value per example.
    Scalar,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrder {
    #[default]
    PoolThenLinear,
    LinearThenPool,
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub group: GroupId,
    pub input_dim: usize,
    pub output_dim: usize,
    pub head: TaskHead,
    pub block: BlockConfig,
    pub lift: LiftConfig,
    #[serde(default)]
    pub nbhd: NeighbourhoodConfig,
    #[serde(default)]
    pub head_order: HeadOrder,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// A small pre-norm model with default attention settings.
    pub fn small(group: GroupId, input_dim: usize, output_dim: usize, head: TaskHead, d_v: usize, heads: usize, layers: usize) -> Self {
        ModelConfig {
            group,
            input_dim,
            output_dim,
            head,
            block: BlockConfig {
                num_layers: layers,
                d_v,
                attention: AttentionConfig::new(heads, d_v),
                norm_placement: NormPlacement::Pre,
                mlp_widths: vec![d_v],
                norm_kind: BlockNorm::Layer,
            },
            lift: LiftConfig::new(1),
            nbhd: NeighbourhoodConfig::full(),
            head_order: HeadOrder::PoolThenLinear,
            norm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.group.lifted_group()?;
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input_dim and output_dim must be positive".into()));
        }
        if self.head == TaskHead::Scalar && self.output_dim != 1 {
            return Err(Error::Config("scalar head needs output_dim 1".into()));
        }
        Ok(())
    }
}

/// Invariant readout and the pre-pooling element features.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `B x output_dim`.
    pub output: Tensor,
    /// `N x d_v`, rows in batch element order.
    pub features: Tensor,
}

/// The stacked model. Batch-norm statistics live inside the model; call
/// [`LieTransformer::set_training`] to switch modes.
#[derive(Debug)]
pub struct LieTransformer {
    config: ModelConfig,
    attention: Vec<LieSelfAttention>,
    mlps: Vec<Mlp>,
    bn: RefCell<Vec<BatchNormState>>,
    training: std::cell::Cell<bool>,
}

impl LieTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let b = &config.block;
        let mut attention = Vec::with_capacity(b.num_layers);
        let mut mlps = Vec::with_capacity(b.num_layers);
        for l in 0..b.num_layers {
            attention.push(LieSelfAttention::new(b.attention.clone(), config.group, format!("block{l}.att"))?);
            let mut dims = vec![b.d_v];
            dims.extend(&b.mlp_widths);
            dims.push(b.d_v);
            mlps.push(Mlp::new(format!("block{l}.mlp"), dims, Activation::Swish)?);
        }
        let bn = (0..2 * b.num_layers).map(|_| BatchNormState::new(b.d_v, 0.1, config.norm_eps)).collect();
        Ok(LieTransformer {
            config,
            attention,
            mlps,
            bn: RefCell::new(bn),
            training: std::cell::Cell::new(true),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn attention_layers(&self) -> &[LieSelfAttention] {
        &self.attention
    }

    pub fn set_training(&self, training: bool) {
        self.training.set(training);
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let b = &self.config.block;
        store.init_linear("embed", self.config.input_dim, b.d_v, true)?;
        for l in 0..b.num_layers {
            if b.norm_kind != BlockNorm::None {
                for k in ["norm1", "norm2"] {
                    store.init_const(&format!("block{l}.{k}.beta"), 1, b.d_v, 1.0)?;
                    store.init_const(&format!("block{l}.{k}.gamma"), 1, b.d_v, 0.0)?;
                }
            }
            self.attention[l].init(store)?;
            self.mlps[l].init(store)?;
        }
        store.init_linear("head", b.d_v, self.config.output_dim, true)
    }

    /// Freshly initialised parameters for seed `seed`.
    pub fn init_store(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new(seed);
        self.init(&mut store)?;
        Ok(store)
    }

    fn norm(&self, store: &ParameterStore, x: &Tensor, batch: &LiftedBatch, layer: usize, which: usize, seed: u64) -> Result<Tensor> {
        let b = &self.config.block;
        let beta = |k: &str| store.get(&format!("block{layer}.norm{which}.{k}"));
        match b.norm_kind {
            BlockNorm::None => Ok(x.clone()),
            BlockNorm::Layer => equivariant_layer_norm(x, beta("beta")?, beta("gamma")?, self.config.norm_eps),
            BlockNorm::Batch => {
                let mut states = self.bn.borrow_mut();
                equivariant_batch_norm(
                    x,
                    batch,
                    &self.config.nbhd,
                    beta("beta")?,
                    beta("gamma")?,
                    &mut states[2 * layer + which - 1],
                    self.training.get(),
                    seed,
                )
            }
        }
    }

    fn residual(
        &self,
        x: &Tensor,
        norm: impl Fn(&Tensor) -> Result<Tensor>,
        branch: impl Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        match self.config.block.norm_placement {
            NormPlacement::Pre => x.add(&branch(&norm(x)?)?),
            NormPlacement::Post => norm(&x.add(&branch(x)?)?),
        }
    }

    /// Runs the blocks and head on a lifted batch with precomputed pairs.
    pub fn forward_lifted(&self, store: &ParameterStore, batch: &LiftedBatch, geom: &PairGeometry, seed: u64) -> Result<ModelOutput> {
        let mut x = linear(store, "embed", batch.features())?;
        for l in 0..self.config.block.num_layers {
            x = self.residual(
                &x,
                |h| self.norm(store, h, batch, l, 1, seed),
                |h| self.attention[l].forward(store, h, geom),
            )?;
            x = self.residual(
                &x,
                |h| self.norm(store, h, batch, l, 2, seed),
                |h| self.mlps[l].forward(store, h),
            )?;
        }
        let output = match self.config.head_order {
            HeadOrder::PoolThenLinear => linear(store, "head", &g_pool_batch(&x, batch)?)?,
            HeadOrder::LinearThenPool => g_pool_batch(&linear(store, "head", &x)?, batch)?,
        };
        Ok(ModelOutput { output, features: x })
    }

    /// Lifts the inputs (example `b` with seed `derive_seed(seed, b)`), builds
    /// the neighbourhoods and runs the model.
    pub fn forward(&self, store: &ParameterStore, examples: &[(Tensor, Tensor)], seed: u64) -> Result<ModelOutput> {
        let batch = LiftedBatch::from_points(self.config.group, examples, &self.config.lift, seed)?;
        let geom = PairGeometry::build(&batch, &self.config.nbhd, self.config.block.attention.use_log_map, seed)?;
        self.forward_lifted(store, &batch, &geom, seed)
    }

    /// Model on already lifted maps (group elements are used as given).
    pub fn forward_maps(&self, store: &ParameterStore, maps: &[LiftedFeatureMap], seed: u64) -> Result<ModelOutput> {
        let batch = LiftedBatch::from_maps(maps)?;
        let geom = PairGeometry::build(&batch, &self.config.nbhd, self.config.block.attention.use_log_map, seed)?;
        self.forward_lifted(store, &batch, &geom, seed)
    }
}
