//! Multihead self-attention over lifted feature maps.
//!
//! For a query element `g` and key `g'` in its neighbourhood the layer scores
//! `alpha(g, g') = F(k_c(f(g), f(g')), k_l(g^{-1} g'))`, normalises the scores
//! per query and head, and returns `W^O` applied to the concatenated heads
//! `sum_g' w^m(g, g') W^{V,m} f(g')`. The location kernel only sees relative
//! coordinates, so the layer commutes with left translation of the elements.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::group::{GroupId, LiftedFeatureMap};
use crate::nn::{linear, Activation, LiftedBatch, Mlp, NeighbourhoodConfig, PairGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    DotProduct,
    Concat,
    LinearConcatLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationKind {
    Plain,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineKind {
    Additive,
    Mlp,
    Multiplicative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Softmax,
    Constant,
}

fn default_location_widths() -> Vec<usize> {
    vec![16, 16]
}

fn default_true() -> bool {
    true
}

fn default_content_dim() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub content_kind: ContentKind,
    pub location_kind: LocationKind,
    pub combine_kind: CombineKind,
    pub norm_kind: NormKind,
    /// Number of heads `M`.
    pub heads: usize,
    /// Feature width `d_v`, shared by input and output.
    pub feature_dim: usize,
    /// Hidden widths of the location MLP.
    #[serde(default = "default_location_widths")]
    pub location_mlp_widths: Vec<usize>,
    #[serde(default = "default_true")]
    pub use_log_map: bool,
    /// Output width `d_s` of the trailing linear map of `linear_concat_linear`.
    #[serde(default = "default_content_dim")]
    pub content_dim: usize,
    /// Hidden widths of the combining MLP; empty means one linear layer.
    #[serde(default)]
    pub combine_mlp_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl AttentionConfig {
    /// Dot-product content, three-layer location MLP of width 16, additive
    /// combination, constant normalisation.
    pub fn new(heads: usize, feature_dim: usize) -> Self {
        AttentionConfig {
            content_kind: ContentKind::DotProduct,
            location_kind: LocationKind::Mlp,
            combine_kind: CombineKind::Additive,
            norm_kind: NormKind::Constant,
            heads,
            feature_dim,
            location_mlp_widths: default_location_widths(),
            use_log_map: true,
            content_dim: 1,
            combine_mlp_widths: Vec::new(),
            activation: Activation::Swish,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.heads.max(1)
    }

    /// Width of `k_c` per head.
    pub fn content_width(&self) -> usize {
        match self.content_kind {
            ContentKind::DotProduct => 1,
            ContentKind::Concat => 2 * self.head_dim(),
            ContentKind::LinearConcatLinear => self.content_dim,
        }
    }

    /// Width of `k_l` per head for relative coordinates of size `rel_dim`.
    pub fn location_width(&self, rel_dim: usize) -> usize {
        match self.location_kind {
            LocationKind::Plain => rel_dim,
            LocationKind::Mlp => 1,
        }
    }

    pub fn validate(&self, rel_dim: usize) -> Result<()> {
        if self.heads == 0 || self.feature_dim == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide feature_dim ({})",
                self.heads, self.feature_dim
            )));
        }
        if self.content_kind == ContentKind::LinearConcatLinear && self.content_dim == 0 {
            return Err(Error::Config("content_dim must be positive".into()));
        }
        if self.combine_kind != CombineKind::Mlp {
            if self.content_width() != 1 {
                return Err(Error::Config(format!(
                    "{:?} combination needs a scalar content kernel, {:?} gives width {}",
                    self.combine_kind,
                    self.content_kind,
                    self.content_width()
                )));
            }
            if self.location_width(rel_dim) != 1 {
                return Err(Error::Config(format!(
                    "{:?} combination needs a scalar location kernel, {:?} gives width {}",
                    self.combine_kind,
                    self.location_kind,
                    self.location_width(rel_dim)
                )));
            }
        }
        Ok(())
    }
}

/// One attention layer bound to a parameter-name prefix.
#[derive(Clone, Debug)]
pub struct LieSelfAttention {
    config: AttentionConfig,
    prefix: String,
    rel_dim: usize,
    location: Option<Mlp>,
    combiner: Option<Mlp>,
}

impl LieSelfAttention {
    /// `group` is the lifting group; its algebra dimension is the width of
    /// the relative coordinates.
    pub fn new(config: AttentionConfig, group: GroupId, prefix: impl Into<String>) -> Result<Self> {
        let lifted = group.lifted_group()?;
        let rel_dim = lifted.algebra_dim();
        config.validate(rel_dim)?;
        let prefix = prefix.into();
        let location = match config.location_kind {
            LocationKind::Mlp => {
                let mut dims = vec![rel_dim];
                dims.extend(&config.location_mlp_widths);
                dims.push(config.heads);
                Some(Mlp::new(format!("{prefix}.loc"), dims, config.activation)?)
            }
            LocationKind::Plain => None,
        };
        let combiner = match config.combine_kind {
            CombineKind::Mlp => {
                let mut dims = vec![config.content_width() + config.location_width(rel_dim)];
                dims.extend(&config.combine_mlp_widths);
                dims.push(1);
                Some(Mlp::new(format!("{prefix}.combine"), dims, config.activation)?)
            }
            _ => None,
        };
        Ok(LieSelfAttention {
            config,
            prefix,
            rel_dim,
            location,
            combiner,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn location_mlp(&self) -> Option<&Mlp> {
        self.location.as_ref()
    }

    pub fn combine_mlp(&self) -> Option<&Mlp> {
        self.combiner.as_ref()
    }

    pub fn param(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let d = self.config.feature_dim;
        for w in ["wq", "wk", "wv", "wo"] {
            store.init_linear(&self.param(w), d, d, false)?;
        }
        if self.config.content_kind == ContentKind::LinearConcatLinear {
            store.init_linear(&self.param("content"), 2 * self.config.head_dim(), self.config.content_dim, true)?;
        }
        if let Some(m) = &self.location {
            m.init(store)?;
        }
        if let Some(m) = &self.combiner {
            m.init(store)?;
        }
        Ok(())
    }

    fn project(&self, store: &ParameterStore, w: &str, x: &Tensor) -> Result<Tensor> {
        linear(store, &self.param(w), x)
    }

    /// Content kernel on pairs of already projected features `W^Q f(g)` and
    /// `W^K f(g')` (`P x d_v` each). Returns `P x (M * content_width)`, head-major.
    fn content_projected(&self, store: &ParameterStore, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let dh = self.config.head_dim();
        let m = self.config.heads;
        match self.config.content_kind {
            ContentKind::DotProduct => Ok(q.mul(k)?.group_sum_cols(dh)?.scale(1.0 / (dh as f64).sqrt())),
            ContentKind::Concat | ContentKind::LinearConcatLinear => {
                let mut parts = Vec::with_capacity(2 * m);
                for h in 0..m {
                    parts.push(q.slice_cols(h * dh, (h + 1) * dh)?);
                    parts.push(k.slice_cols(h * dh, (h + 1) * dh)?);
                }
                let cat = Tensor::concat_cols(&parts)?;
                if self.config.content_kind == ContentKind::Concat {
                    return Ok(cat);
                }
                let p = cat.rows();
                let per_head = cat.reshape(p * m, 2 * dh)?;
                linear(store, &self.param("content"), &per_head)?.reshape(p, m * self.config.content_dim)
            }
        }
    }

    /// `k_c(f(g), f(g'))` for feature pairs given row by row (`P x d_v` each).
    pub fn content_attention(&self, store: &ParameterStore, f_g: &Tensor, f_g2: &Tensor) -> Result<Tensor> {
        for f in [f_g, f_g2] {
            if f.cols() != self.config.feature_dim {
                return Err(Error::Shape {
                    op: "content_attention",
                    lhs: f.shape().to_vec(),
                    rhs: vec![self.config.feature_dim],
                });
            }
        }
        let q = self.project(store, "wq", f_g)?;
        let k = self.project(store, "wk", f_g2)?;
        self.content_projected(store, &q, &k)
    }

    /// `k_l` on relative coordinates (`P x rel_dim`). Returns
    /// `P x (M * location_width)`, head-major.
    pub fn location_attention(&self, store: &ParameterStore, rel: &Tensor) -> Result<Tensor> {
        if rel.cols() != self.rel_dim {
            return Err(Error::DimensionMismatch {
                expected: self.rel_dim,
                actual: rel.cols(),
            });
        }
        match &self.location {
            None => Ok(rel.tile_cols(self.config.heads)),
            Some(mlp) => mlp.forward(store, rel),
        }
    }

    /// `F(k_c, k_l)`, one score per pair and head (`P x M`).
    pub fn combine(&self, store: &ParameterStore, kc: &Tensor, kl: &Tensor) -> Result<Tensor> {
        let m = self.config.heads;
        let p = kc.rows();
        match self.config.combine_kind {
            CombineKind::Additive | CombineKind::Multiplicative => {
                if kc.shape() != [p, m] || kl.shape() != [p, m] {
                    return Err(Error::Config(format!(
                        "{:?} combination needs one scalar per head, got {:?} and {:?}",
                        self.config.combine_kind,
                        kc.shape(),
                        kl.shape()
                    )));
                }
                if self.config.combine_kind == CombineKind::Additive {
                    kc.add(kl)
                } else {
                    kc.mul(kl)
                }
            }
            CombineKind::Mlp => {
                let c = kc.cols() / m;
                let l = kl.cols() / m;
                let joint = Tensor::concat_cols(&[kc.reshape(p * m, c)?, kl.reshape(p * m, l)?])?;
                self.combiner.as_ref().unwrap().forward(store, &joint)?.reshape(p, m)
            }
        }
    }

    /// Normalised weights `w^m(g, g')` for every pair and head (`P x M`).
    pub fn weights(&self, store: &ParameterStore, x: &Tensor, geom: &PairGeometry) -> Result<Tensor> {
        let q = geom.at_query(&self.project(store, "wq", x)?)?;
        let k = geom.at_key(&self.project(store, "wk", x)?)?;
        let kc = self.content_projected(store, &q, &k)?;
        let kl = self.location_attention(store, geom.rel())?;
        let alpha = self.combine(store, &kc, &kl)?;
        match self.config.norm_kind {
            NormKind::Softmax => geom.segment_softmax(&alpha),
            NormKind::Constant => alpha.mul_col(geom.inv_support()),
        }
    }

    /// Layer output for element features `x` (`N x d_v`).
    pub fn forward(&self, store: &ParameterStore, x: &Tensor, geom: &PairGeometry) -> Result<Tensor> {
        if x.cols() != self.config.feature_dim || x.rows() != geom.num_elements() {
            return Err(Error::Shape {
                op: "lie_self_attention",
                lhs: x.shape().to_vec(),
                rhs: vec![geom.num_elements(), self.config.feature_dim],
            });
        }
        let w = self.weights(store, x, geom)?;
        let v = geom.at_key(&self.project(store, "wv", x)?)?;
        let heads = geom.sum_to_query(&v.mul(&w.repeat_cols(self.config.head_dim()))?)?;
        self.project(store, "wo", &heads)
    }
}

/// Runs one layer on a single lifted map; elements pass through unchanged.
pub fn lie_self_attention(
    layer: &LieSelfAttention,
    store: &ParameterStore,
    map: &LiftedFeatureMap,
    nbhd: &NeighbourhoodConfig,
    rng_seed: u64,
) -> Result<LiftedFeatureMap> {
    if map.is_empty() {
        return Err(Error::Empty("lifted feature map"));
    }
    let batch = LiftedBatch::from_maps(std::slice::from_ref(map))?;
    let geom = PairGeometry::build(&batch, nbhd, layer.config().use_log_map, rng_seed)?;
    let out = layer.forward(store, batch.features(), &geom)?;
    map.with_features(out.to_dmatrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{lift_with_stabiliser, sample_stabiliser, SpatialPoint};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(cfg: AttentionConfig, group: GroupId, seed: u64) -> (LieSelfAttention, ParameterStore) {
        let l = LieSelfAttention::new(cfg, group, "att").unwrap();
        let mut store = ParameterStore::new(seed);
        l.init(&mut store).unwrap();
        (l, store)
    }

    fn random_map(group: GroupId, n: usize, d_v: usize, h: usize, rng: &mut ChaCha8Rng) -> LiftedFeatureMap {
        let pts: Vec<SpatialPoint> = (0..n)
            .map(|_| SpatialPoint::new(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]))
            .collect();
        let f = DMatrix::from_fn(n, d_v, |_, _| rng.gen_range(-1.0..1.0));
        let stab = sample_stabiliser(group, h, rng.gen()).unwrap();
        lift_with_stabiliser(&pts, &f, group, &stab).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttentionConfig::new(3, 8);
        assert!(LieSelfAttention::new(cfg.clone(), GroupId::SE2, "a").is_err());
        cfg.heads = 2;
        assert!(LieSelfAttention::new(cfg.clone(), GroupId::SE2, "a").is_ok());
        cfg.content_kind = ContentKind::Concat;
        assert!(LieSelfAttention::new(cfg.clone(), GroupId::SE2, "a").is_err());
        cfg.combine_kind = CombineKind::Mlp;
        cfg.location_kind = LocationKind::Plain;
        assert!(LieSelfAttention::new(cfg, GroupId::SE2, "a").is_ok());
        let json = serde_json::to_string(&AttentionConfig::new(2, 8)).unwrap();
        for field in ["content_kind", "location_kind", "combine_kind", "norm_kind", "heads", "feature_dim", "location_mlp_widths", "use_log_map"] {
            assert!(json.contains(field), "{field}");
        }
        assert!(json.contains("\"dot_product\""));
        let back: AttentionConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AttentionConfig::new(2, 8));
    }

    #[test]
    fn dot_product_identity_weights() {
        let (l, mut store) = layer(AttentionConfig::new(1, 4), GroupId::T(2), 0);
        store.set("att.wq.weight", Tensor::eye(4)).unwrap();
        store.set("att.wk.weight", Tensor::eye(4)).unwrap();
        let e1 = Tensor::row(&[1.0, 0.0, 0.0, 0.0]);
        let kc = l.content_attention(&store, &e1, &e1).unwrap();
        assert!((kc.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concat_width_and_plain_location() {
        let mut cfg = AttentionConfig::new(2, 6);
        cfg.content_kind = ContentKind::Concat;
        cfg.location_kind = LocationKind::Plain;
        cfg.combine_kind = CombineKind::Mlp;
        let (l, store) = layer(cfg, GroupId::SE2, 1);
        let f = Tensor::from_fn(5, 6, |i, j| (i * j) as f64 * 0.1);
        assert_eq!(l.content_attention(&store, &f, &f).unwrap().shape(), [5, 2 * 2 * 3]);
        let zero = Tensor::zeros(1, 3);
        assert!(l.location_attention(&store, &zero).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn combine_variants() {
        let (add, store) = layer(AttentionConfig::new(1, 2), GroupId::T(2), 0);
        let a = Tensor::scalar(0.5);
        let b = Tensor::scalar(0.25);
        assert_eq!(add.combine(&store, &a, &b).unwrap().item(), 0.75);
        let mut cfg = AttentionConfig::new(1, 2);
        cfg.combine_kind = CombineKind::Multiplicative;
        let (mul, store) = layer(cfg, GroupId::T(2), 0);
        assert_eq!(mul.combine(&store, &Tensor::scalar(2.0), &b.scale(2.0)).unwrap().item(), 1.0);
        let mut cfg = AttentionConfig::new(2, 4);
        cfg.combine_kind = CombineKind::Mlp;
        let (mlp, mut store) = layer(cfg, GroupId::T(2), 0);
        store.set("att.combine.0.weight", Tensor::column(&[1.0, 1.0])).unwrap();
        store.set("att.combine.0.bias", Tensor::scalar(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kc = Tensor::from_vec(7, 2, (0..14).map(|_| rng.gen()).collect()).unwrap();
        let kl = Tensor::from_vec(7, 2, (0..14).map(|_| rng.gen()).collect()).unwrap();
        let via_mlp = mlp.combine(&store, &kc, &kl).unwrap();
        assert!(via_mlp.max_abs_diff(&kc.add(&kl).unwrap()) < 1e-12);
    }

    #[test]
    fn single_element_softmax() {
        let mut cfg = AttentionConfig::new(2, 4);
        cfg.norm_kind = NormKind::Softmax;
        let (l, store) = layer(cfg, GroupId::SE2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(GroupId::SE2, 1, 4, 1, &mut rng);
        let out = lie_self_attention(&l, &store, &map, &NeighbourhoodConfig::full(), 0).unwrap();
        let f = Tensor::from_dmatrix(map.features());
        let expect = f
            .matmul(store.get("att.wv.weight").unwrap())
            .unwrap()
            .matmul(store.get("att.wo.weight").unwrap())
            .unwrap();
        assert!(Tensor::from_dmatrix(out.features()).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn uniform_weights_give_mean() {
        let mut cfg = AttentionConfig::new(2, 4);
        cfg.norm_kind = NormKind::Softmax;
        let (l, mut store) = layer(cfg, GroupId::SE2, 4);
        l.location_mlp().unwrap().zero_last(&mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_map(GroupId::SE2, 4, 4, 3, &mut rng);
        let row = [0.3, -0.2, 0.5, 1.0];
        let map = base.with_features(DMatrix::from_fn(base.len(), 4, |_, j| row[j])).unwrap();
        let out = lie_self_attention(&l, &store, &map, &NeighbourhoodConfig::full(), 0).unwrap();
        let f = Tensor::row(&row);
        let expect = f
            .matmul(store.get("att.wv.weight").unwrap())
            .unwrap()
            .matmul(store.get("att.wo.weight").unwrap())
            .unwrap();
        for i in 0..out.len() {
            for j in 0..4 {
                assert!((out.features()[(i, j)] - expect.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equivariant_under_se2_left_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for norm in [NormKind::Softmax, NormKind::Constant] {
            let mut cfg = AttentionConfig::new(2, 4);
            cfg.norm_kind = norm;
            let (l, store) = layer(cfg, GroupId::SE2, 6);
            let map = random_map(GroupId::SE2, 4, 4, 3, &mut rng);
            let out = lie_self_attention(&l, &store, &map, &NeighbourhoodConfig::full(), 0).unwrap();
            for _ in 0..20 {
                let u = crate::group::exp_map(
                    &crate::group::AlgebraVector::new(GroupId::SE2, (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap(),
                );
                let moved = map.left_act(&u).unwrap();
                let out2 = lie_self_attention(&l, &store, &moved, &NeighbourhoodConfig::full(), 0).unwrap();
                assert!((out.features() - out2.features()).amax() < 1e-9);
                for (a, b) in out2.elements().iter().zip(moved.elements()) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn constant_norm_divides_by_support() {
        let (l, store) = layer(AttentionConfig::new(1, 2), GroupId::T(2), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = random_map(GroupId::T(2), 6, 2, 1, &mut rng);
        let batch = LiftedBatch::from_maps(std::slice::from_ref(&map)).unwrap();
        let nb = NeighbourhoodConfig {
            radius: Some(1.5),
            max_size: Some(3),
        };
        let geom = PairGeometry::build(&batch, &nb, true, 0).unwrap();
        let w = l.weights(&store, batch.features(), &geom).unwrap();
        let q = Tensor::from_dmatrix(map.features()).matmul(store.get("att.wq.weight").unwrap()).unwrap();
        let k = Tensor::from_dmatrix(map.features()).matmul(store.get("att.wk.weight").unwrap()).unwrap();
        for p in 0..geom.num_pairs() {
            let (a, b) = (geom.query()[p], geom.key()[p]);
            let kc: f64 = (0..2).map(|j| q.get(a, j) * k.get(b, j)).sum::<f64>() / 2f64.sqrt();
            let kl = l.location_attention(&store, &geom.rel().slice_rows(p, p + 1).unwrap()).unwrap().item();
            let expect = (kc + kl) / geom.support()[a] as f64;
            assert!((w.get(p, 0) - expect).abs() < 1e-12);
        }
    }
}
