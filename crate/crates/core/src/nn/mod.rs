//! Dense layers and the pair geometry shared by attention and convolution.

mod geometry;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub use geometry::{LiftConfig, LiftedBatch, NeighbourhoodConfig, PairGeometry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Swish => x.swish(),
            Activation::Relu => x.relu(),
        }
    }
}

/// `x W + b` with `W` stored as `{prefix}.weight` and the optional bias as
/// `{prefix}.bias`.
pub fn linear(store: &ParameterStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let y = x.matmul(store.get(&format!("{prefix}.weight"))?)?;
    let bias = format!("{prefix}.bias");
    if store.contains(&bias) {
        y.add_row(store.get(&bias)?)
    } else {
        Ok(y)
    }
}

/// A stack of linear layers with an activation between them (none after the
/// last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    activation: Activation,
    bias: bool,
}

impl Mlp {
    /// `dims` lists input width, hidden widths, output width.
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("mlp needs at least two positive widths, got {dims:?}")));
        }
        Ok(Mlp {
            prefix: prefix.into(),
            dims,
            activation,
            bias: true,
        })
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_name(&self, i: usize) -> String {
        format!("{}.{i}", self.prefix)
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        for (i, w) in self.dims.windows(2).enumerate() {
            store.init_linear(&self.layer_name(i), w[0], w[1], self.bias)?;
        }
        Ok(())
    }

    /// Sets the last layer's weight and bias to zero.
    pub fn zero_last(&self, store: &mut ParameterStore) -> Result<()> {
        let last = self.layer_name(self.num_layers() - 1);
        for suffix in ["weight", "bias"] {
            let name = format!("{last}.{suffix}");
            if store.contains(&name) {
                let t = store.get(&name)?;
                let z = Tensor::zeros(t.rows(), t.cols());
                store.set(&name, z)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = x.clone();
        for i in 0..self.num_layers() {
            h = linear(store, &self.layer_name(i), &h)?;
            if i + 1 < self.num_layers() {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }
}
