//! A small dense reverse-mode autodiff engine.
//!
//! Tensors are row-major matrices (`rows x cols`; scalars are `1 x 1`). Every
//! op records a node when any input requires gradients. Backward rules are
//! written in terms of the same differentiable ops, so gradients can
//! themselves be differentiated (`create_graph = true`), which is what the
//! Hamiltonian roll-out loss needs.

mod graph;
mod ops;
pub mod optim;
pub mod params;

use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use graph::{backward, backward_params, grad, Gradients};
pub use params::ParameterStore;

pub use ops::Axis;
pub(crate) use ops::Op;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Storage precision of tensor values.
///
/// `F32` rounds the result of every op to the nearest `f32`; arithmetic inside
/// a single op still runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(crate::Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

pub(crate) struct GradFn {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

pub(crate) struct Node {
    id: usize,
    shape: [usize; 2],
    data: Rc<[f64]>,
    requires_grad: bool,
    low_precision: bool,
    grad_fn: Option<GradFn>,
}

impl Drop for Node {
    // Long roll-out graphs would otherwise overflow the stack through nested drops.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = match self.grad_fn.take() {
            Some(f) => f.parents,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(f) = node.grad_fn.take() {
                    stack.extend(f.parents);
                }
            }
        }
    }
}

/// A reference-counted node in the computation graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &&self.0.data[..self.0.data.len().min(8)])
            .finish()
    }
}

fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

impl Tensor {
    fn leaf(shape: [usize; 2], mut data: Vec<f64>, requires_grad: bool, low_precision: bool) -> Tensor {
        assert_eq!(shape[0] * shape[1], data.len(), "shape/data length mismatch");
        if low_precision {
            round_f32(&mut data);
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: data.into(),
            requires_grad,
            low_precision,
            grad_fn: None,
        }))
    }

    pub(crate) fn from_op(op: Op, parents: Vec<Tensor>, shape: [usize; 2], mut data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        let low_precision = parents.iter().any(|p| p.0.low_precision);
        if low_precision {
            round_f32(&mut data);
        }
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: data.into(),
            requires_grad,
            low_precision,
            grad_fn: requires_grad.then_some(GradFn { op, parents }),
        }))
    }

    /// Constant matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> crate::Result<Tensor> {
        if rows * cols != data.len() {
            return Err(crate::Error::Shape {
                op: "from_vec",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::leaf([rows, cols], data, false, false))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Tensor::leaf([rows, cols], data, false, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf([1, 1], vec![v], false, false)
    }

    /// Row vector `1 x n`.
    pub fn row(v: &[f64]) -> Tensor {
        Tensor::leaf([1, v.len()], v.to_vec(), false, false)
    }

    /// Column vector `n x 1`.
    pub fn column(v: &[f64]) -> Tensor {
        Tensor::leaf([v.len(), 1], v.to_vec(), false, false)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::leaf([rows, cols], vec![0.0; rows * cols], false, false)
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Tensor {
        Tensor::leaf([rows, cols], vec![v; rows * cols], false, false)
    }

    pub fn eye(n: usize) -> Tensor {
        Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_dmatrix(m: &nalgebra::DMatrix<f64>) -> Tensor {
        Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        let [r, c] = self.0.shape;
        nalgebra::DMatrix::from_row_slice(r, c, &self.0.data)
    }

    /// A new leaf sharing these values that records gradients.
    pub fn requires_grad(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape,
            data: self.0.data.clone(),
            requires_grad: true,
            low_precision: self.0.low_precision,
            grad_fn: None,
        }))
    }

    /// A constant sharing these values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape,
            data: self.0.data.clone(),
            requires_grad: false,
            low_precision: self.0.low_precision,
            grad_fn: None,
        }))
    }

    /// Same values and graph position semantics, stored at `precision`.
    /// Returns a leaf (gradient tracking is kept if `self` tracked it).
    pub fn with_precision(&self, precision: Precision) -> Tensor {
        let low = precision == Precision::F32;
        Tensor::leaf(self.0.shape, self.0.data.to_vec(), self.0.requires_grad, low)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> [usize; 2] {
        self.0.shape
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data[i * self.0.shape[1] + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.0.shape[1];
        &self.0.data[i * c..(i + 1) * c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.0.data[0]
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_low_precision(&self) -> bool {
        self.0.low_precision
    }

    pub fn precision(&self) -> Precision {
        if self.0.low_precision {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
