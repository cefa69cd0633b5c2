//! Group-equivariant self-attention over lifted Lie group feature maps.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod audit;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod dynamics;
pub mod error;
pub mod group;
pub mod nn;
pub mod probe;
pub mod rng;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
