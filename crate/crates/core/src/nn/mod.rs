//! Minimal numeric core: dense layers, activations, normalizations,
//! reverse-mode gradients and SGD.
//!
//! Networks are plain layer stacks. All trainable parameters live in one flat
//! [`ParamVector`]; frozen `fixed_dense` weights are stored beside it and never
//! appear in parameter or gradient vectors.

mod layer;
mod net;
mod params;

pub use layer::{LayerKind, LayerSpec};
pub use net::{init_net, Network, Tape};
pub(crate) use net::stable_norm;
pub use params::{sgd_step, ParamLayout, ParamVector};

pub type Mat = ndarray::Array2<f64>;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Builds a one-row matrix from a slice.
pub fn row(x: &[f64]) -> Mat {
    Mat::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}
