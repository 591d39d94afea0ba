use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    LeakyRelu { slope: f64 },
    Tanh,
    L2Normalize,
    /// Randomly initialized, then frozen. Not part of the parameter vector.
    FixedDense,
    /// Per-sample normalization with trainable gain and bias.
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec { kind: LayerKind::Dense, in_dim, out_dim }
    }

    pub fn fixed_dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec { kind: LayerKind::FixedDense, in_dim, out_dim }
    }

    pub fn leaky_relu(dim: usize, slope: f64) -> Self {
        LayerSpec { kind: LayerKind::LeakyRelu { slope }, in_dim: dim, out_dim: dim }
    }

    pub fn tanh(dim: usize) -> Self {
        LayerSpec { kind: LayerKind::Tanh, in_dim: dim, out_dim: dim }
    }

    pub fn l2_normalize(dim: usize) -> Self {
        LayerSpec { kind: LayerKind::L2Normalize, in_dim: dim, out_dim: dim }
    }

    pub fn layer_norm(dim: usize) -> Self {
        LayerSpec { kind: LayerKind::LayerNorm, in_dim: dim, out_dim: dim }
    }

    pub fn trainable(&self) -> bool {
        matches!(self.kind, LayerKind::Dense | LayerKind::LayerNorm)
    }

    /// Number of trainable parameters this layer contributes.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim + self.out_dim,
            LayerKind::LayerNorm => 2 * self.out_dim,
            _ => 0,
        }
    }

    pub fn frozen_count(&self) -> usize {
        match self.kind {
            LayerKind::FixedDense => self.in_dim * self.out_dim,
            _ => 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::shape(format!("{:?} has a zero dimension", self.kind)));
        }
        let elementwise = !matches!(self.kind, LayerKind::Dense | LayerKind::FixedDense);
        if elementwise && self.in_dim != self.out_dim {
            return Err(Error::shape(format!(
                "{:?} must have in_dim == out_dim, got {} -> {}",
                self.kind, self.in_dim, self.out_dim
            )));
        }
        if let LayerKind::LeakyRelu { slope } = self.kind {
            if !slope.is_finite() {
                return Err(Error::param("leaky_relu slope must be finite"));
            }
        }
        Ok(())
    }
}
