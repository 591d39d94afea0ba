use std::io::{Read, Write};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::LayerSpec;
use crate::error::{Error, Result};

/// Where each layer's trainable parameters sit inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Option<(usize, usize)>>,
    total: usize,
}

impl ParamLayout {
    pub fn from_specs(specs: &[LayerSpec]) -> Self {
        let mut offset = 0;
        let segments = specs
            .iter()
            .map(|s| {
                let n = s.param_count();
                if s.trainable() {
                    let seg = (offset, n);
                    offset += n;
                    Some(seg)
                } else {
                    None
                }
            })
            .collect();
        ParamLayout { segments, total: offset }
    }

    /// `(offset, length)` of layer `layer`, or `None` for layers without
    /// trainable parameters.
    pub fn segment(&self, layer: usize) -> Option<(usize, usize)> {
        self.segments.get(layer).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn n_layers(&self) -> usize {
        self.segments.len()
    }
}

/// Flat concatenation of all trainable parameters of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParamVector { values: vec![0.0; layout.len()], layout }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.layout.segment(layer).map(|(o, n)| &self.values[o..o + n])
    }

    pub fn layer_mut(&mut self, layer: usize) -> Option<&mut [f64]> {
        self.layout.segment(layer).map(move |(o, n)| &mut self.values[o..o + n])
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// SHA-256 over the little-endian bytes of every value.
    pub fn digest(&self) -> [u8; 32] {
        digest_f64(&self.values)
    }

    /// Writes the checkpoint form: a little-endian `u64` count followed by
    /// that many little-endian `f32` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads values written by [`ParamVector::write_to`].
    pub fn read_values<R: Read>(mut r: R) -> Result<Vec<f64>> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Format {
            offset: 0,
            msg: "missing length prefix".into(),
        })?;
        let n = u64::from_le_bytes(len) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::Format {
                offset: 8 + bytes.len().min(n * 4),
                msg: format!("expected {} f32 values, found {} bytes", n, bytes.len()),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub(crate) fn digest_f64(values: &[f64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut d = [0u8; 32];
    d.copy_from_slice(&out);
    d
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `p <- p - lr * (g + 2 * weight_decay * p)`, elementwise.
pub fn sgd_step(params: &mut ParamVector, grads: &ParamVector, lr: f64, weight_decay: f64) -> Result<()> {
    check_len(params.len(), grads.len())?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param(format!("learning rate must be positive, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::param(format!("weight decay must be non-negative, got {weight_decay}")));
    }
    let decay = 2.0 * weight_decay;
    for (p, g) in params.values.iter_mut().zip(&grads.values) {
        *p -= lr * (g + decay * *p);
    }
    Ok(())
}
