//! Mini-batch SGD loops shared by local training, centralized baselines and
//! the oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::keys::{ClassKey, ClassLabel, KeyRing};
use crate::model::{cross_entropy_loss, key_regression_loss, predict_batch, KeyProtectedClassifier, VanillaClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of λ‖θ‖², applied as weight decay.
    pub lambda: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { batch_size: 32, lr: 0.02, lambda: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Runs `step` on shuffled mini-batches covering `data` once and returns the
/// mean per-sample loss (0 for empty data).
pub fn for_each_batch(
    data: &Dataset,
    batch_size: usize,
    rng: &mut impl Rng,
    mut step: impl FnMut(&Dataset) -> Result<f64>,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let order = data.shuffled_indices(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        total += step(&data.subset(chunk))?;
    }
    Ok(total / data.len() as f64)
}

/// One epoch of key-regression training with the keys in `keys`.
pub fn train_keyed_epoch(
    clf: &mut KeyProtectedClassifier,
    keys: &KeyRing,
    data: &Dataset,
    cfg: &SgdConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    for_each_batch(data, cfg.batch_size, rng, |b| {
        let out = key_regression_loss(clf, b.samples(), b.labels(), keys, cfg.lambda)?;
        clf.net_mut().sgd_step(&out.grads, cfg.lr, cfg.lambda)?;
        Ok(out.loss)
    })
}

/// One epoch of cross-entropy training.
pub fn train_vanilla_epoch(clf: &mut VanillaClassifier, data: &Dataset, cfg: &SgdConfig, rng: &mut impl Rng) -> Result<f64> {
    for_each_batch(data, cfg.batch_size, rng, |b| {
        let out = cross_entropy_loss(clf, b.samples(), b.labels(), cfg.lambda)?;
        clf.net_mut().sgd_step(&out.grads, cfg.lr, cfg.lambda)?;
        Ok(out.loss)
    })
}

fn fraction_correct(pred: &[ClassLabel], truth: &[ClassLabel]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Top-1 accuracy of a key-protected classifier against a key list.
pub fn keyed_accuracy(clf: &KeyProtectedClassifier, keys: &[ClassKey], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(fraction_correct(&predict_batch(clf, data.samples(), keys)?, data.labels()))
}

/// Top-1 accuracy restricted to `allowed` classes (all classes when `None`).
pub fn vanilla_accuracy(clf: &VanillaClassifier, data: &Dataset, allowed: Option<&[ClassLabel]>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(fraction_correct(&clf.predict_batch(data.samples(), allowed)?, data.labels()))
}
