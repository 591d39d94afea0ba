use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::keys::ClassLabel;
use crate::nn::Mat;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub data_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig { n_classes: 10, per_class: 100, data_dim: 32, spread: 0.2, seed: 0 }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

impl BlobsConfig {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::param("blobs need at least two classes"));
        }
        if self.per_class < 2 {
            return Err(Error::param("blobs need at least two samples per class for a train/test split"));
        }
        if self.data_dim == 0 {
            return Err(Error::param("data_dim must be positive"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::param("spread must be finite and non-negative"));
        }
        Ok(())
    }

    /// Class centers in the unit cube, pairwise at least `6 * spread` apart.
    pub fn centers(&self) -> Result<Mat> {
        self.validate()?;
        place_centers(self, &mut seeded(self.seed))
    }
}

fn place_centers(cfg: &BlobsConfig, rng: &mut impl Rng) -> Result<Mat> {
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let min_dist = 6.0 * cfg.spread;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let centers = Mat::from_shape_fn((cfg.n_classes, cfg.data_dim), |_| rng.sample(unit));
        let ok = (0..cfg.n_classes).all(|i| {
            (i + 1..cfg.n_classes).all(|j| {
                let d = &centers.row(i) - &centers.row(j);
                d.dot(&d).sqrt() >= min_dist
            })
        });
        if ok {
            return Ok(centers);
        }
    }
    Err(Error::param(format!(
        "could not place {} centers {min_dist} apart in the unit cube of dimension {}",
        cfg.n_classes, cfg.data_dim
    )))
}

/// Gaussian blobs around random centers; the first 80% of each class goes to
/// the training split.
pub fn synth_blobs(cfg: &BlobsConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let centers = place_centers(cfg, &mut rng)?;
    let n_train = (cfg.per_class * 4 / 5).max(1);
    let n_test = cfg.per_class - n_train;
    let mut train = Mat::zeros((cfg.n_classes * n_train, cfg.data_dim));
    let mut test = Mat::zeros((cfg.n_classes * n_test, cfg.data_dim));
    let mut train_labels = Vec::with_capacity(train.nrows());
    let mut test_labels = Vec::with_capacity(test.nrows());
    for c in 0..cfg.n_classes {
        for k in 0..cfg.per_class {
            let (dst, labels, r) = if k < n_train {
                (&mut train, &mut train_labels, c * n_train + k)
            } else {
                (&mut test, &mut test_labels, c * n_test + k - n_train)
            };
            for (j, v) in dst.row_mut(r).iter_mut().enumerate() {
                *v = centers[(c, j)] + cfg.spread * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(ClassLabel(c as u32));
        }
    }
    Ok((Dataset::new(train, train_labels, Split::Train)?, Dataset::new(test, test_labels, Split::Test)?))
}
