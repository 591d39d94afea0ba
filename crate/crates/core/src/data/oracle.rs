use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::keys::ClassLabel;
use crate::model::{EmbeddingConfig, VanillaClassifier};
use crate::nn::Mat;
use crate::rng::seeded;
use crate::train::{train_vanilla_epoch, vanilla_accuracy, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Test accuracy required before the oracle may score anything.
    pub min_accuracy: f64,
    /// A sample counts as recognizable only within `gate_slack` times the
    /// `gate_quantile` radius of its predicted class around that class's
    /// mean. `None` disables the check.
    pub gate_slack: Option<f64>,
    pub gate_quantile: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            hidden: vec![64],
            d_emb: 64,
            epochs: 20,
            sgd: SgdConfig { batch_size: 32, lr: 0.01, lambda: 1e-5 },
            seed: 7,
            min_accuracy: 0.95,
            gate_slack: Some(1.5),
            gate_quantile: 0.99,
        }
    }
}

#[derive(Debug, Clone)]
struct ClassRegion {
    mean: Vec<f64>,
    radius: f64,
}

/// Centrally trained classifier that judges reconstructed samples.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    clf: VanillaClassifier,
    regions: BTreeMap<ClassLabel, ClassRegion>,
    gate_slack: Option<f64>,
    test_accuracy: f64,
}

/// Trains the oracle on the full training set and checks it on `test`.
pub fn train_oracle(train: &Dataset, test: &Dataset, cfg: &OracleConfig) -> Result<OracleClassifier> {
    cfg.sgd.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::setup("oracle needs non-empty train and test data"));
    }
    if !(0.0..=1.0).contains(&cfg.gate_quantile) {
        return Err(Error::param("gate_quantile must lie in [0, 1]"));
    }
    let classes: Vec<ClassLabel> = train.classes().into_iter().collect();
    let emb = EmbeddingConfig { hidden: cfg.hidden.clone(), d_emb: cfg.d_emb, ..EmbeddingConfig::new(train.dim(), cfg.d_emb) };
    let mut clf = VanillaClassifier::new(&emb, classes.clone(), cfg.seed)?;
    let mut rng = seeded(cfg.seed);
    for _ in 0..cfg.epochs {
        train_vanilla_epoch(&mut clf, train, &cfg.sgd, &mut rng)?;
    }
    let test_accuracy = vanilla_accuracy(&clf, test, None)?;
    if test_accuracy < cfg.min_accuracy {
        return Err(Error::setup(format!(
            "oracle test accuracy {test_accuracy:.4} is below the required {:.2}",
            cfg.min_accuracy
        )));
    }
    let regions = classes.iter().map(|&c| (c, class_region(train, c, cfg.gate_quantile))).collect();
    Ok(OracleClassifier { clf, regions, gate_slack: cfg.gate_slack, test_accuracy })
}

fn class_region(data: &Dataset, c: ClassLabel, quantile: f64) -> ClassRegion {
    let idx = data.indices_of(c);
    let rows = data.samples().select(ndarray::Axis(0), &idx);
    let mean = rows.mean_axis(ndarray::Axis(0)).expect("class has samples").to_vec();
    let mut dists: Vec<f64> = rows.rows().into_iter().map(|r| distance(r.as_slice().expect("contiguous"), &mean)).collect();
    dists.sort_by(f64::total_cmp);
    let k = ((dists.len() - 1) as f64 * quantile).round() as usize;
    ClassRegion { mean, radius: dists[k] }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl OracleClassifier {
    pub fn test_accuracy(&self) -> f64 {
        self.test_accuracy
    }

    pub fn classifier(&self) -> &VanillaClassifier {
        &self.clf
    }

    pub fn digest(&self) -> [u8; 32] {
        self.clf.net().param_digest()
    }

    /// Predicted class per row, or `None` for samples outside the predicted
    /// class's region.
    pub fn classify(&self, samples: &Mat) -> Result<Vec<Option<ClassLabel>>> {
        let pred = self.clf.predict_batch(samples, None)?;
        Ok(pred
            .into_iter()
            .zip(samples.rows())
            .map(|(c, x)| match self.gate_slack {
                Some(slack) => {
                    let region = &self.regions[&c];
                    let d = distance(x.as_slice().expect("contiguous"), &region.mean);
                    (d <= slack * region.radius).then_some(c)
                }
                None => Some(c),
            })
            .collect())
    }
}

/// Fraction of `samples` the oracle recognizes as `target`. Empty input
/// scores 0.
pub fn oracle_score(oracle: &OracleClassifier, samples: &Mat, target: ClassLabel) -> Result<f64> {
    if samples.nrows() == 0 {
        warn!("oracle_score called with no samples; scoring 0");
        return Ok(0.0);
    }
    if !oracle.regions.contains_key(&target) {
        return Err(Error::param(format!("oracle does not know class {target}")));
    }
    let hits = oracle.classify(samples)?.into_iter().filter(|c| *c == Some(target)).count();
    Ok(hits as f64 / samples.nrows() as f64)
}
