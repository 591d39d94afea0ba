//! Experiment drivers beyond the attack: collaborative training sanity runs,
//! key statistics, the generalized-softmax Monte-Carlo check, shared-class
//! geometry and the regression vs cross-entropy comparison.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{attack_experiment_with, AttackConfig, AttackMode};
use crate::data::{load_mnist, partition, synth_blobs, BlobsConfig, Dataset, OracleClassifier, PartitionPlan, Split};
use crate::error::{Error, Result};
use crate::keys::{
    dot, generate_key, generate_orthonormal_keys, key_collision_stats, ClassKey, ClassLabel, KeyDistribution, KeyRing,
    KeyStatsReport, ParticipantId,
};
use crate::model::{softmax_mc_oracle, Activation, KeyProtectedClassifier, McEstimate, ModelConfig, VanillaClassifier};
use crate::protocol::{train_centralized, Framework, FrameworkConfig, LocalModel, Participant, RunLog};
use crate::rng::{child, derive_seed, seeded, SimRng};
use crate::train::{keyed_accuracy, train_keyed_epoch, train_vanilla_epoch, vanilla_accuracy, SgdConfig};

const KEY_STREAM: u64 = 10;
const PARTITION_STREAM: u64 = 11;

/// Where an experiment's train/test data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs(BlobsConfig),
    Mnist { dir: PathBuf, train_per_class: Option<usize>, test_per_class: Option<usize> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs(BlobsConfig::default())
    }
}

impl DataSource {
    pub fn mnist(dir: impl Into<PathBuf>) -> Self {
        DataSource::Mnist { dir: dir.into(), train_per_class: Some(500), test_per_class: Some(200) }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Blobs(cfg) => synth_blobs(cfg),
            DataSource::Mnist { dir, train_per_class, test_per_class } => Ok((
                load_mnist(dir, Split::Train, *train_per_class)?,
                load_mnist(dir, Split::Test, *test_per_class)?,
            )),
        }
    }

    /// `(rows, cols)` for image data.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            DataSource::Blobs(_) => None,
            DataSource::Mnist { .. } => Some((28, 28)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollabConfig {
    pub n_participants: usize,
    pub model: ModelConfig,
    pub framework: FrameworkConfig,
    /// MPA level whose first crossing is reported.
    pub target_mpa: f64,
    /// Also train one model on the pooled data for the same number of epochs.
    pub centralized: bool,
}

impl Default for CollabConfig {
    fn default() -> Self {
        CollabConfig {
            n_participants: 2,
            model: ModelConfig::default(),
            framework: FrameworkConfig { n_epochs: 50, ..FrameworkConfig::default() },
            target_mpa: 0.9,
            centralized: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollabReport {
    pub log: RunLog,
    pub final_mpa: f64,
    /// First round (1-based) whose MPA reached `target_mpa`.
    pub rounds_to_target: Option<usize>,
    pub centralized_accuracy: Option<f64>,
    pub published_keys: Vec<ClassKey>,
}

/// Honest participants with contiguous class blocks, each drawing its own
/// keys; optionally compared against centralized training with one key per
/// class on the pooled data.
pub fn collab_experiment(cfg: &CollabConfig, train: &Dataset, test: &Dataset) -> Result<CollabReport> {
    if cfg.n_participants == 0 {
        return Err(Error::param("need at least one participant"));
    }
    let seed = cfg.framework.seed;
    let classes: Vec<ClassLabel> = train.classes().into_iter().collect();
    let plan = PartitionPlan::contiguous(&classes, cfg.n_participants);
    let parts = partition(train, &plan, &mut child(seed, PARTITION_STREAM))?;
    let emb = cfg.model.embedding(train.dim());
    let base = KeyProtectedClassifier::new(&emb, derive_seed(seed, 20))?;

    let mut participants = Vec::new();
    for (&p, data) in &parts {
        let mut rng = child(derive_seed(seed, KEY_STREAM), p.0 as u64);
        let keys = plan.assignments[&p]
            .iter()
            .map(|&c| generate_key(cfg.model.d_key, c, p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let model = LocalModel::Keyed { clf: base.clone(), keys: KeyRing::new(p, keys)? };
        participants.push(Participant::honest(p, data.clone(), model));
    }
    let mut fw = Framework::new(cfg.framework.clone(), participants, test.clone())?;
    let log = fw.run()?;
    let rounds_to_target = log.epochs.iter().find(|e| e.mpa >= cfg.target_mpa).map(|e| e.epoch);

    let centralized_accuracy = if cfg.centralized {
        let owner = ParticipantId(0);
        let mut rng = child(derive_seed(seed, KEY_STREAM), u64::MAX);
        let keys =
            classes.iter().map(|&c| generate_key(cfg.model.d_key, c, owner, &mut rng)).collect::<Result<Vec<_>>>()?;
        let mut model = LocalModel::Keyed { clf: base, keys: KeyRing::new(owner, keys.clone())? };
        train_centralized(&mut model, train, &cfg.framework)?;
        let LocalModel::Keyed { clf, .. } = &model else { unreachable!() };
        Some(keyed_accuracy(clf, &keys, test)?)
    } else {
        None
    };

    Ok(CollabReport {
        final_mpa: log.final_mpa().unwrap_or(0.0),
        rounds_to_target,
        centralized_accuracy,
        published_keys: if cfg.framework.publish_keys { fw.published_keys() } else { Vec::new() },
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyStatsConfig {
    pub d_keys: Vec<usize>,
    pub n_vectors: usize,
    pub n_repeats: usize,
    pub distributions: Vec<KeyDistribution>,
    pub seed: u64,
}

impl Default for KeyStatsConfig {
    fn default() -> Self {
        KeyStatsConfig {
            d_keys: (1..=14).map(|e| 1usize << e).collect(),
            n_vectors: 100,
            n_repeats: 50,
            distributions: vec![KeyDistribution::Gaussian, KeyDistribution::Uniform],
            seed: 0,
        }
    }
}

/// [`key_collision_stats`] over a ladder of dimensions, one stream per
/// (distribution, dimension) pair.
pub fn key_stats_ladder(cfg: &KeyStatsConfig) -> Result<Vec<KeyStatsReport>> {
    let mut out = Vec::new();
    for (i, &dist) in cfg.distributions.iter().enumerate() {
        for &d in &cfg.d_keys {
            let mut rng = child(derive_seed(cfg.seed, i as u64), d as u64);
            out.push(key_collision_stats(d, cfg.n_vectors, cfg.n_repeats, dist, &mut rng)?);
        }
    }
    Ok(out)
}

/// True when, per distribution, `max_of_max_dot` strictly decreases as
/// `d_key` grows.
pub fn strictly_decreasing(reports: &[KeyStatsReport]) -> bool {
    let mut by_dist: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in reports {
        by_dist.entry(format!("{:?}", r.distribution)).or_default().push((r.d_key, r.max_of_max_dot));
    }
    by_dist.values_mut().all(|v| {
        v.sort_by_key(|&(d, _)| d);
        v.windows(2).all(|w| w[1].1 < w[0].1)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftmaxOracleConfig {
    pub d_keys: Vec<usize>,
    pub n_samples: usize,
    pub phi_norm: f64,
    pub seed: u64,
}

impl Default for SoftmaxOracleConfig {
    fn default() -> Self {
        SoftmaxOracleConfig { d_keys: vec![2, 128, 1024], n_samples: 100_000, phi_norm: 1.0, seed: 0 }
    }
}

/// Monte-Carlo estimate for a random φ of norm `phi_norm` in each dimension.
pub fn softmax_oracle_experiment(cfg: &SoftmaxOracleConfig) -> Result<Vec<(usize, McEstimate)>> {
    if !(cfg.phi_norm >= 0.0 && cfg.phi_norm.is_finite()) {
        return Err(Error::param("phi_norm must be finite and non-negative"));
    }
    cfg.d_keys
        .iter()
        .map(|&d| {
            let mut rng = child(cfg.seed, d as u64);
            let dir = generate_key(d, ClassLabel(0), ParticipantId(0), &mut rng)?;
            let phi: Vec<f64> = dir.vec().iter().map(|v| v * cfg.phi_norm).collect();
            Ok((d, softmax_mc_oracle(&phi, cfg.n_samples, &mut rng)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharedClassConfig {
    pub d_key: usize,
    pub n_trials: usize,
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the tangential gradient norm falls below this.
    pub tol: f64,
    pub n_fresh_keys: usize,
    pub seed: u64,
}

impl Default for SharedClassConfig {
    fn default() -> Self {
        SharedClassConfig { d_key: 1024, n_trials: 100, step: 0.1, max_iters: 10_000, tol: 1e-10, n_fresh_keys: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedClassTrial {
    pub dot_i: f64,
    pub dot_j: f64,
    pub keys_dot: f64,
    pub fresh_max_abs_dot: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedClassReport {
    pub d_key: usize,
    pub mean_dot_i: f64,
    pub mean_dot_j: f64,
    pub mean_fresh_max_abs_dot: f64,
    /// Largest |⟨φ, ψ⟩| over every fresh key of every trial.
    pub fresh_max_abs_dot: f64,
    pub trials: Vec<SharedClassTrial>,
}

/// Gradient ascent of ⟨φ, ψ_i⟩ + ⟨φ, ψ_j⟩ over the unit sphere starting at
/// `phi`: the gradient is projected onto the tangent space and φ is
/// renormalized after every step. Returns the number of steps taken.
pub fn converge_shared(phi: &mut [f64], psi_i: &[f64], psi_j: &[f64], step: f64, tol: f64, max_iters: usize) -> usize {
    let g: Vec<f64> = psi_i.iter().zip(psi_j).map(|(a, b)| a + b).collect();
    let mut tangent = vec![0.0; phi.len()];
    for it in 0..max_iters {
        let radial = dot(&g, phi);
        for ((t, gi), p) in tangent.iter_mut().zip(&g).zip(phi.iter()) {
            *t = gi - radial * p;
        }
        if dot(&tangent, &tangent).sqrt() < tol {
            return it;
        }
        for (p, t) in phi.iter_mut().zip(&tangent) {
            *p += step * t;
        }
        let n = dot(phi, phi).sqrt();
        phi.iter_mut().for_each(|p| *p /= n);
    }
    max_iters
}

/// Two owners of one class hold independent keys ψ_i, ψ_j; an embedding φ
/// trained on both converges towards their bisector. Each trial also probes
/// the converged φ against fresh random keys.
pub fn shared_class_sim(cfg: &SharedClassConfig) -> Result<SharedClassReport> {
    if cfg.d_key < 2 {
        return Err(Error::param("d_key must be >= 2"));
    }
    if cfg.n_trials == 0 {
        return Err(Error::param("n_trials must be positive"));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::param("step must be positive"));
    }
    let trials: Vec<SharedClassTrial> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = child(cfg.seed, t as u64);
            let draw = |rng: &mut SimRng| generate_key(cfg.d_key, ClassLabel(0), ParticipantId(0), rng);
            let psi_i = draw(&mut rng)?;
            let psi_j = draw(&mut rng)?;
            let mut phi = draw(&mut rng)?.vec().to_vec();
            let iters = converge_shared(&mut phi, psi_i.vec(), psi_j.vec(), cfg.step, cfg.tol, cfg.max_iters);
            let mut fresh: f64 = 0.0;
            for _ in 0..cfg.n_fresh_keys {
                fresh = fresh.max(draw(&mut rng)?.dot(&phi).abs());
            }
            Ok(SharedClassTrial {
                dot_i: psi_i.dot(&phi),
                dot_j: psi_j.dot(&phi),
                keys_dot: psi_i.dot(psi_j.vec()),
                fresh_max_abs_dot: fresh,
                iters,
            })
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&SharedClassTrial) -> f64| trials.iter().map(f).sum::<f64>() / trials.len() as f64;
    Ok(SharedClassReport {
        d_key: cfg.d_key,
        mean_dot_i: mean(|t| t.dot_i),
        mean_dot_j: mean(|t| t.dot_j),
        mean_fresh_max_abs_dot: mean(|t| t.fresh_max_abs_dot),
        fresh_max_abs_dot: trials.iter().map(|t| t.fresh_max_abs_dot).fold(0.0, f64::max),
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCompareConfig {
    pub hidden: Vec<usize>,
    /// Embedding width; also the key dimension.
    pub d_emb: usize,
    pub epochs: usize,
    pub key_sgd: SgdConfig,
    pub ce_sgd: SgdConfig,
    pub seed: u64,
}

impl Default for LossCompareConfig {
    fn default() -> Self {
        LossCompareConfig {
            hidden: vec![128],
            d_emb: 64,
            epochs: 20,
            key_sgd: SgdConfig { batch_size: 32, lr: 0.02, lambda: 1e-4 },
            ce_sgd: SgdConfig { batch_size: 32, lr: 0.005, lambda: 1e-4 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCompareReport {
    pub key_accuracy: f64,
    pub ce_accuracy: f64,
    /// Accuracy after every epoch, `(key, ce)`.
    pub curve: Vec<(f64, f64)>,
}

impl LossCompareReport {
    pub fn gap(&self) -> f64 {
        (self.key_accuracy - self.ce_accuracy).abs()
    }
}

/// Trains the same tanh-headed body twice on pooled data: once against fixed
/// orthonormal keys with the regression loss, once with trainable logits and
/// cross-entropy. Both see identical batches in identical order.
pub fn loss_compare(cfg: &LossCompareConfig, train: &Dataset, test: &Dataset) -> Result<LossCompareReport> {
    let classes: Vec<ClassLabel> = train.classes().into_iter().collect();
    let model = ModelConfig {
        hidden: cfg.hidden.clone(),
        d_emb: cfg.d_emb,
        d_key: cfg.d_emb,
        fixed_layer: false,
        embedding_activation: Some(Activation::Tanh),
    };
    let emb = model.embedding(train.dim());
    let model_seed = derive_seed(cfg.seed, 20);
    let mut keyed = KeyProtectedClassifier::new(&emb, model_seed)?;
    let mut vanilla = VanillaClassifier::new(&emb, classes.clone(), model_seed)?;
    let owner = ParticipantId(0);
    let keys = generate_orthonormal_keys(cfg.d_emb, &classes, owner, &mut child(cfg.seed, KEY_STREAM))?;
    let ring = KeyRing::new(owner, keys.clone())?;

    let mut curve = Vec::new();
    for e in 0..cfg.epochs {
        let shuffle = derive_seed(cfg.seed, 100 + e as u64);
        train_keyed_epoch(&mut keyed, &ring, train, &cfg.key_sgd, &mut seeded(shuffle))?;
        train_vanilla_epoch(&mut vanilla, train, &cfg.ce_sgd, &mut seeded(shuffle))?;
        curve.push((keyed_accuracy(&keyed, &keys, test)?, vanilla_accuracy(&vanilla, test, None)?));
    }
    let (key_accuracy, ce_accuracy) = curve.last().copied().unwrap_or((0.0, 0.0));
    Ok(LossCompareReport { key_accuracy, ce_accuracy, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSweepPoint {
    pub delta: f64,
    /// Mean headline oracle score over the seeds.
    pub score: f64,
    pub per_seed: Vec<f64>,
}

/// Runs the δ-key attack for every `delta`, each over the same `seeds`, and
/// averages the headline oracle scores.
pub fn delta_sweep(
    base: &AttackConfig,
    deltas: &[f64],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    oracle: &OracleClassifier,
) -> Result<Vec<DeltaSweepPoint>> {
    if seeds.is_empty() {
        return Err(Error::param("delta sweep needs at least one seed"));
    }
    deltas
        .iter()
        .map(|&delta| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let mut cfg = base.clone();
                    cfg.mode = AttackMode::DeltaKey { delta };
                    cfg.framework.seed = seed;
                    Ok(attack_experiment_with(&cfg, train, test, oracle)?.oracle_score)
                })
                .collect::<Result<Vec<f64>>>()?;
            let score = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            Ok(DeltaSweepPoint { delta, score, per_seed })
        })
        .collect()
}

/// δ where the sweep first falls below `level`, linearly interpolated between
/// neighbouring points; `None` if it never does.
pub fn crossover(points: &[DeltaSweepPoint], level: f64) -> Option<f64> {
    let first = points.first()?;
    if first.score < level {
        return Some(first.delta);
    }
    points.windows(2).find(|w| w[1].score < level).map(|w| {
        let (a, b) = (&w[0], &w[1]);
        a.delta + (a.score - level) / (a.score - b.score) * (b.delta - a.delta)
    })
}
