use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdversaryState, AttackMode, AttackTarget, GeneratorNet, DEFAULT_GEN_HIDDEN, DEFAULT_NOISE_DIM};
use crate::data::{oracle_score, partition, train_oracle, Dataset, OracleClassifier, OracleConfig, PartitionPlan};
use crate::error::{Error, Result};
use crate::keys::{generate_delta_key, generate_key, ClassKey, ClassLabel, KeyRing, ParticipantId};
use crate::model::{KeyProtectedClassifier, ModelConfig, VanillaClassifier};
use crate::nn::Mat;
use crate::protocol::{Framework, FrameworkConfig, LocalModel, Participant, RunLog};
use crate::rng::{child, derive_seed};

const KEY_STREAM: u64 = 10;
const PARTITION_STREAM: u64 = 11;
const EVAL_STREAM: u64 = 3000;
/// Placeholder classes are numbered from here upwards, one per attacker.
pub const FAKE_CLASS_BASE: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub n_participants: usize,
    pub attackers: Vec<u32>,
    /// Class the attackers try to reconstruct.
    pub target_class: u32,
    pub model: ModelConfig,
    pub framework: FrameworkConfig,
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub gen_steps_per_turn: usize,
    pub gen_batch: usize,
    pub gen_lr: f64,
    /// Fakes per turn; defaults to local data size / local class count.
    pub m_samples: Option<usize>,
    pub n_eval_samples: usize,
    /// The reported score averages this many final epochs.
    pub score_window: usize,
    pub n_dump_samples: usize,
    pub oracle: OracleConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::ExactKey,
            n_participants: 2,
            attackers: vec![1],
            target_class: 0,
            model: ModelConfig::default(),
            framework: FrameworkConfig::default(),
            noise_dim: DEFAULT_NOISE_DIM,
            gen_hidden: DEFAULT_GEN_HIDDEN,
            gen_steps_per_turn: 20,
            gen_batch: 32,
            gen_lr: 0.05,
            m_samples: None,
            n_eval_samples: 200,
            score_window: 5,
            n_dump_samples: 4,
            oracle: OracleConfig::default(),
        }
    }
}

/// Generated samples of one attacker at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSamples {
    pub epoch: usize,
    pub attacker: ParticipantId,
    pub target: ClassLabel,
    pub samples: Mat,
    /// Oracle score of `n_eval_samples` fresh samples.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub regime: String,
    /// Headline score: the best score over attackers, each averaged over the
    /// last `score_window` epochs.
    pub oracle_score: f64,
    pub per_attacker: Vec<(ParticipantId, ClassLabel, f64)>,
    /// ⟨ψ_attack, ψ_target⟩ per keyed attacker.
    pub key_alignment: Vec<(ParticipantId, f64)>,
    pub oracle_accuracy: f64,
    pub final_mpa: f64,
    pub final_honest_mpa: f64,
    pub epochs: Vec<EpochSamples>,
    pub log: RunLog,
    pub published_keys: Vec<ClassKey>,
}

impl AttackReport {
    /// One file per dumped sample, `attack_<regime>_epoch<k>_sample<i>`, as a
    /// binary PGM when `image` gives `(rows, cols)` and as a CSV row otherwise.
    /// Values are clipped to [0, 1] here only.
    pub fn write_samples(&self, dir: &Path, image: Option<(usize, usize)>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let multi = self.per_attacker.len() > 1;
        for e in &self.epochs {
            for (i, x) in e.samples.rows().into_iter().enumerate() {
                let mut name = format!("attack_{}_epoch{}_sample{}", self.regime, e.epoch, i);
                if multi {
                    name = format!("attack_{}_p{}_epoch{}_sample{}", self.regime, e.attacker, e.epoch, i);
                }
                let clipped: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                match image {
                    Some((rows, cols)) => {
                        if rows * cols != clipped.len() {
                            return Err(Error::shape("image shape does not match sample width"));
                        }
                        let mut f = std::fs::File::create(dir.join(format!("{name}.pgm")))?;
                        write!(f, "P5\n{cols} {rows}\n255\n")?;
                        let bytes: Vec<u8> = clipped.iter().map(|v| (v * 255.0).round() as u8).collect();
                        f.write_all(&bytes)?;
                    }
                    None => {
                        let mut f = std::fs::File::create(dir.join(format!("{name}.csv")))?;
                        let cells: Vec<String> = clipped.iter().map(|v| v.to_string()).collect();
                        writeln!(f, "{},{}", e.target, cells.join(","))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which class each attacker goes after: the configured target, or, for an
/// attacker that owns it, the smallest class of the next participant.
fn attack_targets(
    cfg: &AttackConfig,
    owned: &BTreeMap<ParticipantId, BTreeSet<ClassLabel>>,
) -> Result<BTreeMap<ParticipantId, ClassLabel>> {
    let ids: Vec<ParticipantId> = owned.keys().copied().collect();
    let target = ClassLabel(cfg.target_class);
    let mut out = BTreeMap::new();
    for &a in &cfg.attackers {
        let a = ParticipantId(a);
        let pos = ids.iter().position(|&p| p == a).ok_or_else(|| Error::param(format!("attacker {a} is not a participant")))?;
        let t = if owned[&a].contains(&target) {
            let next = ids[(pos + 1) % ids.len()];
            *owned[&next].iter().next().ok_or_else(|| Error::setup("attack target has no classes"))?
        } else {
            target
        };
        if owned[&a].contains(&t) {
            return Err(Error::param(format!("attacker {a} would target its own class {t}")));
        }
        out.insert(a, t);
    }
    Ok(out)
}

/// Trains the oracle on `train`/`test`, then runs [`attack_experiment_with`].
pub fn attack_experiment(cfg: &AttackConfig, train: &Dataset, test: &Dataset) -> Result<AttackReport> {
    let oracle = train_oracle(train, test, &cfg.oracle)?;
    attack_experiment_with(cfg, train, test, &oracle)
}

/// Splits the classes of `train` into contiguous blocks, one per participant,
/// runs collaborative training with the configured attackers and scores their
/// generators with `oracle` after every epoch.
pub fn attack_experiment_with(
    cfg: &AttackConfig,
    train: &Dataset,
    test: &Dataset,
    oracle: &OracleClassifier,
) -> Result<AttackReport> {
    if cfg.n_participants == 0 {
        return Err(Error::param("need at least one participant"));
    }
    if cfg.attackers.is_empty() {
        return Err(Error::param("an attack experiment needs at least one attacker"));
    }
    let oracle_digest = oracle.digest();
    let seed = cfg.framework.seed;
    let classes: Vec<ClassLabel> = train.classes().into_iter().collect();
    let plan = PartitionPlan::contiguous(&classes, cfg.n_participants);
    let parts = partition(train, &plan, &mut child(seed, PARTITION_STREAM))?;
    let targets = attack_targets(cfg, &plan.assignments)?;

    let emb = cfg.model.embedding(train.dim());
    let model_seed = derive_seed(seed, 20);
    let mut all_classes = classes.clone();
    all_classes.extend(targets.keys().map(|a| ClassLabel(FAKE_CLASS_BASE + a.0)));
    let vanilla_base = match cfg.mode {
        AttackMode::Vanilla => Some(VanillaClassifier::new(&emb, all_classes, model_seed)?),
        _ => None,
    };
    let keyed_base = match cfg.mode {
        AttackMode::Vanilla => None,
        _ => Some(KeyProtectedClassifier::new(&emb, model_seed)?),
    };

    // Every participant draws its own keys from its own stream.
    let mut rings: BTreeMap<ParticipantId, Vec<ClassKey>> = BTreeMap::new();
    for (&p, cs) in &plan.assignments {
        let mut rng = child(derive_seed(seed, KEY_STREAM), p.0 as u64);
        let mut keys = cs.iter().map(|&c| generate_key(cfg.model.d_key, c, p, &mut rng)).collect::<Result<Vec<_>>>()?;
        if targets.contains_key(&p) {
            keys.push(generate_key(cfg.model.d_key, ClassLabel(FAKE_CLASS_BASE + p.0), p, &mut rng)?);
        }
        rings.insert(p, keys);
    }
    let owner_of = |c: ClassLabel| plan.assignments.iter().find(|(_, cs)| cs.contains(&c)).map(|(&p, _)| p);

    let mut participants = Vec::new();
    let mut key_alignment = Vec::new();
    for (&p, data) in &parts {
        let model = match (&keyed_base, &vanilla_base) {
            (Some(clf), _) => LocalModel::Keyed { clf: clf.clone(), keys: KeyRing::new(p, rings[&p].clone())? },
            (_, Some(clf)) => LocalModel::Vanilla(clf.clone()),
            _ => unreachable!(),
        };
        let Some(&target) = targets.get(&p) else {
            participants.push(Participant::honest(p, data.clone(), model));
            continue;
        };
        let mut rng = child(derive_seed(seed, KEY_STREAM + 1), p.0 as u64);
        let generator = GeneratorNet::new(cfg.noise_dim, cfg.gen_hidden, train.dim(), derive_seed(seed, 30 + p.0 as u64))?;
        let c_fake = ClassLabel(FAKE_CLASS_BASE + p.0);
        let mut adv = match cfg.mode {
            AttackMode::Vanilla => AdversaryState::vanilla(generator, target, c_fake)?,
            mode => {
                // The harness looks up the victim's key; the attacker only ever
                // receives the derived ψ_attack.
                let victim = owner_of(target).ok_or_else(|| Error::setup("target class has no owner"))?;
                let true_key = rings[&victim].iter().find(|k| k.class_label() == target).expect("owner holds key");
                let psi_attack = match mode {
                    AttackMode::ExactKey => true_key.rebind(target, p),
                    AttackMode::DeltaKey { delta } => generate_delta_key(true_key, delta, target, p, &mut rng)?,
                    AttackMode::RandomKey => generate_key(cfg.model.d_key, target, p, &mut rng)?,
                    AttackMode::Vanilla => unreachable!(),
                };
                key_alignment.push((p, psi_attack.dot(true_key.vec())));
                let psi_fake = rings[&p].iter().find(|k| k.class_label() == c_fake).expect("fake key").clone();
                AdversaryState::keyed(generator, mode, psi_attack, psi_fake)?
            }
        };
        let n_local = data.classes().len().max(1);
        adv.m_samples = cfg.m_samples.unwrap_or(data.len() / n_local);
        adv.gen_steps_per_turn = cfg.gen_steps_per_turn;
        adv.gen_batch = cfg.gen_batch;
        adv.gen_lr = cfg.gen_lr;
        participants.push(Participant::attacker(p, data.clone(), model, adv));
    }

    let mut fw = Framework::new(cfg.framework.clone(), participants, test.clone())?;
    let mut epochs = Vec::new();
    fw.run_with(|fw| {
        for p in fw.participants() {
            let Some(adv) = p.adversary() else { continue };
            let mut rng = child(derive_seed(seed, EVAL_STREAM + p.id().0 as u64), fw.epoch() as u64);
            let eval = adv.generator.generate(&adv.generator.sample_noise(cfg.n_eval_samples, &mut rng))?;
            let target = targets[&p.id()];
            let score = match (cfg.mode, adv.target()) {
                // A random key names no class; count a hit on any class the
                // attacker does not own.
                (AttackMode::RandomKey, AttackTarget::Key(_)) => {
                    let mut best: f64 = 0.0;
                    for c in &classes {
                        if !plan.assignments[&p.id()].contains(c) {
                            best = best.max(oracle_score(oracle, &eval, *c)?);
                        }
                    }
                    best
                }
                _ => oracle_score(oracle, &eval, target)?,
            };
            let dump = eval.slice(ndarray::s![..cfg.n_dump_samples.min(eval.nrows()), ..]).to_owned();
            epochs.push(EpochSamples { epoch: fw.epoch(), attacker: p.id(), target, samples: dump, score });
        }
        Ok(())
    })?;
    if oracle.digest() != oracle_digest {
        return Err(Error::contract("oracle changed during the attack"));
    }

    let first_counted = fw.epoch().saturating_sub(cfg.score_window.max(1));
    let per_attacker: Vec<(ParticipantId, ClassLabel, f64)> = targets
        .iter()
        .map(|(&a, &t)| {
            let window: Vec<f64> =
                epochs.iter().filter(|e| e.attacker == a && e.epoch > first_counted).map(|e| e.score).collect();
            (a, t, window.iter().sum::<f64>() / window.len().max(1) as f64)
        })
        .collect();
    let oracle_score = per_attacker.iter().map(|a| a.2).fold(0.0, f64::max);
    let log = fw.log().clone();
    Ok(AttackReport {
        regime: cfg.mode.name(),
        oracle_score,
        per_attacker,
        key_alignment,
        oracle_accuracy: oracle.test_accuracy(),
        final_mpa: log.final_mpa().unwrap_or(0.0),
        final_honest_mpa: log.final_honest_mpa().unwrap_or(0.0),
        epochs,
        log,
        published_keys: if cfg.framework.publish_keys { fw.published_keys() } else { Vec::new() },
    })
}
