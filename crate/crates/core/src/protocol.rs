//! Simulated parameter server and round-robin collaborative training.
//!
//! Every turn a participant downloads a fraction θ_d of the shared parameters,
//! optionally runs its attack, trains locally and uploads a fraction θ_u of
//! the resulting parameter change. Turns are strictly sequential.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{synthesize, train_generator_keyed, train_generator_vanilla, AdversaryState, AttackTarget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::keys::{ClassKey, ClassLabel, KeyRing, ParticipantId};
use crate::model::{KeyProtectedClassifier, VanillaClassifier};
use crate::nn::{Network, ParamVector};
use crate::rng::{child, SimRng};
use crate::train::{keyed_accuracy, train_keyed_epoch, train_vanilla_epoch, vanilla_accuracy, SgdConfig};

const PS_STREAM: u64 = 1;
const PARTICIPANT_STREAM: u64 = 1000;
const ATTACK_STREAM: u64 = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Honest,
    Attacker,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Honest => "honest",
            Role::Attacker => "attacker",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameworkConfig {
    pub theta_d: f64,
    pub theta_u: f64,
    pub n_epochs: usize,
    pub local_epochs_per_turn: usize,
    pub schedule: Schedule,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub publish_keys: bool,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        FrameworkConfig {
            theta_d: 1.0,
            theta_u: 1.0,
            n_epochs: 20,
            local_epochs_per_turn: 1,
            schedule: Schedule::RoundRobin,
            sgd: SgdConfig::default(),
            seed: 0,
            publish_keys: true,
        }
    }
}

impl FrameworkConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("theta_d", self.theta_d), ("theta_u", self.theta_u)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::param(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        if self.local_epochs_per_turn == 0 {
            return Err(Error::param("local_epochs_per_turn must be positive"));
        }
        self.sgd.validate()
    }
}

/// Training stream of participant `id`; centralized baselines reuse stream 0.
pub fn participant_rng(seed: u64, id: ParticipantId) -> SimRng {
    child(seed, PARTICIPANT_STREAM + id.0 as u64)
}

/// The shared model a participant trains locally.
#[derive(Debug, Clone)]
pub enum LocalModel {
    Keyed { clf: KeyProtectedClassifier, keys: KeyRing },
    Vanilla(VanillaClassifier),
}

impl LocalModel {
    pub fn net(&self) -> &Network {
        match self {
            LocalModel::Keyed { clf, .. } => clf.net(),
            LocalModel::Vanilla(clf) => clf.net(),
        }
    }

    pub fn net_mut(&mut self) -> &mut Network {
        match self {
            LocalModel::Keyed { clf, .. } => clf.net_mut(),
            LocalModel::Vanilla(clf) => clf.net_mut(),
        }
    }

    pub fn params(&self) -> &ParamVector {
        self.net().params()
    }

    pub fn train_epoch(&mut self, data: &Dataset, sgd: &SgdConfig, rng: &mut impl Rng) -> Result<f64> {
        match self {
            LocalModel::Keyed { clf, keys } => train_keyed_epoch(clf, keys, data, sgd, rng),
            LocalModel::Vanilla(clf) => train_vanilla_epoch(clf, data, sgd, rng),
        }
    }

    /// Accuracy on `data` using only what this participant holds: its own
    /// keys, or the logits of the classes present in `data`.
    pub fn local_accuracy(&self, data: &Dataset) -> Result<f64> {
        match self {
            LocalModel::Keyed { clf, keys } => {
                let own: Vec<ClassKey> = keys.keys().cloned().collect();
                keyed_accuracy(clf, &own, data)
            }
            LocalModel::Vanilla(clf) => {
                let allowed: Vec<ClassLabel> = data.classes().into_iter().collect();
                vanilla_accuracy(clf, data, Some(&allowed))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TurnPhase {
    Idle,
    Downloaded,
    Trained,
}

pub struct Participant {
    id: ParticipantId,
    role: Role,
    data: Dataset,
    model: LocalModel,
    adversary: Option<AdversaryState>,
    rng: SimRng,
    attack_rng: SimRng,
    start: Option<Vec<f64>>,
    phase: TurnPhase,
}

impl Participant {
    pub fn honest(id: ParticipantId, data: Dataset, model: LocalModel) -> Self {
        Participant::build(id, Role::Honest, data, model, None)
    }

    pub fn attacker(id: ParticipantId, data: Dataset, model: LocalModel, adversary: AdversaryState) -> Self {
        Participant::build(id, Role::Attacker, data, model, Some(adversary))
    }

    fn build(id: ParticipantId, role: Role, data: Dataset, model: LocalModel, adversary: Option<AdversaryState>) -> Self {
        Participant {
            id,
            role,
            data,
            model,
            adversary,
            rng: participant_rng(0, id),
            attack_rng: child(0, ATTACK_STREAM + id.0 as u64),
            start: None,
            phase: TurnPhase::Idle,
        }
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = participant_rng(seed, self.id);
        self.attack_rng = child(seed, ATTACK_STREAM + self.id.0 as u64);
    }

    pub fn id(&self) -> ParticipantId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn model(&self) -> &LocalModel {
        &self.model
    }

    pub fn adversary(&self) -> Option<&AdversaryState> {
        self.adversary.as_ref()
    }

    /// The placeholder class of an attacker.
    pub fn fake_class(&self) -> Option<ClassLabel> {
        self.adversary.as_ref().map(|a| a.c_fake())
    }

    /// Keys this participant would publish for its real classes.
    pub fn real_keys(&self) -> Vec<ClassKey> {
        match &self.model {
            LocalModel::Keyed { keys, .. } => {
                keys.keys().filter(|k| Some(k.class_label()) != self.fake_class()).cloned().collect()
            }
            LocalModel::Vanilla(_) => Vec::new(),
        }
    }

    fn check_setup(&self) -> Result<()> {
        if self.data.is_empty() && self.role == Role::Honest {
            return Err(Error::setup(format!("participant {} has no local data", self.id)));
        }
        let mut expected: BTreeSet<ClassLabel> = self.data.classes();
        if let Some(c) = self.fake_class() {
            if expected.contains(&c) {
                return Err(Error::setup(format!("placeholder class {c} collides with real data")));
            }
            expected.insert(c);
        }
        match &self.model {
            LocalModel::Keyed { keys, .. } => {
                if keys.owner() != self.id {
                    return Err(Error::Access(format!("participant {} holds a key ring of {}", self.id, keys.owner())));
                }
                let held: BTreeSet<ClassLabel> = keys.labels().collect();
                if held != expected {
                    return Err(Error::setup(format!(
                        "participant {} keys {held:?} do not match its classes {expected:?}",
                        self.id
                    )));
                }
                if let Some(adv) = &self.adversary {
                    if !adv.mode.is_keyed() {
                        return Err(Error::setup("vanilla adversary attached to a keyed model"));
                    }
                }
            }
            LocalModel::Vanilla(clf) => {
                for c in &expected {
                    clf.class_index(*c).map_err(|_| Error::setup(format!("class {c} missing from the logit layer")))?;
                }
                if let Some(adv) = &self.adversary {
                    if adv.mode.is_keyed() {
                        return Err(Error::setup("keyed adversary attached to a vanilla model"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The shared parameters and a counter of accepted uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamServerState {
    params: ParamVector,
    version: u64,
}

impl ParamServerState {
    pub fn new(params: ParamVector) -> Self {
        ParamServerState { params, version: 0 }
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

fn fraction_count(theta: f64, len: usize) -> usize {
    ((theta * len as f64 - 1e-9).ceil().max(0.0) as usize).min(len)
}

/// Coordinates touched by a θ-fraction transfer; all of them for θ = 1
/// (without consuming randomness).
fn chosen_coords(theta: f64, len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = fraction_count(theta, len);
    if k == len {
        (0..len).collect()
    } else {
        sample(rng, len, k).into_vec()
    }
}

/// Overwrites ⌈θ_d·L⌉ random local coordinates with the server's values and
/// records the result as the turn's starting point.
pub fn download(ps: &ParamServerState, p: &mut Participant, theta_d: f64, rng: &mut impl Rng) -> Result<()> {
    let mut local = p.model.params().as_slice().to_vec();
    if local.len() != ps.params.len() {
        return Err(Error::setup(format!(
            "participant {} has {} parameters, server has {}",
            p.id,
            local.len(),
            ps.params.len()
        )));
    }
    let server = ps.params.as_slice();
    for i in chosen_coords(theta_d, local.len(), rng) {
        local[i] = server[i];
    }
    p.model.net_mut().set_params(&local)?;
    p.start = Some(local);
    p.phase = TurnPhase::Downloaded;
    Ok(())
}

/// Adds ⌈θ_u·L⌉ random coordinates of the turn's parameter change to the
/// server. A coordinate the server still holds at the participant's starting
/// value is set to the local value directly, which equals start + Δ without
/// rounding.
pub fn upload(ps: &mut ParamServerState, p: &mut Participant, theta_u: f64, rng: &mut impl Rng) -> Result<()> {
    if p.phase != TurnPhase::Trained {
        return Err(Error::contract(format!("participant {} uploads before training this turn", p.id)));
    }
    let start = p.start.take().expect("recorded at download");
    let local = p.model.params().as_slice();
    if local.len() != ps.params.len() {
        return Err(Error::setup("parameter length changed during the run"));
    }
    let server = ps.params.as_mut_slice();
    for i in chosen_coords(theta_u, local.len(), rng) {
        if server[i] == start[i] {
            server[i] = local[i];
        } else {
            server[i] += local[i] - start[i];
        }
    }
    ps.version += 1;
    p.phase = TurnPhase::Idle;
    if !ps.params.is_finite() {
        return Err(Error::DegenerateInput(format!("server parameters became non-finite after upload by {}", p.id)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub epoch: usize,
    pub participant_id: ParticipantId,
    pub role: Role,
    pub local_loss: f64,
    pub local_acc: f64,
    pub gen_loss: Option<f64>,
}

/// Local training for one turn, with the attack block first for attackers.
fn train_turn(p: &mut Participant, cfg: &FrameworkConfig, epoch: usize) -> Result<TurnMetrics> {
    if p.phase != TurnPhase::Downloaded {
        return Err(Error::contract(format!("participant {} trains without downloading first", p.id)));
    }
    let mut gen_loss = None;
    let mut data = p.data.clone();
    if let Some(adv) = p.adversary.as_mut() {
        let (steps, batch, lr) = (adv.gen_steps_per_turn, adv.gen_batch, adv.gen_lr);
        let loss = match (&p.model, adv.target().clone()) {
            (LocalModel::Keyed { clf, .. }, AttackTarget::Key(_)) => {
                train_generator_keyed(adv, clf, steps, batch, lr, &mut p.attack_rng)?
            }
            (LocalModel::Vanilla(clf), AttackTarget::Class(c)) => {
                train_generator_vanilla(adv, clf, c, steps, batch, lr, &mut p.attack_rng)?
            }
            _ => return Err(Error::setup("adversary target does not match the model kind")),
        };
        gen_loss = Some(loss);
        let fakes = synthesize(adv, adv.m_samples, &mut p.attack_rng)?;
        data = data.concat(&fakes)?;
    }
    let mut local_loss = 0.0;
    for _ in 0..cfg.local_epochs_per_turn {
        local_loss = p.model.train_epoch(&data, &cfg.sgd, &mut p.rng)?;
    }
    let local_acc = p.model.local_accuracy(&p.data)?;
    p.phase = TurnPhase::Trained;
    Ok(TurnMetrics { epoch, participant_id: p.id, role: p.role, local_loss, local_acc, gen_loss })
}

/// Download, (attack,) train, upload.
pub fn run_turn(
    ps: &mut ParamServerState,
    p: &mut Participant,
    cfg: &FrameworkConfig,
    epoch: usize,
    rng: &mut impl Rng,
) -> Result<TurnMetrics> {
    download(ps, p, cfg.theta_d, rng)?;
    let m = train_turn(p, cfg, epoch)?;
    upload(ps, p, cfg.theta_u, rng)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean test accuracy over all participants' local models.
    pub mpa: f64,
    /// Same, over honest participants only.
    pub honest_mpa: f64,
    pub participant_acc: Vec<(ParticipantId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub turns: Vec<TurnMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

impl RunLog {
    pub fn final_mpa(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mpa)
    }

    pub fn final_honest_mpa(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.honest_mpa)
    }

    /// `epoch,participant_id,role,local_loss,local_acc,mpa,gen_loss`, one row
    /// per turn; `gen_loss` is empty for honest turns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,participant_id,role,local_loss,local_acc,mpa,gen_loss")?;
        for t in &self.turns {
            let mpa = self.epochs.iter().find(|e| e.epoch == t.epoch).map(|e| e.mpa.to_string()).unwrap_or_default();
            let gen = t.gen_loss.map(|g| g.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{},{}", t.epoch, t.participant_id, t.role.as_str(), t.local_loss, t.local_acc, mpa, gen)?;
        }
        Ok(())
    }
}

/// Parameter server plus participants, driven epoch by epoch.
pub struct Framework {
    cfg: FrameworkConfig,
    ps: ParamServerState,
    participants: Vec<Participant>,
    test: Dataset,
    rng: SimRng,
    epoch: usize,
    log: RunLog,
}

impl Framework {
    /// Checks that all participants share one architecture and one frozen
    /// layer, then seeds the server with the first participant's parameters.
    pub fn new(cfg: FrameworkConfig, mut participants: Vec<Participant>, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        let first = participants.first().ok_or_else(|| Error::setup("no participants"))?;
        let specs = first.model.net().specs().to_vec();
        let frozen = first.model.net().frozen_digest();
        let init = first.model.params().clone();
        let mut ids = BTreeSet::new();
        for p in &participants {
            if !ids.insert(p.id) {
                return Err(Error::setup(format!("participant id {} used twice", p.id)));
            }
            if p.model.net().specs() != specs.as_slice() {
                return Err(Error::setup(format!("participant {} uses a different architecture", p.id)));
            }
            if p.model.net().frozen_digest() != frozen {
                return Err(Error::setup(format!("participant {} has a different fixed layer", p.id)));
            }
            if std::mem::discriminant(&p.model) != std::mem::discriminant(&first.model) {
                return Err(Error::setup("participants mix keyed and vanilla models"));
            }
            p.check_setup()?;
        }
        for p in participants.iter_mut() {
            p.reseed(cfg.seed);
        }
        let rng = child(cfg.seed, PS_STREAM);
        Ok(Framework { ps: ParamServerState::new(init), cfg, participants, test, rng, epoch: 0, log: RunLog::default() })
    }

    pub fn config(&self) -> &FrameworkConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ParamServerState {
        &self.ps
    }

    pub fn participants(&self) -> &[Participant] {
        &self.participants
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Real-class keys of every participant, as published after training.
    pub fn published_keys(&self) -> Vec<ClassKey> {
        self.participants.iter().flat_map(|p| p.real_keys()).collect()
    }

    /// Test accuracy of each participant's local model, predicting among all
    /// real classes.
    pub fn evaluate(&self) -> Result<Vec<(ParticipantId, f64)>> {
        let keys = self.published_keys();
        let real: Vec<ClassLabel> = self.test.classes().into_iter().collect();
        self.participants
            .par_iter()
            .map(|p| {
                let acc = match &p.model {
                    LocalModel::Keyed { clf, .. } => keyed_accuracy(clf, &keys, &self.test)?,
                    LocalModel::Vanilla(clf) => vanilla_accuracy(clf, &self.test, Some(&real))?,
                };
                Ok((p.id, acc))
            })
            .collect()
    }

    /// One round-robin pass over all participants followed by evaluation.
    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        self.epoch += 1;
        for p in self.participants.iter_mut() {
            let m = run_turn(&mut self.ps, p, &self.cfg, self.epoch, &mut self.rng)?;
            self.log.turns.push(m);
        }
        let accs = self.evaluate()?;
        let mean = |f: &dyn Fn(&Participant) -> bool| {
            let v: Vec<f64> = self.participants.iter().zip(&accs).filter(|(p, _)| f(p)).map(|(_, a)| a.1).collect();
            if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
        };
        let mpa = mean(&|_| true);
        let honest_mpa = mean(&|p| p.role == Role::Honest);
        self.log.epochs.push(EpochMetrics { epoch: self.epoch, mpa, honest_mpa, participant_acc: accs });
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `after_epoch` after each.
    pub fn run_with(&mut self, mut after_epoch: impl FnMut(&Framework) -> Result<()>) -> Result<RunLog> {
        while self.epoch < self.cfg.n_epochs {
            self.run_epoch()?;
            after_epoch(self)?;
        }
        Ok(self.log.clone())
    }

    pub fn run(&mut self) -> Result<RunLog> {
        self.run_with(|_| Ok(()))
    }

    /// Server parameters in the `.params` checkpoint format.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.ps.params.write_to(std::io::BufWriter::new(f))?;
        Ok(())
    }
}

/// Sets up a framework and runs it to completion.
pub fn run_training(participants: Vec<Participant>, test: Dataset, cfg: &FrameworkConfig) -> Result<(RunLog, Framework)> {
    let mut fw = Framework::new(cfg.clone(), participants, test)?;
    let log = fw.run()?;
    Ok((log, fw))
}

/// Trains `model` on `data` alone for `n_epochs × local_epochs_per_turn`
/// epochs on participant 0's stream, the single-participant reference.
pub fn train_centralized(model: &mut LocalModel, data: &Dataset, cfg: &FrameworkConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = participant_rng(cfg.seed, ParticipantId(0));
    let mut losses = Vec::new();
    for _ in 0..cfg.n_epochs * cfg.local_epochs_per_turn {
        losses.push(model.train_epoch(data, &cfg.sgd, &mut rng)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobsConfig, Split};
    use crate::keys::generate_key;
    use crate::model::EmbeddingConfig;
    use crate::rng::seeded;

    fn tiny() -> (Participant, Dataset) {
        let (train, test) = synth_blobs(&BlobsConfig { n_classes: 2, per_class: 10, data_dim: 4, ..BlobsConfig::default() }).unwrap();
        let cfg = EmbeddingConfig { hidden: vec![4], ..EmbeddingConfig::new(4, 4) };
        let clf = KeyProtectedClassifier::new(&cfg, 0).unwrap();
        let mut rng = seeded(3);
        let keys = KeyRing::new(
            ParticipantId(0),
            (0..2).map(|c| generate_key(4, ClassLabel(c), ParticipantId(0), &mut rng).unwrap()),
        )
        .unwrap();
        (Participant::honest(ParticipantId(0), train, LocalModel::Keyed { clf, keys }), test)
    }

    #[test]
    fn fraction_counts() {
        assert_eq!(fraction_count(0.5, 10), 5);
        assert_eq!(fraction_count(0.0, 10), 0);
        assert_eq!(fraction_count(1.0, 10), 10);
        assert_eq!(fraction_count(0.31, 10), 4);
        assert_eq!(fraction_count(0.3, 10), 3);
    }

    #[test]
    fn download_half_replaces_exactly_half() {
        let (mut p, _) = tiny();
        let n = p.model.params().len();
        let ps = ParamServerState::new(ParamVector::from_values(p.model.params().layout().clone(), vec![1e6; n]).unwrap());
        download(&ps, &mut p, 0.5, &mut seeded(0)).unwrap();
        let replaced = p.model.params().as_slice().iter().filter(|v| **v == 1e6).count();
        assert_eq!(replaced, n.div_ceil(2));
    }

    #[test]
    fn upload_before_training_is_a_contract_violation() {
        let (mut p, _) = tiny();
        let mut ps = ParamServerState::new(p.model.params().clone());
        assert!(matches!(upload(&mut ps, &mut p, 1.0, &mut seeded(0)), Err(Error::Contract(_))));
        download(&ps, &mut p, 1.0, &mut seeded(0)).unwrap();
        assert!(matches!(upload(&mut ps, &mut p, 1.0, &mut seeded(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn honest_participant_without_data_is_rejected() {
        let (p, test) = tiny();
        let empty = Participant::honest(ParticipantId(0), Dataset::empty(4, Split::Train), p.model.clone());
        assert!(matches!(Framework::new(FrameworkConfig::default(), vec![empty], test), Err(Error::Setup(_))));
    }

    #[test]
    fn csv_header_and_rows() {
        let (p, test) = tiny();
        let cfg = FrameworkConfig { n_epochs: 2, ..FrameworkConfig::default() };
        let (log, _) = run_training(vec![p], test, &cfg).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,participant_id,role,local_loss,local_acc,mpa,gen_loss");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,0,honest,"));
        assert!(lines[1].ends_with(','));
    }
}
