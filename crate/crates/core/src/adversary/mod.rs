//! GAN-style reconstruction attacks run by a participant against its own copy
//! of the shared model.
//!
//! Each turn the attacker trains a generator against the (frozen) local model,
//! draws M samples, labels them with its placeholder class `c_fake` and mixes
//! them into its local data. Against a key-protected model the generator
//! chases ψ_attack; against a vanilla model it chases the logit of `c_attack`.

mod experiment;

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::keys::{ClassKey, ClassLabel};
use crate::model::{softmax_in_place, KeyProtectedClassifier, VanillaClassifier};
use crate::nn::{init_net, LayerSpec, Mat, Network, ParamVector, DEFAULT_LEAKY_SLOPE};

pub use experiment::{attack_experiment, attack_experiment_with, AttackConfig, AttackReport, EpochSamples, FAKE_CLASS_BASE};

pub const DEFAULT_NOISE_DIM: usize = 16;
pub const DEFAULT_GEN_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum AttackMode {
    /// ψ_attack is the victim's key, handed over by the experiment harness.
    ExactKey,
    /// ψ_attack lies at Euclidean distance `delta` from the victim's key.
    DeltaKey { delta: f64 },
    /// ψ_attack is a fresh random key.
    RandomKey,
    /// Plain logit classifier; the generator targets a class label.
    Vanilla,
}

impl AttackMode {
    pub fn name(&self) -> String {
        match self {
            AttackMode::ExactKey => "exact_key".into(),
            AttackMode::DeltaKey { delta } => format!("delta_key_{delta}"),
            AttackMode::RandomKey => "random_key".into(),
            AttackMode::Vanilla => "vanilla".into(),
        }
    }

    pub fn is_keyed(&self) -> bool {
        !matches!(self, AttackMode::Vanilla)
    }
}

/// Dense generator `noise_dim -> hidden -> data_dim` with a LeakyReLU in
/// between and a linear output.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    net: Network,
    noise_dim: usize,
}

impl GeneratorNet {
    pub fn new(noise_dim: usize, hidden: usize, data_dim: usize, seed: u64) -> Result<Self> {
        let specs = [
            LayerSpec::dense(noise_dim, hidden),
            LayerSpec::leaky_relu(hidden, DEFAULT_LEAKY_SLOPE),
            LayerSpec::dense(hidden, data_dim),
        ];
        Ok(GeneratorNet { net: init_net(&specs, seed)?, noise_dim })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// `n` noise vectors with entries from U(−1, 1).
    pub fn sample_noise(&self, n: usize, rng: &mut impl Rng) -> Mat {
        let u = Uniform::new(-1.0f64, 1.0).expect("valid range");
        Mat::from_shape_fn((n, self.noise_dim), |_| rng.sample(u))
    }

    pub fn generate(&self, z: &Mat) -> Result<Mat> {
        self.net.infer(z)
    }
}

/// What the generator is steered towards.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackTarget {
    Key(ClassKey),
    Class(ClassLabel),
}

#[derive(Debug, Clone)]
pub struct AdversaryState {
    pub generator: GeneratorNet,
    pub mode: AttackMode,
    target: AttackTarget,
    psi_fake: Option<ClassKey>,
    c_fake: ClassLabel,
    pub m_samples: usize,
    pub gen_steps_per_turn: usize,
    pub gen_batch: usize,
    pub gen_lr: f64,
}

impl AdversaryState {
    /// Attacker against a key-protected model. `psi_fake` labels the
    /// synthesized samples and must differ from `psi_attack`.
    pub fn keyed(generator: GeneratorNet, mode: AttackMode, psi_attack: ClassKey, psi_fake: ClassKey) -> Result<Self> {
        if !mode.is_keyed() {
            return Err(Error::param("keyed adversary needs a keyed attack mode"));
        }
        if psi_attack.class_label() == psi_fake.class_label() || psi_attack.vec() == psi_fake.vec() {
            return Err(Error::param("psi_attack and psi_fake must be distinct"));
        }
        if psi_attack.dim() != psi_fake.dim() {
            return Err(Error::shape("psi_attack and psi_fake differ in dimension"));
        }
        let c_fake = psi_fake.class_label();
        Ok(AdversaryState {
            generator,
            mode,
            target: AttackTarget::Key(psi_attack),
            psi_fake: Some(psi_fake),
            c_fake,
            m_samples: 0,
            gen_steps_per_turn: 20,
            gen_batch: 32,
            gen_lr: 0.05,
        })
    }

    /// Attacker against a vanilla logit model.
    pub fn vanilla(generator: GeneratorNet, c_attack: ClassLabel, c_fake: ClassLabel) -> Result<Self> {
        if c_attack == c_fake {
            return Err(Error::param("c_attack and c_fake must differ"));
        }
        Ok(AdversaryState {
            generator,
            mode: AttackMode::Vanilla,
            target: AttackTarget::Class(c_attack),
            psi_fake: None,
            c_fake,
            m_samples: 0,
            gen_steps_per_turn: 20,
            gen_batch: 32,
            gen_lr: 0.05,
        })
    }

    pub fn target(&self) -> &AttackTarget {
        &self.target
    }

    pub fn psi_attack(&self) -> Option<&ClassKey> {
        match &self.target {
            AttackTarget::Key(k) => Some(k),
            AttackTarget::Class(_) => None,
        }
    }

    pub fn psi_fake(&self) -> Option<&ClassKey> {
        self.psi_fake.as_ref()
    }

    pub fn c_fake(&self) -> ClassLabel {
        self.c_fake
    }
}

/// L_G = −(1/B) Σ ⟨φ(G(z_b)), ψ⟩ and its gradient with respect to θ_G.
pub fn keyed_generator_loss(
    generator: &GeneratorNet,
    clf: &KeyProtectedClassifier,
    psi: &ClassKey,
    z: &Mat,
) -> Result<(f64, ParamVector)> {
    if psi.dim() != clf.d_key() {
        return Err(Error::shape(format!("psi has dimension {}, classifier emits {}", psi.dim(), clf.d_key())));
    }
    let b = z.nrows().max(1) as f64;
    let (x, gen_tape) = generator.net.forward(z)?;
    let (phi, clf_tape) = clf.net().forward(&x)?;
    let psi_row = ndarray::ArrayView1::from(psi.vec());
    let loss = -phi.dot(&psi_row).sum() / b;
    let grad_phi = Mat::from_shape_fn(phi.dim(), |(_, j)| -psi.vec()[j] / b);
    let grad_x = clf.net().backward_input(&clf_tape, &grad_phi)?;
    let (grads, _) = generator.net.backward(&gen_tape, &grad_x)?;
    Ok((loss, grads))
}

/// L_G = −(1/B) Σ log p(c_attack | G(z_b)) and its gradient.
pub fn vanilla_generator_loss(
    generator: &GeneratorNet,
    clf: &VanillaClassifier,
    c_attack: ClassLabel,
    z: &Mat,
) -> Result<(f64, ParamVector)> {
    let t = clf.class_index(c_attack)?;
    let b = z.nrows().max(1) as f64;
    let (x, gen_tape) = generator.net.forward(z)?;
    let (logits, clf_tape) = clf.net().forward(&x)?;
    let mut grad = logits;
    let mut loss = 0.0;
    for mut r in grad.rows_mut() {
        let r = r.as_slice_mut().expect("contiguous");
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - r[t];
        softmax_in_place(r);
        r[t] -= 1.0;
        r.iter_mut().for_each(|v| *v /= b);
    }
    let grad_x = clf.net().backward_input(&clf_tape, &grad)?;
    let (grads, _) = generator.net.backward(&gen_tape, &grad_x)?;
    Ok((loss / b, grads))
}

fn check_step_args(batch: usize, lr: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::param("generator batch must be positive"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param(format!("generator lr must be positive, got {lr}")));
    }
    Ok(())
}

/// `steps` SGD updates of the generator against a frozen key-protected model.
/// Returns the loss of the last evaluated batch (a fresh batch when
/// `steps == 0`).
pub fn train_generator_keyed(
    adv: &mut AdversaryState,
    clf: &KeyProtectedClassifier,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_step_args(batch, lr)?;
    let psi = adv.psi_attack().ok_or_else(|| Error::contract("vanilla adversary has no psi_attack"))?.clone();
    if steps == 0 {
        let z = adv.generator.sample_noise(batch, rng);
        return Ok(keyed_generator_loss(&adv.generator, clf, &psi, &z)?.0);
    }
    let mut loss = 0.0;
    for _ in 0..steps {
        let z = adv.generator.sample_noise(batch, rng);
        let (l, g) = keyed_generator_loss(&adv.generator, clf, &psi, &z)?;
        adv.generator.net.sgd_step(&g, lr, 0.0)?;
        loss = l;
    }
    Ok(loss)
}

/// `steps` SGD updates of the generator towards class `c_attack` of a frozen
/// vanilla model.
pub fn train_generator_vanilla(
    adv: &mut AdversaryState,
    clf: &VanillaClassifier,
    c_attack: ClassLabel,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_step_args(batch, lr)?;
    clf.class_index(c_attack)?;
    if steps == 0 {
        let z = adv.generator.sample_noise(batch, rng);
        return Ok(vanilla_generator_loss(&adv.generator, clf, c_attack, &z)?.0);
    }
    let mut loss = 0.0;
    for _ in 0..steps {
        let z = adv.generator.sample_noise(batch, rng);
        let (l, g) = vanilla_generator_loss(&adv.generator, clf, c_attack, &z)?;
        adv.generator.net.sgd_step(&g, lr, 0.0)?;
        loss = l;
    }
    Ok(loss)
}

/// `m` generated samples labeled `c_fake`.
pub fn synthesize(adv: &AdversaryState, m: usize, rng: &mut impl Rng) -> Result<Dataset> {
    let z = adv.generator.sample_noise(m, rng);
    let x = adv.generator.generate(&z)?;
    Dataset::new(x, vec![adv.c_fake; m], Split::Train)
}
