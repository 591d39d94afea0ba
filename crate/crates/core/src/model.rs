//! The key-protected classifier and the vanilla logit baseline.
//!
//! A [`KeyProtectedClassifier`] maps an input to a unit vector φ(x); the score
//! of class c is ⟨φ(x), ψ_c⟩ and prediction picks the best-scoring key. The
//! training loss is the negated sum of correct-class scores; its λ‖θ‖² term is
//! reported in the loss value and applied as weight decay by the optimizer.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::{dot, sort_keys, ClassKey, ClassLabel, KeyRing};
use crate::nn::{init_net, row, LayerSpec, Mat, Network, ParamVector, DEFAULT_LEAKY_SLOPE};
use crate::rng::child;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
}

impl Activation {
    fn layer(self, dim: usize, slope: f64) -> LayerSpec {
        match self {
            Activation::LeakyRelu => LayerSpec::leaky_relu(dim, slope),
            Activation::Tanh => LayerSpec::tanh(dim),
        }
    }
}

/// Shape of the embedding body and optional high-dimensional head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    /// Final embedding width. Must equal `d_emb` unless `fixed_layer` is set.
    pub d_key: usize,
    /// Activation after the last body layer (before the l2/fixed head).
    pub embedding_activation: Option<Activation>,
    /// Frozen random widening layer `d_emb -> d_key` and its activation.
    pub fixed_layer: Option<Activation>,
    /// Layer normalization after the fixed layer.
    pub layer_norm: bool,
    pub leaky_slope: f64,
}

impl EmbeddingConfig {
    pub fn new(input_dim: usize, d_key: usize) -> Self {
        EmbeddingConfig {
            input_dim,
            hidden: vec![64, 64],
            d_emb: d_key,
            d_key,
            embedding_activation: None,
            fixed_layer: None,
            layer_norm: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Body of width `d_emb` widened to `d_key` by a frozen layer followed by
    /// LeakyReLU and layer normalization.
    pub fn with_fixed_layer(input_dim: usize, d_emb: usize, d_key: usize) -> Self {
        EmbeddingConfig {
            d_emb,
            fixed_layer: Some(Activation::LeakyRelu),
            layer_norm: true,
            ..EmbeddingConfig::new(input_dim, d_key)
        }
    }

    fn body(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            specs.push(LayerSpec::dense(prev, h));
            specs.push(LayerSpec::leaky_relu(h, self.leaky_slope));
            prev = h;
        }
        specs.push(LayerSpec::dense(prev, self.d_emb));
        specs
    }

    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        let mut specs = self.body();
        if let Some(act) = self.embedding_activation {
            specs.push(act.layer(self.d_emb, self.leaky_slope));
        }
        match self.fixed_layer {
            Some(act) => {
                specs.push(LayerSpec::fixed_dense(self.d_emb, self.d_key));
                specs.push(act.layer(self.d_key, self.leaky_slope));
                if self.layer_norm {
                    specs.push(LayerSpec::layer_norm(self.d_key));
                }
            }
            None => {
                if self.d_key != self.d_emb {
                    return Err(Error::shape(format!(
                        "d_key ({}) differs from d_emb ({}) but no fixed layer widens the embedding",
                        self.d_key, self.d_emb
                    )));
                }
                if self.layer_norm {
                    specs.push(LayerSpec::layer_norm(self.d_key));
                }
            }
        }
        specs.push(LayerSpec::l2_normalize(self.d_key));
        Ok(specs)
    }
}

/// Serializable model shape used by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    pub d_key: usize,
    /// Widen `d_emb` to `d_key` with a frozen layer, LeakyReLU and layer norm.
    pub fixed_layer: bool,
    pub embedding_activation: Option<Activation>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 64], d_emb: 64, d_key: 128, fixed_layer: false, embedding_activation: None }
    }
}

impl ModelConfig {
    pub fn embedding(&self, input_dim: usize) -> EmbeddingConfig {
        let base = if self.fixed_layer {
            EmbeddingConfig::with_fixed_layer(input_dim, self.d_emb, self.d_key)
        } else {
            EmbeddingConfig { d_emb: self.d_key, ..EmbeddingConfig::new(input_dim, self.d_key) }
        };
        EmbeddingConfig { hidden: self.hidden.clone(), embedding_activation: self.embedding_activation, ..base }
    }
}

#[derive(Debug, Clone)]
pub struct KeyProtectedClassifier {
    net: Network,
    d_emb: usize,
    d_key: usize,
}

impl KeyProtectedClassifier {
    pub fn new(cfg: &EmbeddingConfig, seed: u64) -> Result<Self> {
        let net = init_net(&cfg.specs()?, seed)?;
        Ok(KeyProtectedClassifier { net, d_emb: cfg.d_emb, d_key: cfg.d_key })
    }

    /// Wraps an existing network; the last layer must be `l2_normalize`.
    pub fn from_network(net: Network, d_emb: usize) -> Result<Self> {
        if !net.ends_with_l2_normalize() {
            return Err(Error::contract("a key-protected classifier must end in l2_normalize"));
        }
        let d_key = net.output_dim();
        Ok(KeyProtectedClassifier { net, d_emb, d_key })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn d_key(&self) -> usize {
        self.d_key
    }

    /// φ(x) for each row of `x`.
    pub fn embed(&self, x: &Mat) -> Result<Mat> {
        self.net.infer(x)
    }

    fn check_key(&self, key: &ClassKey) -> Result<()> {
        if key.dim() != self.d_key {
            return Err(Error::shape(format!("key has dimension {}, classifier emits {}", key.dim(), self.d_key)));
        }
        Ok(())
    }
}

/// ⟨φ(x), ψ⟩.
pub fn score(clf: &KeyProtectedClassifier, x: &[f64], psi: &ClassKey) -> Result<f64> {
    clf.check_key(psi)?;
    let phi = clf.embed(&row(x))?;
    Ok(psi.dot(phi.row(0).as_slice().expect("contiguous")))
}

/// Label of the best-scoring key for each row. Exact ties go to the key
/// that sorts first by `(owner, class_label)`.
pub fn predict_batch(clf: &KeyProtectedClassifier, x: &Mat, keys: &[ClassKey]) -> Result<Vec<ClassLabel>> {
    if keys.is_empty() {
        return Err(Error::param("prediction needs at least one key"));
    }
    for k in keys {
        clf.check_key(k)?;
    }
    let mut sorted = keys.to_vec();
    sort_keys(&mut sorted);
    let phi = clf.embed(x)?;
    Ok(phi
        .rows()
        .into_iter()
        .map(|p| {
            let p = p.as_slice().expect("contiguous");
            let mut best = (f64::NEG_INFINITY, sorted[0].class_label());
            for k in &sorted {
                let s = k.dot(p);
                if s > best.0 {
                    best = (s, k.class_label());
                }
            }
            best.1
        })
        .collect())
}

pub fn predict(clf: &KeyProtectedClassifier, x: &[f64], keys: &[ClassKey]) -> Result<ClassLabel> {
    Ok(predict_batch(clf, &row(x), keys)?[0])
}

/// Loss value and the gradient of its data term.
///
/// `grads` excludes the λ‖θ‖² part; pass λ as `weight_decay` to the optimizer
/// (or use [`LossOutput::full_gradient`] when the complete gradient is needed).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamVector,
    pub lambda: f64,
}

impl LossOutput {
    /// Data-term gradient plus 2λθ.
    pub fn full_gradient(&self, params: &ParamVector) -> ParamVector {
        let mut g = self.grads.clone();
        for (gi, p) in g.as_mut_slice().iter_mut().zip(params.as_slice()) {
            *gi += 2.0 * self.lambda * p;
        }
        g
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

fn check_batch(x: &Mat, labels: &[ClassLabel]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::shape(format!("{} samples but {} labels", x.nrows(), labels.len())));
    }
    Ok(())
}

/// −Σ_i ⟨φ(x_i), ψ_{c_i}⟩ + λ‖θ‖², using only keys held in `keys`.
///
/// The ½Σ‖φ(x_i)‖² term of the likelihood is constant because the network
/// ends in l2 normalization, so it is omitted; the classifier is checked for
/// that final layer.
pub fn key_regression_loss(
    clf: &KeyProtectedClassifier,
    x: &Mat,
    labels: &[ClassLabel],
    keys: &KeyRing,
    lambda: f64,
) -> Result<LossOutput> {
    check_batch(x, labels)?;
    check_lambda(lambda)?;
    if !clf.net.ends_with_l2_normalize() {
        return Err(Error::contract("key regression requires a final l2_normalize layer"));
    }
    let targets = labels
        .iter()
        .map(|&c| {
            let key = keys.get(c).ok_or_else(|| {
                Error::Access(format!("participant {} holds no key for class {c}", keys.owner()))
            })?;
            clf.check_key(key)?;
            Ok(key)
        })
        .collect::<Result<Vec<_>>>()?;

    let (phi, tape) = clf.net.forward(x)?;
    let mut grad_phi = Mat::zeros(phi.dim());
    let mut total = 0.0;
    for ((p, mut g), key) in phi.rows().into_iter().zip(grad_phi.rows_mut()).zip(&targets) {
        total -= key.dot(p.as_slice().expect("contiguous"));
        g.assign(&ndarray::ArrayView1::from(key.vec()));
        g.mapv_inplace(|v| -v);
    }
    let (grads, _) = clf.net.backward(&tape, &grad_phi)?;
    let loss = total + lambda * clf.net.params().squared_norm();
    Ok(LossOutput { loss, grads, lambda })
}

/// Body followed by a trainable dense layer emitting one logit per class.
#[derive(Debug, Clone)]
pub struct VanillaClassifier {
    net: Network,
    classes: Vec<ClassLabel>,
}

impl VanillaClassifier {
    /// Uses the body of `cfg` (hidden layers and `d_emb`), then the embedding
    /// activation (LeakyReLU when unset), then the logit layer.
    pub fn new(cfg: &EmbeddingConfig, classes: Vec<ClassLabel>, seed: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::param("a vanilla classifier needs at least one class"));
        }
        let mut uniq = classes.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != classes.len() {
            return Err(Error::param("duplicate class labels"));
        }
        let mut specs = cfg.body();
        let act = cfg.embedding_activation.unwrap_or(Activation::LeakyRelu);
        specs.push(act.layer(cfg.d_emb, cfg.leaky_slope));
        specs.push(LayerSpec::dense(cfg.d_emb, classes.len()));
        Ok(VanillaClassifier { net: init_net(&specs, seed)?, classes })
    }

    pub fn from_network(net: Network, classes: Vec<ClassLabel>) -> Result<Self> {
        if net.output_dim() != classes.len() {
            return Err(Error::shape("one logit per class required"));
        }
        Ok(VanillaClassifier { net, classes })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn class_index(&self, c: ClassLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::param(format!("class {c} is not declared by this classifier")))
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        self.net.infer(x)
    }

    /// Softmax probabilities, one row per sample.
    pub fn probabilities(&self, x: &Mat) -> Result<Mat> {
        let mut z = self.logits(x)?;
        z.rows_mut().into_iter().for_each(|mut r| softmax_in_place(r.as_slice_mut().expect("contiguous")));
        Ok(z)
    }

    /// Argmax over the classes in `allowed` (all declared classes when `None`).
    pub fn predict_batch(&self, x: &Mat, allowed: Option<&[ClassLabel]>) -> Result<Vec<ClassLabel>> {
        let idx: Vec<usize> = match allowed {
            Some(a) => a.iter().map(|&c| self.class_index(c)).collect::<Result<_>>()?,
            None => (0..self.classes.len()).collect(),
        };
        if idx.is_empty() {
            return Err(Error::param("prediction needs at least one class"));
        }
        let z = self.logits(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| {
                let best = idx.iter().copied().fold(idx[0], |b, i| if r[i] > r[b] { i } else { b });
                self.classes[best]
            })
            .collect())
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Σ_i −log softmax(z_i)[c_i] + λ‖θ‖².
pub fn cross_entropy_loss(clf: &VanillaClassifier, x: &Mat, labels: &[ClassLabel], lambda: f64) -> Result<LossOutput> {
    check_batch(x, labels)?;
    check_lambda(lambda)?;
    let targets = labels.iter().map(|&c| clf.class_index(c)).collect::<Result<Vec<_>>>()?;
    let (z, tape) = clf.net.forward(x)?;
    let mut grad = z.clone();
    let mut total = 0.0;
    for (mut g, &t) in grad.rows_mut().into_iter().zip(&targets) {
        let g = g.as_slice_mut().expect("contiguous");
        let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + g.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - g[t];
        softmax_in_place(g);
        g[t] -= 1.0;
    }
    let (grads, _) = clf.net.backward(&tape, &grad)?;
    let loss = total + lambda * clf.net.params().squared_norm();
    Ok(LossOutput { loss, grads, lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub analytic: f64,
    pub n_samples: usize,
}

const MC_SHARD: usize = 4096;

/// Monte-Carlo estimate of E_ψ[exp⟨φ, ψ⟩] for ψ ~ N(0, I_d) next to the
/// closed form exp(½‖φ‖²).
///
/// Samples are drawn in fixed-size shards, each from its own child stream of
/// one master seed, and summed in shard order, so the estimate is the same on
/// any number of threads.
pub fn softmax_mc_oracle(phi: &[f64], n_samples: usize, rng: &mut impl RngCore) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::param("n_samples must be >= 1"));
    }
    if phi.is_empty() || phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("phi must be non-empty and finite"));
    }
    let master = rng.next_u64();
    let n_shards = n_samples.div_ceil(MC_SHARD);
    let sums: Vec<f64> = (0..n_shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = child(master, s as u64);
            let count = MC_SHARD.min(n_samples - s * MC_SHARD);
            let mut acc = 0.0;
            for _ in 0..count {
                let g: f64 = phi.iter().map(|p| p * rng.sample::<f64, _>(StandardNormal)).sum();
                acc += g.exp();
            }
            acc
        })
        .collect();
    let estimate = sums.iter().sum::<f64>() / n_samples as f64;
    let analytic = (0.5 * dot(phi, phi)).exp();
    Ok(McEstimate { estimate, analytic, n_samples })
}

/// exp(⟨φ(x), ψ_c⟩) / E_ψ[exp⟨φ(x), ψ⟩] = exp(score − ½) for unit φ.
///
/// An unnormalized likelihood over an unbounded class set, not a finite
/// distribution.
pub fn generalized_softmax_prob(clf: &KeyProtectedClassifier, x: &[f64], psi: &ClassKey) -> Result<f64> {
    if !clf.net.ends_with_l2_normalize() {
        return Err(Error::contract("generalized softmax assumes a unit-norm embedding"));
    }
    Ok((score(clf, x, psi)? - 0.5).exp())
}

/// Mean correct-class score over a labeled batch.
pub fn mean_correct_score(clf: &KeyProtectedClassifier, x: &Mat, labels: &[ClassLabel], keys: &KeyRing) -> Result<f64> {
    check_batch(x, labels)?;
    let phi = clf.embed(x)?;
    let mut total = 0.0;
    for (p, &c) in phi.rows().into_iter().zip(labels) {
        let key = keys.get(c).ok_or_else(|| Error::Access(format!("no key for class {c}")))?;
        total += key.dot(p.as_slice().expect("contiguous"));
    }
    Ok(total / labels.len().max(1) as f64)
}
