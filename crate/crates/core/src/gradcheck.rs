//! Finite-difference verification of every analytic gradient in the crate.

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adversary::{keyed_generator_loss, vanilla_generator_loss, GeneratorNet};
use crate::error::Result;
use crate::keys::{generate_key, ClassLabel, KeyRing, ParticipantId};
use crate::model::{cross_entropy_loss, key_regression_loss, EmbeddingConfig, KeyProtectedClassifier, VanillaClassifier};
use crate::nn::{init_net, LayerKind, LayerSpec, Mat, Network, ParamLayout, DEFAULT_LEAKY_SLOPE};
use crate::rng::{child, SimRng};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (near) zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;
/// Instances whose LeakyReLU inputs come closer than this to the kink are
/// redrawn; the derivative is undefined there.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub n_coords: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every i.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let max_rel_error = analytic.iter().zip(numeric).map(|(&a, &n)| rel_error(a, n)).fold(0.0, f64::max);
    GradCheck { name: name.into(), n_coords: analytic.len(), max_rel_error }
}

fn as_mat(values: &[f64], shape: (usize, usize)) -> Mat {
    Mat::from_shape_vec(shape, values.to_vec()).expect("matching length")
}

/// Checks parameter and input gradients of `s = Σ r ⊙ net(x)`.
pub fn check_network(name: &str, net: &Network, x: &Mat, r: &Mat) -> Result<Vec<GradCheck>> {
    let (_, tape) = net.forward(x)?;
    let (gp, gx) = net.backward(&tape, r)?;
    let scalar = |y: Mat| (&y * r).sum();
    let mut out = Vec::new();
    if net.trainable_count() > 0 {
        let mut probe = net.clone();
        let num = numeric_gradient(
            |p| {
                probe.set_params(p)?;
                Ok(scalar(probe.infer(x)?))
            },
            net.params().as_slice(),
            FD_STEP,
        )?;
        out.push(compare(format!("{name}/params"), gp.as_slice(), &num));
    }
    let flat: Vec<f64> = x.iter().copied().collect();
    let num = numeric_gradient(|v| Ok(scalar(net.infer(&as_mat(v, x.dim()))?)), &flat, FD_STEP)?;
    let gx: Vec<f64> = gx.iter().copied().collect();
    out.push(compare(format!("{name}/input"), &gx, &num));
    Ok(out)
}

/// Smallest |input| seen by any LeakyReLU of a network built by
/// `init_net(specs, seed)` and then given `params`.
pub fn leaky_margin(specs: &[LayerSpec], seed: u64, params: &[f64], x: &Mat) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for (k, s) in specs.iter().enumerate() {
        if !matches!(s.kind, LayerKind::LeakyRelu { .. }) {
            continue;
        }
        let pre = if k == 0 {
            x.clone()
        } else {
            // init_net draws frozen weights in layer order, so the prefix
            // rebuilt from the same seed carries the same fixed layers.
            let mut prefix = init_net(&specs[..k], seed)?;
            let n = ParamLayout::from_specs(&specs[..k]).len();
            prefix.set_params(&params[..n])?;
            prefix.infer(x)?
        };
        margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
    }
    Ok(margin)
}

fn gaussian(rng: &mut SimRng, shape: (usize, usize), scale: f64) -> Mat {
    Mat::from_shape_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn randomize(net: &mut Network, rng: &mut SimRng) -> Result<()> {
    let p: Vec<f64> = (0..net.trainable_count()).map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
    net.set_params(&p)
}

/// A network from `specs` with random parameters and a random batch whose
/// LeakyReLU inputs stay clear of the kink.
fn draw(specs: &[LayerSpec], batch: usize, rng: &mut SimRng) -> Result<(Network, Mat, u64)> {
    loop {
        let seed = rng.random();
        let mut net = init_net(specs, seed)?;
        randomize(&mut net, rng)?;
        let x = gaussian(rng, (batch, specs[0].in_dim), 1.0);
        if leaky_margin(specs, seed, net.params().as_slice(), &x)? >= KINK_MARGIN {
            return Ok((net, x, seed));
        }
    }
}

fn dim(rng: &mut SimRng, lo: usize, hi: usize) -> usize {
    rng.sample(Uniform::new_inclusive(lo, hi).expect("valid range"))
}

fn random_stack(rng: &mut SimRng) -> Vec<LayerSpec> {
    let n_layers = dim(rng, 2, 3);
    let mut specs = Vec::new();
    let mut d = dim(rng, 2, 16);
    for i in 0..n_layers {
        let choice = if i == 0 { 0 } else { dim(rng, 0, 5) };
        let spec = match choice {
            0 => {
                let o = dim(rng, 2, 16);
                let s = LayerSpec::dense(d, o);
                d = o;
                s
            }
            1 => LayerSpec::leaky_relu(d, DEFAULT_LEAKY_SLOPE),
            2 => LayerSpec::tanh(d),
            3 => LayerSpec::l2_normalize(d),
            4 => LayerSpec::layer_norm(d),
            _ => {
                let o = dim(rng, 2, 16);
                let s = LayerSpec::fixed_dense(d, o);
                d = o;
                s
            }
        };
        specs.push(spec);
    }
    specs
}

fn small_embedding(rng: &mut SimRng, input_dim: usize) -> EmbeddingConfig {
    let d_emb = dim(rng, 2, 6);
    EmbeddingConfig { hidden: vec![dim(rng, 2, 6)], ..EmbeddingConfig::with_fixed_layer(input_dim, d_emb, dim(rng, 6, 12)) }
}

/// Parameter gradient of a loss closure against finite differences.
fn check_loss(
    name: &str,
    net: &Network,
    analytic: &[f64],
    mut loss_at: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheck> {
    let num = numeric_gradient(&mut loss_at, net.params().as_slice(), FD_STEP)?;
    Ok(compare(name, analytic, &num))
}

/// One random instance of every check: each layer kind alone, a random
/// stack, both classifier losses and both generator objectives.
pub fn check_instance(rng: &mut SimRng) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let batch = dim(rng, 1, 4);
    let (a, b) = (dim(rng, 2, 8), dim(rng, 2, 8));
    let singles = [
        ("dense", LayerSpec::dense(a, b)),
        ("leaky_relu", LayerSpec::leaky_relu(a, DEFAULT_LEAKY_SLOPE)),
        ("tanh", LayerSpec::tanh(a)),
        ("l2_normalize", LayerSpec::l2_normalize(a)),
        ("fixed_dense", LayerSpec::fixed_dense(a, b)),
        ("layer_norm", LayerSpec::layer_norm(a)),
    ];
    for (name, spec) in singles {
        let (net, x, _) = draw(&[spec], batch, rng)?;
        let r = gaussian(rng, (batch, spec.out_dim), 1.0);
        out.extend(check_network(name, &net, &x, &r)?);
    }
    let specs = random_stack(rng);
    let (net, x, _) = draw(&specs, batch, rng)?;
    let r = gaussian(rng, (batch, specs.last().expect("non-empty").out_dim), 1.0);
    out.extend(check_network("random_stack", &net, &x, &r)?);

    let input_dim = dim(rng, 2, 6);
    let lambda = 0.01;
    let owner = ParticipantId(0);
    let labels: Vec<ClassLabel> = (0..batch).map(|i| ClassLabel((i % 2) as u32)).collect();

    // key regression, including the λ‖θ‖² term
    let cfg = small_embedding(rng, input_dim);
    let specs = cfg.specs()?;
    let (net, x, clf_seed) = draw(&specs, batch, rng)?;
    let clf = KeyProtectedClassifier::from_network(net, cfg.d_emb)?;
    let keys = KeyRing::new(owner, (0..2).map(|c| generate_key(cfg.d_key, ClassLabel(c), owner, rng)).collect::<Result<Vec<_>>>()?)?;
    let lo = key_regression_loss(&clf, &x, &labels, &keys, lambda)?;
    let full = lo.full_gradient(clf.net().params());
    let mut probe = clf.clone();
    out.push(check_loss("key_regression_loss", clf.net(), full.as_slice(), |p| {
        probe.net_mut().set_params(p)?;
        Ok(key_regression_loss(&probe, &x, &labels, &keys, lambda)?.loss)
    })?);

    // cross entropy: body + activation + logits
    let classes = vec![ClassLabel(0), ClassLabel(1), ClassLabel(2)];
    let body = EmbeddingConfig { hidden: vec![dim(rng, 2, 6)], ..EmbeddingConfig::new(input_dim, dim(rng, 2, 6)) };
    let template = VanillaClassifier::new(&body, classes.clone(), 0)?;
    let specs = template.net().specs().to_vec();
    let (net, x, clf_v_seed) = draw(&specs, batch, rng)?;
    let clf_v = VanillaClassifier::from_network(net, classes.clone())?;
    let lo = cross_entropy_loss(&clf_v, &x, &labels, lambda)?;
    let full = lo.full_gradient(clf_v.net().params());
    let mut probe = clf_v.clone();
    out.push(check_loss("cross_entropy_loss", clf_v.net(), full.as_slice(), |p| {
        probe.net_mut().set_params(p)?;
        Ok(cross_entropy_loss(&probe, &x, &labels, lambda)?.loss)
    })?);

    // generator objectives, through the frozen classifiers above
    let noise_dim = dim(rng, 2, 4);
    let gen_specs = GeneratorNet::new(noise_dim, 4, input_dim, 0)?.net().specs().to_vec();
    let psi = keys.get(ClassLabel(0)).expect("generated").clone();
    for vanilla in [false, true] {
        let (gen, z) = loop {
            let seed: u64 = rng.random();
            let mut g = GeneratorNet::new(noise_dim, 4, input_dim, seed)?;
            randomize(g.net_mut(), rng)?;
            let z = gaussian(rng, (batch, noise_dim), 0.6);
            let x = g.generate(&z)?;
            let (clf_net, clf_seed) = if vanilla { (clf_v.net(), clf_v_seed) } else { (clf.net(), clf_seed) };
            let gen_ok = leaky_margin(&gen_specs, seed, g.net().params().as_slice(), &z)? >= KINK_MARGIN;
            let clf_ok = leaky_margin(clf_net.specs(), clf_seed, clf_net.params().as_slice(), &x)? >= KINK_MARGIN;
            if gen_ok && clf_ok {
                break (g, z);
            }
        };
        let mut probe = gen.clone();
        let check = if vanilla {
            let (_, g) = vanilla_generator_loss(&gen, &clf_v, ClassLabel(1), &z)?;
            check_loss("generator_vanilla", gen.net(), g.as_slice(), |p| {
                probe.net_mut().set_params(p)?;
                Ok(vanilla_generator_loss(&probe, &clf_v, ClassLabel(1), &z)?.0)
            })?
        } else {
            let (_, g) = keyed_generator_loss(&gen, &clf, &psi, &z)?;
            check_loss("generator_keyed", gen.net(), g.as_slice(), |p| {
                probe.net_mut().set_params(p)?;
                Ok(keyed_generator_loss(&probe, &clf, &psi, &z)?.0)
            })?
        };
        out.push(check);
    }
    Ok(out)
}


/// `n_instances` independent draws of [`check_instance`].
pub fn gradient_suite(n_instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for i in 0..n_instances {
        out.extend(check_instance(&mut child(seed, i as u64))?);
    }
    Ok(out)
}
