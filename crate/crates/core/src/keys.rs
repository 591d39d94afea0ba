//! Private class keys: generation, δ-constrained keys, orthonormal key sets,
//! the key-correlation statistics experiment, and the `.keys` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::child;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParticipantId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassLabel(pub u32);

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

const UNIT_TOL: f64 = 1e-9;

/// A unit-norm key bound to a `(owner, class)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKey {
    vec: Vec<f64>,
    class_label: ClassLabel,
    owner: ParticipantId,
}

impl ClassKey {
    /// Wraps an already unit-norm vector.
    pub fn new(vec: Vec<f64>, class_label: ClassLabel, owner: ParticipantId) -> Result<Self> {
        if vec.len() < 2 {
            return Err(Error::param(format!("key dimension must be >= 2, got {}", vec.len())));
        }
        let norm = norm(&vec);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::param(format!("key must be unit norm, got {norm}")));
        }
        Ok(ClassKey { vec, class_label, owner })
    }

    /// Normalizes `vec` and wraps it.
    pub fn from_unnormalized(vec: Vec<f64>, class_label: ClassLabel, owner: ParticipantId) -> Result<Self> {
        let n = norm(&vec);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateInput("cannot normalize a zero or non-finite key".into()));
        }
        ClassKey::new(vec.into_iter().map(|v| v / n).collect(), class_label, owner)
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn class_label(&self) -> ClassLabel {
        self.class_label
    }

    pub fn owner(&self) -> ParticipantId {
        self.owner
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.vec, other)
    }

    /// Copies the key value under a new `(owner, class)` binding.
    pub fn rebind(&self, class_label: ClassLabel, owner: ParticipantId) -> ClassKey {
        ClassKey { vec: self.vec.clone(), class_label, owner }
    }

    fn sort_key(&self) -> (ParticipantId, ClassLabel) {
        (self.owner, self.class_label)
    }
}

/// The keys a single participant holds. Every key in a ring belongs to the
/// ring's owner, so a ring can never carry another participant's key.
#[derive(Debug, Clone)]
pub struct KeyRing {
    owner: ParticipantId,
    keys: BTreeMap<ClassLabel, ClassKey>,
}

impl KeyRing {
    pub fn new(owner: ParticipantId, keys: impl IntoIterator<Item = ClassKey>) -> Result<Self> {
        let mut ring = KeyRing { owner, keys: BTreeMap::new() };
        for k in keys {
            ring.insert(k)?;
        }
        Ok(ring)
    }

    pub fn insert(&mut self, key: ClassKey) -> Result<()> {
        if key.owner != self.owner {
            return Err(Error::Access(format!(
                "participant {} cannot hold a key owned by participant {}",
                self.owner, key.owner
            )));
        }
        if let Some(first) = self.keys.values().next() {
            if first.dim() != key.dim() {
                return Err(Error::shape(format!("key dimension {} differs from ring dimension {}", key.dim(), first.dim())));
            }
        }
        if self.keys.contains_key(&key.class_label) {
            return Err(Error::param(format!("duplicate key for class {}", key.class_label)));
        }
        self.keys.insert(key.class_label, key);
        Ok(())
    }

    pub fn owner(&self) -> ParticipantId {
        self.owner
    }

    pub fn get(&self, class: ClassLabel) -> Option<&ClassKey> {
        self.keys.get(&class)
    }

    pub fn labels(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        self.keys.keys().copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ClassKey> + '_ {
        self.keys.values()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    crate::nn::stable_norm(a)
}

fn gaussian_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn check_dim(d_key: usize) -> Result<()> {
    if d_key < 2 {
        return Err(Error::param(format!("d_key must be >= 2, got {d_key}")));
    }
    Ok(())
}

/// Samples g ~ N(0, I) and returns g / |g|.
pub fn generate_key(d_key: usize, class_label: ClassLabel, owner: ParticipantId, rng: &mut impl Rng) -> Result<ClassKey> {
    check_dim(d_key)?;
    loop {
        let g = gaussian_vec(d_key, rng);
        if norm(&g) > 0.0 {
            return ClassKey::from_unnormalized(g, class_label, owner);
        }
    }
}

/// A random unit key at Euclidean distance exactly `delta` from `desired`.
///
/// With α = 2·asin(δ/2) the output is cos(α)·ψ + sin(α)·û, where û is a
/// uniformly random unit vector orthogonal to ψ; chord length on the unit
/// sphere is 2·sin(α/2) = δ.
pub fn generate_delta_key(
    desired: &ClassKey,
    delta: f64,
    class_label: ClassLabel,
    owner: ParticipantId,
    rng: &mut impl Rng,
) -> Result<ClassKey> {
    if !(0.0..=2.0).contains(&delta) {
        return Err(Error::param(format!("delta must lie in [0, 2], got {delta}")));
    }
    let psi = desired.vec();
    let u_hat = loop {
        let mut u = gaussian_vec(psi.len(), rng);
        let proj = dot(&u, psi);
        u.iter_mut().zip(psi).for_each(|(v, p)| *v -= proj * p);
        // second pass removes the rounding residue of the first
        let proj = dot(&u, psi);
        u.iter_mut().zip(psi).for_each(|(v, p)| *v -= proj * p);
        let n = norm(&u);
        if n > 1e-8 {
            break u.into_iter().map(|v| v / n).collect::<Vec<_>>();
        }
    };
    let alpha = 2.0 * (delta / 2.0).asin();
    let (s, c) = alpha.sin_cos();
    let out: Vec<f64> = psi.iter().zip(&u_hat).map(|(p, u)| c * p + s * u).collect();
    ClassKey::from_unnormalized(out, class_label, owner)
}

/// Orthonormal keys obtained from the Q factor of a random Gaussian
/// `d_key × n` matrix (modified Gram–Schmidt, applied twice).
pub fn generate_orthonormal_keys(
    d_key: usize,
    labels: &[ClassLabel],
    owner: ParticipantId,
    rng: &mut impl Rng,
) -> Result<Vec<ClassKey>> {
    check_dim(d_key)?;
    if labels.len() > d_key {
        return Err(Error::param(format!("cannot fit {} orthonormal keys in dimension {d_key}", labels.len())));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
    while basis.len() < labels.len() {
        let mut v = gaussian_vec(d_key, rng);
        for _ in 0..2 {
            for q in &basis {
                let p = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
        .into_iter()
        .zip(labels)
        .map(|(v, &label)| ClassKey::from_unnormalized(v, label, owner))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyDistribution {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStatsReport {
    pub d_key: usize,
    pub n_vectors: usize,
    pub n_repeats: usize,
    pub distribution: KeyDistribution,
    pub max_of_max_dot: f64,
    pub per_repeat_max: Vec<f64>,
}

/// For each repeat, samples `n_vectors` normalized vectors and records the
/// largest pairwise dot product; reports the maximum over repeats.
///
/// Repeats run in parallel, each on a child stream of one master seed drawn
/// from `rng`, so the report does not depend on the thread count.
pub fn key_collision_stats(
    d_key: usize,
    n_vectors: usize,
    n_repeats: usize,
    distribution: KeyDistribution,
    rng: &mut impl RngCore,
) -> Result<KeyStatsReport> {
    check_dim(d_key)?;
    if n_vectors < 2 {
        return Err(Error::param("key_collision_stats needs at least two vectors"));
    }
    if n_repeats == 0 {
        return Err(Error::param("key_collision_stats needs at least one repeat"));
    }
    let master = rng.next_u64();
    let per_repeat_max: Vec<f64> = (0..n_repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = child(master, r as u64);
            let unif = Uniform::new(-1.0f64, 1.0).expect("valid range");
            let vectors: Vec<Vec<f64>> = (0..n_vectors)
                .map(|_| loop {
                    let v: Vec<f64> = match distribution {
                        KeyDistribution::Gaussian => gaussian_vec(d_key, &mut rng),
                        KeyDistribution::Uniform => (0..d_key).map(|_| rng.sample(unif)).collect(),
                    };
                    let n = norm(&v);
                    if n > 0.0 {
                        break v.into_iter().map(|x| x / n).collect();
                    }
                })
                .collect();
            let mut best = f64::NEG_INFINITY;
            for i in 0..n_vectors {
                for j in i + 1..n_vectors {
                    best = best.max(dot(&vectors[i], &vectors[j]));
                }
            }
            best.clamp(-1.0, 1.0)
        })
        .collect();
    let max_of_max_dot = per_repeat_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(KeyStatsReport { d_key, n_vectors, n_repeats, distribution, max_of_max_dot, per_repeat_max })
}

/// Formats `v` as a plain decimal with `sig` significant digits.
fn fmt_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Writes keys as `d_key,n_keys` followed by one
/// `owner,class_label,v1,...,v_dkey` row per key.
pub fn write_keys<'a, W: Write>(mut w: W, keys: impl IntoIterator<Item = &'a ClassKey>) -> Result<()> {
    let keys: Vec<&ClassKey> = keys.into_iter().collect();
    let d = keys.first().map_or(0, |k| k.dim());
    writeln!(w, "{},{}", d, keys.len())?;
    for k in keys {
        if k.dim() != d {
            return Err(Error::shape("all keys in a .keys file must share one dimension"));
        }
        let mut line = format!("{},{}", k.owner, k.class_label);
        for v in &k.vec {
            line.push(',');
            line.push_str(&fmt_sig(*v, 9));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parses a `.keys` file. Values are renormalized after the 9-digit round trip.
pub fn read_keys<R: BufRead>(r: R) -> Result<Vec<ClassKey>> {
    let mut lines = r.lines();
    let bad = |line: usize, msg: String| Error::Format { offset: line, msg };
    let header = lines.next().ok_or_else(|| bad(0, "empty key file".into()))??;
    let mut parts = header.trim().split(',');
    let parse_count = |s: Option<&str>| s.and_then(|s| s.trim().parse::<usize>().ok());
    let (d, n) = match (parse_count(parts.next()), parse_count(parts.next()), parts.next()) {
        (Some(d), Some(n), None) => (d, n),
        _ => return Err(bad(0, format!("bad header line {header:?}"))),
    };
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != d + 2 {
            return Err(bad(i + 1, format!("expected {} fields, found {}", d + 2, fields.len())));
        }
        let owner = fields[0].parse().map_err(|_| bad(i + 1, "bad owner".into()))?;
        let class = fields[1].parse().map_err(|_| bad(i + 1, "bad class label".into()))?;
        let vec = fields[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(i + 1, format!("bad value: {e}")))?;
        out.push(ClassKey::from_unnormalized(vec, ClassLabel(class), ParticipantId(owner))?);
    }
    if out.len() != n {
        return Err(bad(0, format!("header declares {n} keys, file holds {}", out.len())));
    }
    Ok(out)
}

/// Sorts keys by `(owner, class_label)`, the order prediction ties resolve in.
pub fn sort_keys(keys: &mut [ClassKey]) {
    keys.sort_by_key(|k| k.sort_key());
}
