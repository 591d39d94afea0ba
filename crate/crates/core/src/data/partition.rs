use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::keys::{ClassLabel, ParticipantId};

/// Which classes each participant hosts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartitionPlan {
    pub assignments: BTreeMap<ParticipantId, BTreeSet<ClassLabel>>,
    /// Allows a class to be assigned to more than one participant.
    pub allow_shared: bool,
}

impl PartitionPlan {
    pub fn new(assignments: impl IntoIterator<Item = (ParticipantId, Vec<ClassLabel>)>) -> Self {
        PartitionPlan {
            assignments: assignments.into_iter().map(|(p, cs)| (p, cs.into_iter().collect())).collect(),
            allow_shared: false,
        }
    }

    pub fn shared(mut self) -> Self {
        self.allow_shared = true;
        self
    }

    /// Contiguous blocks of classes for `n` participants, e.g. {0–4}, {5–9}.
    pub fn contiguous(classes: &[ClassLabel], n: usize) -> Self {
        let per = classes.len().div_ceil(n.max(1));
        PartitionPlan::new(
            (0..n).map(|p| (ParticipantId(p as u32), classes.iter().skip(p * per).take(per).copied().collect())),
        )
    }

    /// Classes assigned to two or more participants.
    pub fn shared_classes(&self) -> BTreeSet<ClassLabel> {
        let mut seen = BTreeSet::new();
        let mut shared = BTreeSet::new();
        for cs in self.assignments.values() {
            for &c in cs {
                if !seen.insert(c) {
                    shared.insert(c);
                }
            }
        }
        shared
    }
}

/// Gives every participant all samples of its classes. Samples of a shared
/// class are shuffled and dealt round-robin among its hosts, so host counts
/// differ by at most one and no sample is duplicated.
pub fn partition(ds: &Dataset, plan: &PartitionPlan, rng: &mut impl Rng) -> Result<BTreeMap<ParticipantId, Dataset>> {
    let shared = plan.shared_classes();
    if !shared.is_empty() && !plan.allow_shared {
        return Err(Error::param(format!("classes {shared:?} are assigned twice but shared mode is off")));
    }
    let present = ds.classes();
    let mut hosts: BTreeMap<ClassLabel, Vec<ParticipantId>> = BTreeMap::new();
    for (&p, cs) in &plan.assignments {
        for &c in cs {
            if !present.contains(&c) {
                return Err(Error::param(format!("class {c} assigned to participant {p} is absent from the data")));
            }
            hosts.entry(c).or_default().push(p);
        }
    }
    let mut picked: BTreeMap<ParticipantId, Vec<usize>> = plan.assignments.keys().map(|&p| (p, Vec::new())).collect();
    for (c, owners) in &hosts {
        let mut idx = ds.indices_of(*c);
        if owners.len() > 1 {
            idx.shuffle(rng);
        }
        for (k, i) in idx.into_iter().enumerate() {
            picked.get_mut(&owners[k % owners.len()]).expect("known participant").push(i);
        }
    }
    Ok(picked
        .into_iter()
        .map(|(p, mut idx)| {
            idx.sort_unstable();
            (p, ds.subset(&idx))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobsConfig};
    use crate::rng::seeded;

    fn labels(r: std::ops::Range<u32>) -> Vec<ClassLabel> {
        r.map(ClassLabel).collect()
    }

    #[test]
    fn disjoint_split_conserves_samples() {
        let (train, _) = synth_blobs(&BlobsConfig { per_class: 21, ..BlobsConfig::default() }).unwrap();
        let plan = PartitionPlan::contiguous(&labels(0..10), 2);
        let parts = partition(&train, &plan, &mut seeded(0)).unwrap();
        let a = &parts[&ParticipantId(0)];
        let b = &parts[&ParticipantId(1)];
        assert_eq!(a.len() + b.len(), train.len());
        assert_eq!(a.classes(), labels(0..5).into_iter().collect());
        assert_eq!(b.classes(), labels(5..10).into_iter().collect());
    }

    #[test]
    fn shared_class_is_split_evenly() {
        let (train, _) = synth_blobs(&BlobsConfig { per_class: 21, ..BlobsConfig::default() }).unwrap();
        let plan = PartitionPlan::new([
            (ParticipantId(0), vec![ClassLabel(0), ClassLabel(1)]),
            (ParticipantId(1), vec![ClassLabel(1), ClassLabel(2)]),
        ]);
        assert!(partition(&train, &plan, &mut seeded(0)).is_err());
        let parts = partition(&train, &plan.shared(), &mut seeded(0)).unwrap();
        let n0 = parts[&ParticipantId(0)].indices_of(ClassLabel(1)).len();
        let n1 = parts[&ParticipantId(1)].indices_of(ClassLabel(1)).len();
        assert_eq!(n0 + n1, train.indices_of(ClassLabel(1)).len());
        assert!(n0.abs_diff(n1) <= 1);
    }

    #[test]
    fn empty_assignment_gives_empty_dataset() {
        let (train, _) = synth_blobs(&BlobsConfig { per_class: 5, ..BlobsConfig::default() }).unwrap();
        let plan = PartitionPlan::new([(ParticipantId(0), labels(0..10)), (ParticipantId(1), vec![])]);
        let parts = partition(&train, &plan, &mut seeded(0)).unwrap();
        assert!(parts[&ParticipantId(1)].is_empty());
    }

    #[test]
    fn absent_class_is_rejected() {
        let (train, _) = synth_blobs(&BlobsConfig { per_class: 5, ..BlobsConfig::default() }).unwrap();
        let plan = PartitionPlan::new([(ParticipantId(0), vec![ClassLabel(42)])]);
        assert!(matches!(partition(&train, &plan, &mut seeded(0)), Err(Error::Parameter(_))));
    }
}
