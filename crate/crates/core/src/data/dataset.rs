use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Axis, concatenate};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::ClassLabel;
use crate::nn::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Samples (one per row) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Mat,
    labels: Vec<ClassLabel>,
    split: Split,
}

impl Dataset {
    pub fn new(samples: Mat, labels: Vec<ClassLabel>, split: Split) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::shape(format!("{} samples but {} labels", samples.nrows(), labels.len())));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("dataset contains non-finite values"));
        }
        Ok(Dataset { samples, labels, split })
    }

    pub fn empty(dim: usize, split: Split) -> Self {
        Dataset { samples: Mat::zeros((0, dim)), labels: Vec::new(), split }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &Mat {
        &self.samples
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn classes(&self) -> BTreeSet<ClassLabel> {
        self.labels.iter().copied().collect()
    }

    pub fn indices_of(&self, class: ClassLabel) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &c)| c == class).map(|(i, _)| i).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Keeps only samples whose class is in `classes`.
    pub fn filter_classes(&self, classes: &BTreeSet<ClassLabel>) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    /// At most `n` samples per class, keeping dataset order.
    pub fn take_per_class(&self, n: usize) -> Dataset {
        let mut counts = std::collections::BTreeMap::new();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = counts.entry(self.labels[i]).or_insert(0usize);
                *c += 1;
                *c <= n
            })
            .collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::shape(format!("cannot merge datasets of dimension {} and {}", self.dim(), other.dim())));
        }
        let samples = concatenate(Axis(0), &[self.samples.view(), other.samples.view()]).expect("matching widths");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset { samples, labels, split: self.split })
    }

    /// Row order for one pass over the data.
    pub fn shuffled_indices(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }

    /// `label,v1,...,v_dim` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (r, c) in self.samples.rows().into_iter().zip(&self.labels) {
            let mut line = c.to_string();
            for v in r {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
