//! The shrinking training pool and its class-balanced sampling weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Weight `1 / count(class)`: every remaining class is drawn equally often.
    #[default]
    Balanced,
    /// Every remaining sample equally likely, so classes are drawn in
    /// proportion to their remaining counts.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPool {
    indices: Vec<usize>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    weights: Vec<f64>,
    sampling: Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShrinkOutcome {
    Continue,
    /// The remaining pool fell below the minimum size.
    CascadeComplete,
}

impl TrainingPool {
    /// A pool over every sample of a dataset with the given labels.
    pub fn full(labels: &[usize], num_classes: usize, sampling: Sampling) -> Result<Self> {
        Self::from_indices((0..labels.len()).collect(), labels, num_classes, sampling)
    }

    /// A pool over `indices` (sorted, distinct) into `all_labels`.
    pub fn from_indices(indices: Vec<usize>, all_labels: &[usize], num_classes: usize, sampling: Sampling) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("pool indices must be sorted and distinct".into()));
        }
        let mut labels = Vec::with_capacity(indices.len());
        let mut class_counts = vec![0; num_classes];
        for &i in &indices {
            let l = *all_labels
                .get(i)
                .ok_or_else(|| Error::Contract(format!("pool index {i} outside dataset of {}", all_labels.len())))?;
            if l >= num_classes {
                return Err(Error::Data(format!("label {l} at index {i} is outside [0, {num_classes})")));
            }
            class_counts[l] += 1;
            labels.push(l);
        }
        let mut pool = TrainingPool {
            indices,
            labels,
            class_counts,
            weights: Vec::new(),
            sampling,
        };
        pool.reweight();
        Ok(pool)
    }

    fn reweight(&mut self) {
        let raw: Vec<f64> = match self.sampling {
            Sampling::Balanced => self.labels.iter().map(|&l| 1.0 / self.class_counts[l] as f64).collect(),
            Sampling::Literal => vec![1.0; self.labels.len()],
        };
        let total: f64 = raw.iter().sum();
        self.weights = raw.into_iter().map(|w| w / total).collect();
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Dataset indices, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling
    }

    /// `count` dataset indices drawn with replacement under the pool weights.
    pub fn draw(&self, rng: &mut RandomStream, count: usize) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Contract("cannot draw from an empty pool".into()));
        }
        Ok(rng
            .weighted_draws(&self.weights, count)?
            .into_iter()
            .map(|k| self.indices[k])
            .collect())
    }

    /// Removes `learned` (sorted dataset indices, all in the pool) and
    /// recomputes weights. Signals completion when fewer than `min_size`
    /// samples remain.
    pub fn shrink(&self, learned: &[usize], min_size: usize) -> Result<(TrainingPool, ShrinkOutcome)> {
        let mut keep = Vec::with_capacity(self.len());
        let mut li = learned.iter().peekable();
        for (k, &i) in self.indices.iter().enumerate() {
            if li.peek() == Some(&&i) {
                li.next();
            } else {
                keep.push(k);
            }
        }
        if let Some(&stray) = li.next() {
            return Err(Error::Contract(format!(
                "learned index {stray} is not in the pool (or learned set is unsorted)"
            )));
        }
        let next = if keep.len() == self.len() {
            self.clone()
        } else {
            let mut class_counts = vec![0; self.class_counts.len()];
            for &k in &keep {
                class_counts[self.labels[k]] += 1;
            }
            let mut p = TrainingPool {
                indices: keep.iter().map(|&k| self.indices[k]).collect(),
                labels: keep.iter().map(|&k| self.labels[k]).collect(),
                class_counts,
                weights: Vec::new(),
                sampling: self.sampling,
            };
            p.reweight();
            p
        };
        let outcome = if next.len() < min_size.max(1) {
            ShrinkOutcome::CascadeComplete
        } else {
            ShrinkOutcome::Continue
        };
        Ok((next, outcome))
    }

    /// Probability that a single draw lands in each class.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.class_counts.len()];
        for (&l, &w) in self.labels.iter().zip(&self.weights) {
            p[l] += w;
        }
        p
    }
}
