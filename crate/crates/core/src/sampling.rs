//! Instance-balanced and class-balanced batch samplers.
//!
//! Both draw i.i.d. with replacement: a class first, from the strategy's
//! class distribution, then a uniform member of that class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Instance-balanced: class probability proportional to its count.
    Ib,
    /// Class-balanced: every class equally likely.
    Cb,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Ib => "ib",
            Strategy::Cb => "cb",
        })
    }
}

/// `p_j = n_j / sum(n)`
pub fn ib_probabilities(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class_counts", "all class counts are zero"));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `p_j = 1 / C`
pub fn cb_probabilities(classes: usize) -> Result<Vec<f64>> {
    if classes == 0 {
        return Err(Error::invalid("classes", "need at least one class"));
    }
    Ok(vec![1.0 / classes as f64; classes])
}

#[derive(Clone, Debug)]
pub struct SamplerSpec {
    strategy: Strategy,
    class_index_lists: Vec<Vec<usize>>,
    class_probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SamplerSpec {
    pub fn new(ds: &FeatureDataset, strategy: Strategy) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("dataset", "cannot sample from an empty dataset"));
        }
        let class_probs = match strategy {
            Strategy::Ib => ib_probabilities(ds.class_counts())?,
            Strategy::Cb => cb_probabilities(ds.num_classes())?,
        };
        Self::from_parts(strategy, ds.class_index_lists(), class_probs)
    }

    pub fn from_parts(
        strategy: Strategy,
        class_index_lists: Vec<Vec<usize>>,
        class_probs: Vec<f64>,
    ) -> Result<Self> {
        if class_index_lists.len() != class_probs.len() {
            return Err(Error::DimensionMismatch {
                field: "class_probs",
                expected: class_index_lists.len(),
                found: class_probs.len(),
            });
        }
        let total: f64 = class_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || class_probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("class_probs", format!("not a distribution (sum {total})")));
        }
        for (class, (list, &prob)) in class_index_lists.iter().zip(&class_probs).enumerate() {
            if prob > 0.0 && list.is_empty() {
                return Err(Error::EmptyClass { class, prob });
            }
        }
        let mut acc = 0.0;
        let cumulative = class_probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            strategy,
            class_index_lists,
            class_probs,
            cumulative,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    fn draw_class(&self, rng: &mut StreamRng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        let mut class = self.cumulative.partition_point(|&c| c <= u);
        // guard against u landing on the final edge, and skip zero-mass classes
        class = class.min(self.class_probs.len() - 1);
        while self.class_probs[class] == 0.0 {
            class -= 1;
        }
        class
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut StreamRng) -> Vec<usize> {
        (0..batch_size)
            .map(|_| {
                let list = &self.class_index_lists[self.draw_class(rng)];
                list[rng.random_range(0..list.len())]
            })
            .collect()
    }
}
