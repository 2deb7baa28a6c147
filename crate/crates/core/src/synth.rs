//! Synthetic heavy-tailed feature datasets.
//!
//! Each class `j` has a mean `m_j`; sample features over time are
//! `x_t = m_j + a * ramp(t) * v + eps_t` with a per-sample random unit
//! direction `v`, a zero-mean linear ramp, and `eps_t ~ N(0, sigma^2 I)`
//! drawn independently per time step. Class means start as orthonormal
//! directions `u_j`; a confusable pair `(head, tail, alpha)` moves the tail
//! mean to `alpha * m_head + (1 - alpha) * u_tail`, so `alpha` alone sets how
//! much the two classes overlap.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Component, StreamRng};
use crate::tensor::{dot, norm};

/// Training-set class counts of the five-class driving benchmark.
pub const METEOR_COUNTS: [usize; 5] = [5107, 1526, 297, 206, 62];
pub const METEOR_CLASSES: [&str; 5] = ["OT", "DT", "WL", "CT", "YD"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub head: usize,
    pub tail: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_names: Vec<String>,
    pub train_counts: Vec<usize>,
    /// Per-class evaluation counts; empty means balanced at the mean
    /// training count.
    #[serde(default)]
    pub test_counts: Vec<usize>,
    pub d: usize,
    pub t: usize,
    pub confusable_pairs: Vec<ConfusablePair>,
    pub noise_std: f64,
    pub drift: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::invalid("class_names", "need at least one class"));
        }
        if self.train_counts.len() != c {
            return Err(Error::DimensionMismatch {
                field: "train_counts",
                expected: c,
                found: self.train_counts.len(),
            });
        }
        if self.train_counts.contains(&0) {
            return Err(Error::invalid("train_counts", "every class needs at least one sample"));
        }
        if !self.test_counts.is_empty() && self.test_counts.len() != c {
            return Err(Error::DimensionMismatch {
                field: "test_counts",
                expected: c,
                found: self.test_counts.len(),
            });
        }
        if self.t == 0 {
            return Err(Error::invalid("t", "must be at least 1"));
        }
        if self.d < c {
            return Err(Error::invalid("d", format!("need d >= number of classes ({c})")));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std", "must be positive"));
        }
        if !(self.drift >= 0.0) || !self.drift.is_finite() {
            return Err(Error::invalid("drift", "must be non-negative"));
        }
        let mut tails = vec![false; c];
        for (k, p) in self.confusable_pairs.iter().enumerate() {
            let field = format!("confusable_pairs[{k}]");
            if p.head >= c || p.tail >= c || p.head == p.tail {
                return Err(Error::invalid(&field, "head/tail must be distinct valid classes"));
            }
            if !(0.0..=1.0).contains(&p.alpha) {
                return Err(Error::invalid(format!("{field}.alpha"), format!("{} not in [0, 1]", p.alpha)));
            }
            if tails[p.tail] {
                return Err(Error::invalid(&field, "class is already the tail of another pair"));
            }
            tails[p.tail] = true;
        }
        if let Some(p) = self.confusable_pairs.iter().find(|p| tails[p.head]) {
            return Err(Error::invalid(
                "confusable_pairs",
                format!("class {} is both a head and a tail", p.head),
            ));
        }
        Ok(())
    }

    pub fn test_counts(&self) -> Vec<usize> {
        if self.test_counts.is_empty() {
            let mean = self.train_counts.iter().sum::<usize>().div_ceil(self.num_classes());
            vec![mean; self.num_classes()]
        } else {
            self.test_counts.clone()
        }
    }

    /// Orthonormal per-class directions `u_j` (Gram-Schmidt on Gaussian
    /// draws from the generator stream).
    pub fn unique_directions(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, Component::Generator, 0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes());
        while basis.len() < self.num_classes() {
            let mut v: Vec<f64> = (0..self.d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = norm(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        basis
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let u = self.unique_directions();
        let mut means = u.clone();
        for p in &self.confusable_pairs {
            means[p.tail] = means[p.head]
                .iter()
                .zip(&u[p.tail])
                .map(|(h, t)| p.alpha * h + (1.0 - p.alpha) * t)
                .collect();
        }
        means
    }
}

/// Five classes with ceil-scaled benchmark counts, a head-tail pair
/// (0 <-> 3) and a mid-tail pair (1 <-> 2), both at `alpha = 0.9`.
///
/// The evaluation split keeps the unscaled count profile, so it stays
/// imbalanced like the training split but has enough tail samples for
/// stable recall estimates.
pub fn make_meteor_like(scale: usize, d: usize, t: usize, seed: u64) -> Result<SynthSpec> {
    if scale == 0 {
        return Err(Error::invalid("scale", "must be at least 1"));
    }
    Ok(SynthSpec {
        class_names: METEOR_CLASSES.iter().map(|s| s.to_string()).collect(),
        train_counts: METEOR_COUNTS.iter().map(|n| n.div_ceil(scale)).collect(),
        test_counts: METEOR_COUNTS.to_vec(),
        d,
        t,
        confusable_pairs: vec![
            ConfusablePair { head: 0, tail: 3, alpha: 0.9 },
            ConfusablePair { head: 1, tail: 2, alpha: 0.9 },
        ],
        noise_std: 0.3,
        drift: 0.5,
        seed,
    })
}

fn generate_class(
    spec: &SynthSpec,
    mean: &[f64],
    count: usize,
    rng: &mut StreamRng,
) -> Vec<f32> {
    let (t, d) = (spec.t, spec.d);
    let mut out = Vec::with_capacity(count * t * d);
    let mut dir = vec![0.0f64; d];
    for _ in 0..count {
        dir.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let n = norm(&dir).max(1e-12);
        dir.iter_mut().for_each(|v| *v /= n);
        for step in 0..t {
            let ramp = if t > 1 { step as f64 / (t - 1) as f64 - 0.5 } else { 0.0 };
            for k in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                out.push((mean[k] + spec.drift * ramp * dir[k] + spec.noise_std * eps) as f32);
            }
        }
    }
    out
}

fn generate_split(spec: &SynthSpec, means: &[Vec<f64>], counts: &[usize], split: u32) -> Result<FeatureDataset> {
    let blocks: Vec<Vec<f32>> = (0..spec.num_classes())
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(spec.seed, Component::Generator, 1 + 2 * j as u32 + split);
            generate_class(spec, &means[j], counts[j], &mut rng)
        })
        .collect();
    let labels = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j as u32, n))
        .collect();
    let features = blocks.concat();
    let provenance = serde_json::json!({
        "generator": "synth",
        "split": if split == 0 { "train" } else { "test" },
        "spec": spec,
    });
    Ok(FeatureDataset::new(features, labels, spec.class_names.clone(), spec.t, spec.d)?
        .with_provenance(provenance))
}

/// `(train, test)`; identical output for identical specs.
pub fn generate(spec: &SynthSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    spec.validate()?;
    let means = spec.class_means();
    let train = generate_split(spec, &means, &spec.train_counts, 0)?;
    let test = generate_split(spec, &means, &spec.test_counts(), 1)?;
    Ok((train, test))
}
