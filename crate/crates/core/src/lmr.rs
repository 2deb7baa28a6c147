//! Temporal aggregation and long-tailed mixed reconstruction (LMR).
//!
//! Training-time refinement of a batch of aggregated features:
//!
//! 1. cosine similarity between every pair of batch rows,
//! 2. softmax over each row's partners (self excluded) gives reconstruction
//!    weights,
//! 3. each row is rebuilt as the weighted sum of its partners,
//! 4. original and rebuilt rows are blended by a per-class contribution that
//!    is zero for the most frequent class and `w_rec` for the rarest,
//! 5. rows are mixed pairwise with a random partner, along with their labels.
//!
//! Nothing here is used at inference.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SoftLabelMatrix;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{dot, norm, Matrix};

/// Mean over the time axis of a `B x (T*D)` batch laid out (time, channel).
pub fn temporal_average(batch: &Matrix, t: usize, d: usize) -> Matrix {
    assert!(t >= 1, "need at least one time step");
    assert_eq!(batch.cols(), t * d, "batch width must be T*D");
    let mut out = Matrix::zeros(batch.rows(), d);
    let inv = 1.0 / t as f64;
    for i in 0..batch.rows() {
        let src = batch.row(i);
        let dst = out.row_mut(i);
        for step in src.chunks_exact(d) {
            for (acc, v) in dst.iter_mut().zip(step) {
                *acc += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Pairwise cosine similarity. The diagonal holds `-inf` so the softmax
/// ignores it; rows with zero norm have similarity 0 to everything.
pub fn cosine_similarity_matrix(z: &Matrix) -> Matrix {
    let b = z.rows();
    let norms: Vec<f64> = z.iter_rows().map(norm).collect();
    let mut s = Matrix::zeros(b, b);
    for i in 0..b {
        s.set(i, i, f64::NEG_INFINITY);
        for j in i + 1..b {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                dot(z.row(i), z.row(j)) / (norms[i] * norms[j])
            };
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// Row-stochastic `B x B` weights with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionWeights(Matrix);

impl ReconstructionWeights {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn reconstruction_weights(s: &Matrix) -> ReconstructionWeights {
    let b = s.rows();
    let mut w = Matrix::zeros(b, b);
    for i in 0..b {
        let row = s.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let out = w.row_mut(i);
        let mut total = 0.0;
        for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
            if j != i {
                *o = (v - max).exp();
                total += *o;
            }
        }
        if total > 0.0 {
            for o in out.iter_mut() {
                *o /= total;
            }
        }
    }
    ReconstructionWeights(w)
}

/// `R_i = sum_{j != i} W_ij Z_j`
pub fn reconstruct(z: &Matrix, w: &ReconstructionWeights) -> Matrix {
    let w = w.matrix();
    assert_eq!(w.rows(), z.rows());
    let mut r = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let out = r.row_mut(i);
        for (j, &wij) in w.row(i).iter().enumerate() {
            if j == i || wij == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(z.row(j)) {
                *o += wij * v;
            }
        }
    }
    r
}

/// Per-class blend factor between original and reconstructed features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionTable {
    pub c: Vec<f64>,
    pub w_rec: f64,
    pub decay: f64,
}

impl ContributionTable {
    pub fn get(&self, class: usize) -> f64 {
        self.c[class]
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|&v| v == 0.0)
    }
}

/// `c_j = w_rec * ((n_max - n_j) / (n_max - n_min))^decay`, with `n_max`
/// and `n_min` taken over classes that have samples. The ratio is clamped to
/// `[0, 1]`, so empty classes get `w_rec`. The most frequent class always
/// gets 0, including at `decay = 0`.
pub fn contribution(counts: &[u64], w_rec: f64, decay: f64) -> Result<ContributionTable> {
    if !(0.0..=1.0).contains(&w_rec) {
        return Err(Error::invalid("w_rec", format!("{w_rec} not in [0, 1]")));
    }
    if !(decay >= 0.0) || !decay.is_finite() {
        return Err(Error::invalid("decay", format!("{decay} must be finite and >= 0")));
    }
    let positive = counts.iter().copied().filter(|&n| n > 0);
    let n_max = positive.clone().max().ok_or_else(|| {
        Error::invalid("class_counts", "need at least one class with samples")
    })?;
    let n_min = positive.min().unwrap();
    let c = if n_max == n_min {
        vec![0.0; counts.len()]
    } else {
        let span = (n_max - n_min) as f64;
        counts
            .iter()
            .map(|&n| {
                let ratio = ((n_max as f64 - n as f64) / span).clamp(0.0, 1.0);
                if ratio == 0.0 {
                    0.0
                } else {
                    w_rec * ratio.powf(decay)
                }
            })
            .collect()
    };
    Ok(ContributionTable { c, w_rec, decay })
}

/// `M_i = c(y_i) R_i + (1 - c(y_i)) Z_i`
pub fn fuse(z: &Matrix, r: &Matrix, table: &ContributionTable, labels: &[usize]) -> Matrix {
    assert_eq!(z.rows(), r.rows());
    assert_eq!(z.cols(), r.cols());
    assert_eq!(z.rows(), labels.len());
    let mut m = z.clone();
    for (i, &y) in labels.iter().enumerate() {
        let c = table.get(y);
        if c == 0.0 {
            continue;
        }
        for (o, (&zv, &rv)) in m.row_mut(i).iter_mut().zip(z.row(i).iter().zip(r.row(i))) {
            *o = c * rv + (1.0 - c) * zv;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedBatch {
    pub features: Matrix,
    pub soft_labels: SoftLabelMatrix,
}

/// Partner assignment and per-row mixing coefficient. `None` leaves the
/// row untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub partners: Vec<usize>,
    pub lambdas: Vec<Option<f64>>,
}

impl MixPlan {
    /// Uniform permutation for partners; each row mixes with probability
    /// `p_mix` using `lambda ~ U[0.5, 1]`.
    pub fn draw(b: usize, p_mix: f64, rng: &mut StreamRng) -> Self {
        let mut partners: Vec<usize> = (0..b).collect();
        partners.shuffle(rng);
        let lambdas = (0..b)
            .map(|_| {
                let coin: f64 = rng.random();
                let lambda: f64 = rng.random_range(0.5..=1.0);
                (coin < p_mix).then_some(lambda)
            })
            .collect();
        Self { partners, lambdas }
    }
}

pub fn apply_mix(m: &Matrix, labels: &[usize], classes: usize, plan: &MixPlan) -> RefinedBatch {
    let b = m.rows();
    assert_eq!(labels.len(), b);
    assert_eq!(plan.partners.len(), b);
    let mut features = m.clone();
    let mut y = Matrix::zeros(b, classes);
    for i in 0..b {
        match plan.lambdas[i] {
            Some(lambda) => {
                let k = plan.partners[i];
                for (o, (&a, &p)) in features.row_mut(i).iter_mut().zip(m.row(i).iter().zip(m.row(k))) {
                    *o = lambda * a + (1.0 - lambda) * p;
                }
                let row = y.row_mut(i);
                row[labels[i]] += lambda;
                row[labels[k]] += 1.0 - lambda;
            }
            None => y.set(i, labels[i], 1.0),
        }
    }
    RefinedBatch {
        features,
        soft_labels: SoftLabelMatrix::new_unchecked(y),
    }
}

pub fn pairwise_mix(
    m: &Matrix,
    labels: &[usize],
    classes: usize,
    p_mix: f64,
    rng: &mut StreamRng,
) -> RefinedBatch {
    let plan = MixPlan::draw(m.rows(), p_mix, rng);
    apply_mix(m, labels, classes, &plan)
}

thread_local! {
    static REFINE_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Refinement passes run so far on the current thread.
pub fn refine_calls() -> u64 {
    REFINE_CALLS.with(|c| c.get())
}

/// Settings for one refinement pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    pub table: ContributionTable,
    pub p_mix: f64,
}

impl Refiner {
    /// Runs the refinement chain on already-aggregated `B x D` features.
    pub fn refine_aggregated(
        &self,
        z: &Matrix,
        labels: &[usize],
        rng: &mut StreamRng,
    ) -> Result<RefinedBatch> {
        if z.rows() < 2 {
            return Err(Error::BatchTooSmall(z.rows()));
        }
        REFINE_CALLS.with(|c| c.set(c.get() + 1));
        let classes = self.table.c.len();
        let m = if self.table.is_zero() {
            z.clone()
        } else {
            let s = cosine_similarity_matrix(z);
            let w = reconstruction_weights(&s);
            let r = reconstruct(z, &w);
            fuse(z, &r, &self.table, labels)
        };
        Ok(pairwise_mix(&m, labels, classes, self.p_mix, rng))
    }
}

/// Aggregate a `B x (T*D)` batch over time, then refine it.
pub fn refine_batch(
    batch: &Matrix,
    t: usize,
    d: usize,
    labels: &[usize],
    table: &ContributionTable,
    p_mix: f64,
    rng: &mut StreamRng,
) -> Result<RefinedBatch> {
    if batch.rows() < 2 {
        return Err(Error::BatchTooSmall(batch.rows()));
    }
    let z = temporal_average(batch, t, d);
    let refiner = Refiner {
        table: table.clone(),
        p_mix,
    };
    refiner.refine_aggregated(&z, labels, rng)
}
