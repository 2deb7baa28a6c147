//! Wall-clock latency of the aggregate, refine and classify path.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmr::{contribution, temporal_average, Refiner};
use crate::model::{forward, Architecture, ClassifierParams};
use crate::rng::{stream, Component};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub d: usize,
    pub t: usize,
    pub classes: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            d: 2048,
            t: 7,
            classes: 5,
            iterations: 100,
            warmup: 5,
            seed: 7,
        }
    }
}

/// Times in milliseconds. Per-sample figures are batch times divided by `batch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: BenchConfig,
    pub batch_median_ms: f64,
    pub batch_p95_ms: f64,
    pub per_sample_median_ms: f64,
    pub per_sample_p95_ms: f64,
}

impl LatencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of nothing");
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bench_latency(cfg: BenchConfig) -> Result<LatencyReport> {
    if cfg.batch < 2 {
        return Err(Error::BatchTooSmall(cfg.batch));
    }
    if cfg.d == 0 || cfg.t == 0 || cfg.classes < 2 || cfg.iterations == 0 {
        return Err(Error::invalid("bench", "d, t and iterations must be positive and classes at least 2"));
    }
    let mut rng = stream(cfg.seed, Component::Bench, 0);
    let batch = Matrix::from_vec(
        cfg.batch,
        cfg.t * cfg.d,
        (0..cfg.batch * cfg.t * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let labels: Vec<usize> = (0..cfg.batch).map(|i| i % cfg.classes).collect();
    let counts: Vec<u64> = (0..cfg.classes as u64).map(|j| 1000 / (j + 1)).collect();
    let refiner = Refiner {
        table: contribution(&counts, 0.4, 1.0)?,
        p_mix: 0.5,
    };
    let params = ClassifierParams::init(Architecture::Linear, cfg.d, 0, cfg.classes, &mut rng)?;

    let run = |rng: &mut _| -> Result<()> {
        let z = temporal_average(&batch, cfg.t, cfg.d);
        let refined = refiner.refine_aggregated(&z, &labels, rng)?;
        black_box(forward(&params, &refined.features)?);
        Ok(())
    };
    for _ in 0..cfg.warmup {
        run(&mut rng)?;
    }
    let mut times = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let start = Instant::now();
        run(&mut rng)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = crate::pipeline::median(&times);
    let p95 = percentile(&times, 0.95);
    Ok(LatencyReport {
        config: cfg,
        batch_median_ms: median,
        batch_p95_ms: p95,
        per_sample_median_ms: median / cfg.batch as f64,
        per_sample_p95_ms: p95 / cfg.batch as f64,
    })
}
