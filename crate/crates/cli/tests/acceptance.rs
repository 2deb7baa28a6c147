//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use tlmr_core::bench::{bench_latency, BenchConfig};
use tlmr_core::crop::{aspect_bounds, min_area_ratio, sample_crop, CropParams};
use tlmr_core::dataset::FeatureDataset;
use tlmr_core::lmr::{
    contribution, cosine_similarity_matrix, fuse, reconstruct, reconstruction_weights, refine_batch, temporal_average,
    ContributionTable,
};
use tlmr_core::metrics::{average_precision, evaluate};
use tlmr_core::model::{loss_and_grad, Architecture, ClassifierParams};
use tlmr_core::pipeline::{init_params, lmr_refiner, load_or_generate, run_experiment, stage2_setup, BatchMode, Method, StageRunner};
use tlmr_core::rng::{stream, Component, StreamRng};
use tlmr_core::sampling::SamplerSpec;
use tlmr_core::{ExperimentConfig, Matrix, Strategy};

// Pinned tolerances.
const AVG_CA_GAP_MIN: f64 = 3.0;
const OVERALL_ACC_SLACK: f64 = 2.0;
const TAIL_RECALL_GAIN_MIN: f64 = 5.0;
const RUNTIME_BUDGET_S: f64 = 600.0;
const REDUCTION_STEPS: usize = 100;
const CHAIN_TOL: f64 = 1e-4;
const RANDOM_BATCHES: usize = 1000;
const GRAD_FIXTURES: usize = 100;
const GRAD_REL_TOL: f64 = 1e-4;
const SAMPLER_DRAWS: usize = 100_000;
const SAMPLER_TOL: f64 = 0.01;
const CROP_SAMPLES: usize = 100_000;
const METRIC_INSTANCES: usize = 1000;
const LATENCY_MS_MAX: f64 = 3.0;
const LATENCY_ITERATIONS: usize = 100;

const TABLE_COUNTS: [usize; 5] = [5107, 1526, 297, 206, 62];
const CT: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Benchmark {
    ce: (f64, f64, f64),
    crt: (f64, f64, f64),
    tlmr: (f64, f64, f64),
    seconds: f64,
}

/// Median (Avg. C/A, Overall Acc., CT recall) in percent per method.
fn benchmark() -> Benchmark {
    let config = ExperimentConfig::default();
    assert_eq!(config.data.synthetic.scale, 10);
    assert_eq!(config.data.synthetic.alpha, 0.9);
    assert_eq!(config.data.synthetic.noise_std, 0.3);
    assert_eq!(config.num_seeds, 5);
    let (train, _) = load_or_generate(&config, 0).expect("data");
    assert_eq!(train.class_counts(), [511, 153, 30, 21, 7]);
    let start = Instant::now();
    let report = run_experiment(&config).expect("experiment runs");
    let seconds = start.elapsed().as_secs_f64();
    let pick = |m: Method| {
        let s = report.summary(m);
        (s.avg_class_acc * 100.0, s.overall_acc * 100.0, s.per_class_acc[CT].expect("CT evaluated") * 100.0)
    };
    Benchmark {
        ce: pick(Method::Ce),
        crt: pick(Method::Crt),
        tlmr: pick(Method::Tlmr),
        seconds,
    }
}

fn criterion_1(b: &Benchmark) -> Outcome {
    let gap = b.tlmr.0 - b.ce.0;
    let acc_drop = b.ce.1 - b.tlmr.1;
    let pass = gap >= AVG_CA_GAP_MIN && acc_drop <= OVERALL_ACC_SLACK && b.seconds <= RUNTIME_BUDGET_S;
    outcome(
        pass,
        format!(
            "Avg. C/A CE {:.2} -> TLMR {:.2} (gap {gap:+.2}, need >= {AVG_CA_GAP_MIN}); Overall Acc. CE {:.2} -> TLMR {:.2} (drop {acc_drop:.2}, need <= {OVERALL_ACC_SLACK}); {:.1}s",
            b.ce.0, b.tlmr.0, b.ce.1, b.tlmr.1, b.seconds
        ),
    )
}

fn criterion_2(b: &Benchmark) -> Outcome {
    let (ce, crt, tlmr) = (b.ce.0, b.crt.0, b.tlmr.0);
    outcome(
        crt >= ce && tlmr >= crt,
        format!(
            "median Avg. C/A CE {ce:.2}, cRT {crt:.2}, TLMR {tlmr:.2}; cRT >= CE {}, TLMR >= cRT {}",
            crt >= ce,
            tlmr >= crt
        ),
    )
}

fn criterion_3(b: &Benchmark) -> Outcome {
    let gain = b.tlmr.2 - b.ce.2;
    outcome(
        gain >= TAIL_RECALL_GAIN_MIN,
        format!("CT recall CE {:.2} -> TLMR {:.2} (gain {gain:+.2}, need >= {TAIL_RECALL_GAIN_MIN})", b.ce.2, b.tlmr.2),
    )
}

fn criterion_4() -> Outcome {
    let mut config = ExperimentConfig::default();
    config.lmr.w_rec = 0.0;
    config.lmr.p_mix = 0.0;
    let (ds, _) = load_or_generate(&config, 0).expect("data");
    let start = init_params(&config, &ds, 0).expect("init");
    let refiner = lmr_refiner(&config, &ds).expect("refiner");
    let mut crt = StageRunner::new(&ds, start.clone(), 0, stage2_setup(&config, BatchMode::Plain)).expect("runner");
    let mut lmr = StageRunner::new(&ds, start, 0, stage2_setup(&config, BatchMode::Lmr(refiner))).expect("runner");
    for step in 0..REDUCTION_STEPS {
        let (a, b) = (crt.step().expect("step"), lmr.step().expect("step"));
        if a.to_bits() != b.to_bits() || crt.params() != lmr.params() {
            return outcome(false, format!("trajectories diverge at step {step}"));
        }
    }
    outcome(true, format!("{REDUCTION_STEPS} steps, parameters bit-identical after every step"))
}

/// Similarity, weights, reconstruction and fusion by direct summation.
fn brute_chain(z: &[Vec<f64>], c: &[f64]) -> [Vec<Vec<f64>>; 4] {
    let b = z.len();
    let d = z[0].len();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let s: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| {
                    let den = norm(&z[i]) * norm(&z[j]);
                    if den == 0.0 {
                        0.0
                    } else {
                        (0..d).map(|k| z[i][k] * z[j][k]).sum::<f64>() / den
                    }
                })
                .collect()
        })
        .collect();
    let w: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let den: f64 = (0..b).filter(|&k| k != i).map(|k| s[i][k].exp()).sum();
            (0..b).map(|j| if j == i { 0.0 } else { s[i][j].exp() / den }).collect()
        })
        .collect();
    let r: Vec<Vec<f64>> = (0..b).map(|i| (0..d).map(|k| (0..b).map(|j| w[i][j] * z[j][k]).sum()).collect()).collect();
    let m = (0..b).map(|i| (0..d).map(|k| c[i] * r[i][k] + (1.0 - c[i]) * z[i][k]).collect()).collect();
    [s, w, r, m]
}

fn criterion_5() -> Outcome {
    // worked chain
    let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
    let z = Matrix::from_rows(&rows);
    let table = ContributionTable { c: vec![0.4, 0.0], w_rec: 0.4, decay: 1.0 };
    let [s_o, w_o, r_o, m_o] = brute_chain(&rows, &[0.4, 0.0, 0.0]);
    let s = cosine_similarity_matrix(&z);
    let w = reconstruction_weights(&s);
    let r = reconstruct(&z, &w);
    let m = fuse(&z, &r, &table, &[0, 1, 1]);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                worst = worst.max((s.get(i, j) - s_o[i][j]).abs());
            }
            worst = worst.max((w.matrix().get(i, j) - w_o[i][j]).abs());
        }
        for k in 0..2 {
            worst = worst.max((r.get(i, k) - r_o[i][k]).abs()).max((m.get(i, k) - m_o[i][k]).abs());
        }
    }
    if worst > CHAIN_TOL {
        return outcome(false, format!("worked chain deviates by {worst:.2e}"));
    }

    // randomized property suites
    let mut rng = stream(55, Component::Bench, 1);
    let counts = [400u64, 90, 12, 3];
    let contrib = contribution(&counts, 0.4, 1.0).expect("table");
    for batch_no in 0..RANDOM_BATCHES {
        let b = rng.random_range(2..12);
        let d = rng.random_range(1..8);
        let t = rng.random_range(1..6);
        let raw: Vec<f64> = (0..b * t * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
        let batch = Matrix::from_vec(b, t * d, raw.clone());
        let fail = |what: &str| outcome(false, format!("batch {batch_no}: {what}"));

        let z = temporal_average(&batch, t, d);
        for i in 0..b {
            for k in 0..d {
                let naive = (0..t).map(|s| raw[i * t * d + s * d + k]).sum::<f64>() / t as f64;
                if (z.get(i, k) - naive).abs() > 1e-12 {
                    return fail("temporal average differs from naive mean");
                }
            }
        }
        let w = reconstruction_weights(&cosine_similarity_matrix(&z));
        for i in 0..b {
            let sum: f64 = w.matrix().row(i).iter().sum();
            if w.matrix().get(i, i) != 0.0 || (sum - 1.0).abs() > 1e-12 || w.matrix().row(i).iter().any(|&v| v < 0.0) {
                return fail("weights not row-stochastic with zero diagonal");
            }
        }
        let r = reconstruct(&z, &w);
        let m = fuse(&z, &r, &contrib, &labels);
        for i in 0..b {
            let c = contrib.get(labels[i]);
            for k in 0..d {
                let (lo, hi) = (z.get(i, k).min(r.get(i, k)), z.get(i, k).max(r.get(i, k)));
                let v = m.get(i, k);
                if v < lo - 1e-12 || v > hi + 1e-12 || (v - (c * r.get(i, k) + (1.0 - c) * z.get(i, k))).abs() > 1e-12 {
                    return fail("fusion is not the convex combination");
                }
            }
        }
        let p_mix = rng.random_range(0.0..=1.0);
        let mut mix_rng: StreamRng = stream(batch_no as u64, Component::Mixer, 0);
        let out = refine_batch(&batch, t, d, &labels, &contrib, p_mix, &mut mix_rng).expect("refine");
        let y = out.soft_labels.matrix();
        for i in 0..b {
            if (y.row(i).iter().sum::<f64>() - 1.0).abs() > 1e-12 || y.row(i).iter().any(|&v| v < 0.0) {
                return fail("mixed labels lose mass");
            }
        }
    }
    outcome(true, format!("worked chain within {worst:.1e} of brute force; {RANDOM_BATCHES} random batches pass all properties"))
}

fn soft_ce_oracle(arch: Architecture, dims: (usize, usize, usize), t: &[Vec<f64>], x: &Matrix, y: &Matrix) -> f64 {
    let (d, h, c) = dims;
    let mut total = 0.0;
    for i in 0..x.rows() {
        let xi = x.row(i);
        let logits: Vec<f64> = match arch {
            Architecture::Linear => (0..c).map(|j| t[1][j] + (0..d).map(|k| xi[k] * t[0][k * c + j]).sum::<f64>()).collect(),
            Architecture::Mlp => {
                let hid: Vec<f64> =
                    (0..h).map(|u| (t[1][u] + (0..d).map(|k| xi[k] * t[0][k * h + u]).sum::<f64>()).tanh()).collect();
                (0..c).map(|j| t[3][j] + (0..h).map(|u| hid[u] * t[2][u * c + j]).sum::<f64>()).collect()
            }
        };
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        for j in 0..c {
            total -= y.get(i, j) * (logits[j] - lse).max(1e-12f64.ln());
        }
    }
    total / x.rows() as f64
}

fn criterion_6() -> Outcome {
    let mut rng = stream(66, Component::Bench, 2);
    let mut worst: f64 = 0.0;
    for fixture in 0..GRAD_FIXTURES {
        let arch = if fixture % 2 == 0 { Architecture::Linear } else { Architecture::Mlp };
        let (d, h, c, b) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(2..=6), rng.random_range(1..=6));
        let sizes = match arch {
            Architecture::Linear => vec![d * c, c],
            Architecture::Mlp => vec![d * h, h, h * c, c],
        };
        let tensors: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let params = ClassifierParams::from_tensors(arch, d, h, c, tensors.clone()).expect("params");
        let x = Matrix::from_vec(b, d, (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let mut y = Matrix::zeros(b, c);
        for i in 0..b {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            (0..c).for_each(|j| y.set(i, j, raw[j] / s));
        }
        let (_, grads) = loss_and_grad(&params, &x, &y).expect("grad");
        let eps = 1e-5;
        for (ti, tensor) in tensors.iter().enumerate() {
            for k in 0..tensor.len() {
                let (mut plus, mut minus) = (tensors.clone(), tensors.clone());
                plus[ti][k] += eps;
                minus[ti][k] -= eps;
                let numeric = (soft_ce_oracle(arch, (d, h, c), &plus, &x, &y) - soft_ce_oracle(arch, (d, h, c), &minus, &x, &y)) / (2.0 * eps);
                let analytic = grads.tensors[ti][k];
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
            }
        }
    }
    outcome(worst <= GRAD_REL_TOL, format!("{GRAD_FIXTURES} fixtures, worst relative error {worst:.2e} (need <= {GRAD_REL_TOL:.0e})"))
}

fn criterion_7() -> Outcome {
    let labels: Vec<u32> = TABLE_COUNTS.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j as u32, n)).collect();
    let total = labels.len() as f64;
    let names = (0..5).map(|j| format!("c{j}")).collect();
    let ds = FeatureDataset::new(vec![0.0; labels.len()], labels, names, 1, 1).expect("dataset");
    let mut worst: f64 = 0.0;
    for (strategy, index) in [(Strategy::Ib, 0u32), (Strategy::Cb, 1)] {
        let sampler = SamplerSpec::new(&ds, strategy).expect("sampler");
        let mut rng = stream(77, Component::Sampler, index);
        let mut hist = [0usize; 5];
        for i in sampler.sample_batch(SAMPLER_DRAWS, &mut rng) {
            hist[ds.label(i)] += 1;
        }
        for j in 0..5 {
            let expected = match strategy {
                Strategy::Ib => TABLE_COUNTS[j] as f64 / total,
                Strategy::Cb => 0.2,
            };
            worst = worst.max((hist[j] as f64 / SAMPLER_DRAWS as f64 - expected).abs());
        }
    }
    outcome(worst <= SAMPLER_TOL, format!("IB and CB over {SAMPLER_DRAWS} draws, worst deviation {worst:.4} (need <= {SAMPLER_TOL})"))
}

fn criterion_8() -> Outcome {
    let p = CropParams::default();
    let (a_min, _) = aspect_bounds(1920, 1080, p);
    if a_min != 1.6 || min_area_ratio(p) != 0.54 {
        return outcome(false, format!("A_min {a_min}, AR_min {}", min_area_ratio(p)));
    }
    for (w, h) in [(1920u32, 1080u32), (1280, 720)] {
        let (lo, hi) = aspect_bounds(w, h, p);
        let mut rng = stream(88, Component::Crop, w);
        for _ in 0..CROP_SAMPLES {
            let r = sample_crop(w, h, p, &mut rng);
            let ok = r.x + r.cw <= w
                && r.y + r.ch <= h
                && r.cw as f64 >= 0.9 * w as f64
                && r.ch as f64 >= 0.6 * h as f64
                && r.area_ratio(w, h) >= 0.54 * (1.0 - 2.0 / h as f64)
                && (r.cw as f64 + 2.0) / (r.ch as f64 - 2.0) >= lo
                && (r.cw as f64 - 2.0) / (r.ch as f64 + 2.0) <= hi;
            if !ok {
                return outcome(false, format!("{w}x{h}: {r:?} violates bounds"));
            }
        }
    }
    outcome(true, format!("A_min = 1.6, AR_min = 0.54 exactly; {CROP_SAMPLES} rects at each of 1920x1080 and 1280x720 within bounds"))
}

fn naive_ap(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&k| scores[k] > scores[i] || (scores[k] == scores[i] && k < i)).count();
    let mut ranks: Vec<usize> = (0..n).filter(|&i| positives[i]).map(rank).collect();
    if ranks.is_empty() {
        return None;
    }
    ranks.sort();
    let sum: f64 = ranks.iter().enumerate().map(|(hits, &r)| (hits + 1) as f64 / r as f64).sum();
    Some(sum / ranks.len() as f64)
}

fn criterion_9() -> Outcome {
    let mut rng = stream(99, Component::Bench, 3);
    for instance in 0..METRIC_INSTANCES {
        let n = rng.random_range(1..=50);
        let c = rng.random_range(2..=6);
        let scores = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.random_range(0..8) as f64 / 4.0).collect());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let names: Vec<String> = (0..c).map(|j| format!("k{j}")).collect();
        let report = evaluate(&scores, &labels, &names).expect("evaluate");
        let mut defined = Vec::new();
        for j in 0..c {
            let col: Vec<f64> = (0..n).map(|i| scores.get(i, j)).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == j).collect();
            let want = naive_ap(&col, &pos);
            if average_precision(&col, &pos) != want || report.per_class_ap[j] != want {
                return outcome(false, format!("instance {instance} class {j}: AP differs from naive"));
            }
            defined.extend(want);
        }
        if report.overall_map != defined.iter().sum::<f64>() / defined.len() as f64 {
            return outcome(false, format!("instance {instance}: mAP differs from naive"));
        }
    }
    let scores = Matrix::from_rows(&vec![vec![1.0, 0.0]; 10]);
    let labels: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
    let r = evaluate(&scores, &labels, &["head".into(), "tail".into()]).expect("evaluate");
    let ok = (r.overall_acc - 0.9).abs() < 1e-12 && (r.avg_class_acc - 0.5).abs() < 1e-12;
    outcome(
        ok,
        format!(
            "{METRIC_INSTANCES} instances exact; imbalance fixture Overall Acc. {:.2} vs Avg. C/A {:.2}",
            r.overall_acc, r.avg_class_acc
        ),
    )
}

fn criterion_10() -> Outcome {
    let report = bench_latency(BenchConfig {
        batch: 64,
        d: 2048,
        t: 7,
        iterations: LATENCY_ITERATIONS,
        ..BenchConfig::default()
    })
    .expect("bench");
    outcome(
        report.per_sample_median_ms <= LATENCY_MS_MAX,
        format!(
            "B=64 D=2048 T=7: median {:.4} ms/sample over {LATENCY_ITERATIONS} iterations (p95 {:.4}; need <= {LATENCY_MS_MAX})",
            report.per_sample_median_ms, report.per_sample_p95_ms
        ),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    for run in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_tlmr"))
            .args(["compare", "--seed", "7", "--quiet", "--out"])
            .arg(dir.path().join(run))
            .status()
            .expect("spawn");
        if !status.success() {
            return outcome(false, format!("compare exited with {status}"));
        }
    }
    for file in ["comparison.json", "comparison.csv", "plot_data.csv", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(file)).expect("read");
        let b = std::fs::read(dir.path().join("b").join(file)).expect("read");
        if a != b {
            return outcome(false, format!("{file} differs between runs"));
        }
    }
    outcome(true, "two `compare --seed 7` runs: comparison.json, comparison.csv, plot_data.csv byte-identical")
}

fn main() -> ExitCode {
    let bench = benchmark();
    let results = [
        ("directional heavy-tail claim", criterion_1(&bench)),
        ("baseline ordering", criterion_2(&bench)),
        ("tail rescue", criterion_3(&bench)),
        ("reduction identity", criterion_4()),
        ("refinement micro-oracle", criterion_5()),
        ("gradient correctness", criterion_6()),
        ("sampler fidelity", criterion_7()),
        ("crop geometry", criterion_8()),
        ("metrics oracle", criterion_9()),
        ("latency", criterion_10()),
        ("determinism", criterion_11()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("[{}] {:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
