//! Two-stage training and baselines.
//!
//! * `ce`: stage 1 only, instance-balanced sampling and cross-entropy.
//! * `crt`: stage 1, then class-balanced fine-tuning with cross-entropy at
//!   the reduced learning rate, starting from the stage-1 weights.
//! * `tlmr`: stage 1, then class-balanced fine-tuning where every batch is
//!   aggregated over time, refined by LMR and trained with soft
//!   cross-entropy on the mixed labels.
//!
//! Evaluation always runs the plain aggregate-then-classify path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, FeatureDataset, SoftLabelMatrix};
use crate::error::{Error, Result};
use crate::lmr::{contribution, temporal_average, Refiner};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{forward, loss_and_grad, sgd_step, ClassifierParams, OptimizerState};
use crate::rng::{run_seed, stream, Component, StreamRng};
use crate::sampling::{SamplerSpec, Strategy};
use crate::synth::{generate, make_meteor_like, SynthSpec};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ce,
    Crt,
    Tlmr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ce, Method::Crt, Method::Tlmr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Crt => "crt",
            Method::Tlmr => "tlmr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ce => "CE",
            Method::Crt => "cRT",
            Method::Tlmr => "Transfer-LMR",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Method::Ce),
            "crt" => Ok(Method::Crt),
            "tlmr" => Ok(Method::Tlmr),
            other => Err(Error::invalid("method", format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub train_avg_class_acc: f64,
    pub train_overall_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub run_seed: u64,
    pub method: Method,
    pub log: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ClassifierParams,
    pub provenance: Provenance,
}

/// Hex SHA-256 of the resolved config's TOML form.
pub fn config_hash(config: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(config.resolved().to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_dims(params: &ClassifierParams, ds: &FeatureDataset) -> Result<()> {
    if params.input_dim() != ds.channels() {
        return Err(Error::DimensionMismatch {
            field: "d",
            expected: params.input_dim(),
            found: ds.channels(),
        });
    }
    if params.num_classes() != ds.num_classes() {
        return Err(Error::DimensionMismatch {
            field: "c",
            expected: params.num_classes(),
            found: ds.num_classes(),
        });
    }
    Ok(())
}

/// How each sampled batch is turned into classifier inputs and targets.
#[derive(Clone, Debug)]
pub enum BatchMode {
    /// Aggregate over time; one-hot targets.
    Plain,
    /// Aggregate over time, then LMR-refine; mixed soft targets.
    Lmr(Refiner),
}

/// One training stage, stepped one mini-batch at a time.
pub struct StageRunner<'a> {
    ds: &'a FeatureDataset,
    params: ClassifierParams,
    opt: OptimizerState,
    sampler: SamplerSpec,
    sampler_rng: StreamRng,
    mixer_rng: StreamRng,
    augment_rng: StreamRng,
    batch_size: usize,
    feature_noise: f64,
    mode: BatchMode,
}

#[derive(Clone, Debug)]
pub struct StageSetup {
    pub stage: u32,
    pub strategy: Strategy,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub feature_noise: f64,
    pub train_extractor: bool,
    pub mode: BatchMode,
}

impl<'a> StageRunner<'a> {
    /// Random streams are keyed by `(run_seed, stage)`, so two runners for
    /// the same stage and seed see the same batches.
    pub fn new(ds: &'a FeatureDataset, params: ClassifierParams, run_seed: u64, setup: StageSetup) -> Result<Self> {
        check_dims(&params, ds)?;
        if matches!(setup.mode, BatchMode::Lmr(_)) && setup.batch_size < 2 {
            return Err(Error::BatchTooSmall(setup.batch_size));
        }
        let mut opt = OptimizerState::new(&params, setup.lr, setup.momentum);
        if !setup.train_extractor {
            opt = opt.freeze_extractor(&params);
        }
        Ok(Self {
            ds,
            sampler: SamplerSpec::new(ds, setup.strategy)?,
            sampler_rng: stream(run_seed, Component::Sampler, setup.stage),
            mixer_rng: stream(run_seed, Component::Mixer, setup.stage),
            augment_rng: stream(run_seed, Component::Augment, setup.stage),
            params,
            opt,
            batch_size: setup.batch_size,
            feature_noise: setup.feature_noise,
            mode: setup.mode,
        })
    }

    /// Inputs and targets for the next batch, without updating anything.
    fn next_batch(&mut self) -> Result<(Matrix, SoftLabelMatrix)> {
        let idx = self.sampler.sample_batch(self.batch_size, &mut self.sampler_rng);
        let (raw, labels) = self.ds.gather(&idx);
        let mut z = temporal_average(&raw, self.ds.time_steps(), self.ds.channels());
        if self.feature_noise > 0.0 {
            for v in z.as_mut_slice() {
                let e: f64 = self.augment_rng.sample(StandardNormal);
                *v += self.feature_noise * e;
            }
        }
        match &self.mode {
            BatchMode::Plain => Ok((z, SoftLabelMatrix::from_labels(&labels, self.ds.num_classes())?)),
            BatchMode::Lmr(refiner) => {
                let refined = refiner.refine_aggregated(&z, &labels, &mut self.mixer_rng)?;
                Ok((refined.features, refined.soft_labels))
            }
        }
    }

    /// One SGD update; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let (x, y) = self.next_batch()?;
        let (loss, grads) = loss_and_grad(&self.params, &x, y.matrix())?;
        sgd_step(&mut self.params, &grads, &mut self.opt);
        Ok(loss)
    }

    pub fn params(&self) -> &ClassifierParams {
        &self.params
    }

    pub fn into_params(self) -> ClassifierParams {
        self.params
    }

    /// `ceil(N / B)` batches.
    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len().div_ceil(self.batch_size)
    }

    pub fn run_epochs(&mut self, stage: &str, epochs: usize, log: &mut Vec<EpochRecord>) -> Result<()> {
        let per_epoch = self.batches_per_epoch();
        for epoch in 0..epochs {
            let mut total = 0.0;
            for _ in 0..per_epoch {
                total += self.step()?;
            }
            let report = evaluate_model(&self.params, self.ds)?;
            log.push(EpochRecord {
                stage: stage.to_owned(),
                epoch,
                loss: total / per_epoch as f64,
                train_avg_class_acc: report.avg_class_acc,
                train_overall_acc: report.overall_acc,
            });
        }
        Ok(())
    }
}

/// Aggregated features for the whole dataset.
pub fn aggregate_dataset(ds: &FeatureDataset) -> Matrix {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (raw, _) = ds.gather(&all);
    temporal_average(&raw, ds.time_steps(), ds.channels())
}

/// Inference path: aggregate over time and classify. Never refines.
pub fn predict_scores(params: &ClassifierParams, ds: &FeatureDataset) -> Result<Matrix> {
    check_dims(params, ds)?;
    forward(params, &aggregate_dataset(ds))
}

pub fn evaluate_model(params: &ClassifierParams, ds: &FeatureDataset) -> Result<MetricsReport> {
    let scores = predict_scores(params, ds)?;
    let labels: Vec<usize> = ds.labels().iter().map(|&y| y as usize).collect();
    evaluate(&scores, &labels, ds.class_names())
}

fn stage1_setup(config: &ExperimentConfig) -> StageSetup {
    StageSetup {
        stage: 1,
        strategy: config.stage1.sampler,
        lr: config.stage1_lr(),
        momentum: config.stage1.momentum,
        batch_size: config.batch_size,
        feature_noise: config.augment.feature_noise,
        train_extractor: config.model.train_extractor,
        mode: BatchMode::Plain,
    }
}

pub fn stage2_setup(config: &ExperimentConfig, mode: BatchMode) -> StageSetup {
    StageSetup {
        stage: 2,
        strategy: config.stage2.sampler,
        lr: config.stage2_lr(),
        momentum: config.stage2.momentum,
        batch_size: config.batch_size,
        feature_noise: config.augment.feature_noise,
        train_extractor: config.model.train_extractor,
        mode,
    }
}

pub fn lmr_refiner(config: &ExperimentConfig, ds: &FeatureDataset) -> Result<Refiner> {
    Ok(Refiner {
        table: contribution(ds.class_counts(), config.lmr.w_rec, config.lmr.decay)?,
        p_mix: config.lmr.p_mix,
    })
}

pub fn init_params(config: &ExperimentConfig, ds: &FeatureDataset, run_seed: u64) -> Result<ClassifierParams> {
    let mut rng = stream(run_seed, Component::Init, 0);
    ClassifierParams::init(config.model.arch, ds.channels(), config.model.hidden, ds.num_classes(), &mut rng)
}

/// Stage 1; its output is also the CE baseline.
pub fn train_stage1(config: &ExperimentConfig, ds: &FeatureDataset, run_seed: u64) -> Result<TrainedModel> {
    config.validate()?;
    let params = init_params(config, ds, run_seed)?;
    let mut runner = StageRunner::new(ds, params, run_seed, stage1_setup(config))?;
    let mut log = Vec::new();
    runner.run_epochs("stage1", config.stage1.epochs, &mut log)?;
    Ok(TrainedModel {
        params: runner.into_params(),
        provenance: Provenance {
            config_hash: config_hash(config),
            run_seed,
            method: Method::Ce,
            log,
        },
    })
}

fn fine_tune(
    stage1: &TrainedModel,
    config: &ExperimentConfig,
    ds: &FeatureDataset,
    mode: BatchMode,
    method: Method,
) -> Result<TrainedModel> {
    let run_seed = stage1.provenance.run_seed;
    let mut runner = StageRunner::new(ds, stage1.params.clone(), run_seed, stage2_setup(config, mode))?;
    let mut log = stage1.provenance.log.clone();
    runner.run_epochs("stage2", config.stage2.epochs, &mut log)?;
    Ok(TrainedModel {
        params: runner.into_params(),
        provenance: Provenance {
            config_hash: config_hash(config),
            run_seed,
            method,
            log,
        },
    })
}

/// Class-balanced cross-entropy fine-tuning of the stage-1 weights.
pub fn train_crt(stage1: &TrainedModel, config: &ExperimentConfig, ds: &FeatureDataset) -> Result<TrainedModel> {
    config.validate()?;
    fine_tune(stage1, config, ds, BatchMode::Plain, Method::Crt)
}

/// Class-balanced fine-tuning through LMR refinement and soft cross-entropy,
/// starting from the stage-1 weights.
pub fn train_stage2_lmr(stage1: &TrainedModel, config: &ExperimentConfig, ds: &FeatureDataset) -> Result<TrainedModel> {
    config.validate_for_lmr()?;
    let refiner = lmr_refiner(config, ds)?;
    fine_tune(stage1, config, ds, BatchMode::Lmr(refiner), Method::Tlmr)
}

/// Builds the train/test pair for one run.
pub fn load_or_generate(config: &ExperimentConfig, run_seed: u64) -> Result<(FeatureDataset, FeatureDataset)> {
    match (&config.data.train, &config.data.test) {
        (Some(train), Some(test)) => Ok((load_dataset(train)?, load_dataset(test)?)),
        _ => generate(&synthetic_spec(config, run_seed)?),
    }
}

pub fn synthetic_spec(config: &ExperimentConfig, seed: u64) -> Result<SynthSpec> {
    let s = &config.data.synthetic;
    let mut spec = make_meteor_like(s.scale, s.d, s.t, seed)?;
    for p in &mut spec.confusable_pairs {
        p.alpha = s.alpha;
    }
    spec.noise_std = s.noise_std;
    spec.drift = s.drift;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub index: usize,
    pub run_seed: u64,
    pub reports: BTreeMap<Method, MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub overall_map: f64,
    pub avg_class_acc: f64,
    pub overall_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub class_names: Vec<String>,
    pub runs: Vec<SeedResult>,
    /// Per-metric medians across runs.
    pub median: Vec<MethodSummary>,
}

/// Median of the values; mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

fn median_opt(values: Vec<Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| median(&defined))
}

/// Everything produced by one run of all three methods.
pub struct RunArtifacts {
    pub result: SeedResult,
    pub models: BTreeMap<Method, TrainedModel>,
}

pub fn run_single(config: &ExperimentConfig, index: usize) -> Result<RunArtifacts> {
    let seed = run_seed(config.seed, index);
    let (train, test) = load_or_generate(config, seed)?;
    let ce = train_stage1(config, &train, seed)?;
    let crt = train_crt(&ce, config, &train)?;
    let tlmr = train_stage2_lmr(&ce, config, &train)?;
    let mut reports = BTreeMap::new();
    let mut models = BTreeMap::new();
    for (method, model) in [(Method::Ce, ce), (Method::Crt, crt), (Method::Tlmr, tlmr)] {
        reports.insert(method, evaluate_model(&model.params, &test)?);
        models.insert(method, model);
    }
    Ok(RunArtifacts {
        result: SeedResult {
            index,
            run_seed: seed,
            reports,
        },
        models,
    })
}

/// CE, cRT and Transfer-LMR over `num_seeds` runs. Runs execute in
/// parallel and are merged in seed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ComparisonReport> {
    Ok(run_experiment_with_models(config)?.0)
}

pub fn run_experiment_with_models(config: &ExperimentConfig) -> Result<(ComparisonReport, Vec<RunArtifacts>)> {
    config.validate_for_lmr()?;
    if config.num_seeds == 0 {
        return Err(Error::invalid("num_seeds", "must be at least 1"));
    }
    let artifacts: Vec<RunArtifacts> = (0..config.num_seeds)
        .into_par_iter()
        .map(|k| run_single(config, k))
        .collect::<Result<_>>()?;
    let runs: Vec<SeedResult> = artifacts.iter().map(|a| a.result.clone()).collect();
    let class_names = runs[0].reports[&Method::Ce].class_names.clone();
    let c = class_names.len();
    let median = Method::ALL
        .iter()
        .map(|&m| {
            let reps: Vec<&MetricsReport> = runs.iter().map(|r| &r.reports[&m]).collect();
            let col = |f: &dyn Fn(&MetricsReport) -> f64| median(&reps.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: m,
                per_class_ap: (0..c).map(|j| median_opt(reps.iter().map(|r| r.per_class_ap[j]).collect())).collect(),
                per_class_acc: (0..c).map(|j| median_opt(reps.iter().map(|r| r.per_class_acc[j]).collect())).collect(),
                overall_map: col(&|r| r.overall_map),
                avg_class_acc: col(&|r| r.avg_class_acc),
                overall_acc: col(&|r| r.overall_acc),
            }
        })
        .collect();
    Ok((
        ComparisonReport {
            config_hash: config_hash(config),
            class_names,
            runs,
            median,
        },
        artifacts,
    ))
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{:.4}", v * 100.0))
}

impl ComparisonReport {
    pub fn summary(&self, method: Method) -> &MethodSummary {
        self.median.iter().find(|s| s.method == method).expect("all methods summarized")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Table-shaped CSV in percent: per-class AP, mAP, Avg. C/A, Overall Acc.
    /// One row per method and run, then one median row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,run");
        for name in &self.class_names {
            let _ = write!(out, ",ap_{name}");
        }
        out.push_str(",overall_map,avg_class_acc,overall_acc\n");
        for run in &self.runs {
            for (m, r) in &run.reports {
                let _ = write!(out, "{},{}", m.name(), run.index);
                for ap in &r.per_class_ap {
                    let _ = write!(out, ",{}", opt_pct(*ap));
                }
                let _ = writeln!(
                    out,
                    ",{:.4},{:.4},{:.4}",
                    r.overall_map * 100.0,
                    r.avg_class_acc * 100.0,
                    r.overall_acc * 100.0
                );
            }
        }
        for s in &self.median {
            let _ = write!(out, "{},median", s.method.name());
            for ap in &s.per_class_ap {
                let _ = write!(out, ",{}", opt_pct(*ap));
            }
            let _ = writeln!(
                out,
                ",{:.4},{:.4},{:.4}",
                s.overall_map * 100.0,
                s.avg_class_acc * 100.0,
                s.overall_acc * 100.0
            );
        }
        out
    }

    /// Long-format `method,metric,seed,value` rows for external plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("method,metric,seed,value\n");
        for run in &self.runs {
            for (m, r) in &run.reports {
                let mut row = |metric: &str, v: f64| {
                    let _ = writeln!(out, "{},{metric},{},{v:.6}", m.name(), run.index);
                };
                row("overall_map", r.overall_map);
                row("avg_class_acc", r.avg_class_acc);
                row("overall_acc", r.overall_acc);
                for (j, name) in self.class_names.iter().enumerate() {
                    if let Some(v) = r.per_class_ap[j] {
                        row(&format!("ap_{name}"), v);
                    }
                    if let Some(v) = r.per_class_acc[j] {
                        row(&format!("acc_{name}"), v);
                    }
                }
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = MetricsReport::table_header(&self.class_names);
        s.push('\n');
        for summary in &self.median {
            let mut row = format!("{:<14}", summary.method.label());
            for ap in &summary.per_class_ap {
                match ap {
                    Some(v) => {
                        let _ = write!(row, " {:>6.1}", v * 100.0);
                    }
                    None => row.push_str("      -"),
                }
            }
            let _ = write!(
                row,
                " | {:>6.1} {:>6.1} {:>6.1}",
                summary.overall_map * 100.0,
                summary.avg_class_acc * 100.0,
                summary.overall_acc * 100.0
            );
            s.push_str(&row);
            s.push('\n');
        }
        s
    }
}

/// Loads a dataset and checks it against a model's dims.
pub fn load_matching(path: &Path, params: &ClassifierParams) -> Result<FeatureDataset> {
    let ds = load_dataset(path)?;
    check_dims(params, &ds)?;
    Ok(ds)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("xx".parse::<Method>().is_err());
    }
}
