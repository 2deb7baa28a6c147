use tlmr_core::config::ExperimentConfig;
use tlmr_core::lmr::refine_calls;
use tlmr_core::model::{encode_checkpoint, Architecture};
use tlmr_core::pipeline::{
    evaluate_model, init_params, lmr_refiner, median, run_experiment, stage2_setup, train_crt, train_stage1,
    train_stage2_lmr, BatchMode, Method, StageRunner,
};
use tlmr_core::synth::{generate, ConfusablePair, SynthSpec};
use tlmr_core::{Error, FeatureDataset};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::load(
        None,
        &[
            "num_seeds=2".into(),
            "stage1.epochs=5".into(),
            "stage2.epochs=3".into(),
            "data.synthetic.scale=50".into(),
            "data.synthetic.d=8".into(),
        ],
    )
    .unwrap()
}

fn balanced(seed: u64, pairs: Vec<ConfusablePair>, noise_std: f64) -> (FeatureDataset, FeatureDataset) {
    generate(&SynthSpec {
        class_names: (0..4).map(|j| format!("c{j}")).collect(),
        train_counts: vec![100; 4],
        test_counts: vec![100; 4],
        d: 16,
        t: 5,
        confusable_pairs: pairs,
        noise_std,
        drift: 0.5,
        seed,
    })
    .unwrap()
}

fn meteor(config: &ExperimentConfig) -> FeatureDataset {
    tlmr_core::pipeline::load_or_generate(config, 1).unwrap().0
}

#[test]
fn disabled_lmr_reproduces_crt_bit_for_bit() {
    let mut config = ExperimentConfig::default();
    config.lmr.w_rec = 0.0;
    config.lmr.p_mix = 0.0;
    let ds = meteor(&config);
    let start = init_params(&config, &ds, 5).unwrap();
    let refiner = lmr_refiner(&config, &ds).unwrap();
    assert!(refiner.table.is_zero());
    let mut crt = StageRunner::new(&ds, start.clone(), 5, stage2_setup(&config, BatchMode::Plain)).unwrap();
    let mut lmr = StageRunner::new(&ds, start, 5, stage2_setup(&config, BatchMode::Lmr(refiner))).unwrap();
    for step in 0..100 {
        let (a, b) = (crt.step().unwrap(), lmr.step().unwrap());
        assert_eq!(a.to_bits(), b.to_bits(), "loss at step {step}");
        assert_eq!(crt.params(), lmr.params(), "params at step {step}");
    }
}

#[test]
fn second_stage_starts_from_stage_one_weights() {
    let mut config = tiny_config();
    let ds = meteor(&config);
    let stage1 = train_stage1(&config, &ds, 3).unwrap();
    config.stage2.epochs = 0;
    let bytes = encode_checkpoint(&stage1.params);
    assert_eq!(encode_checkpoint(&train_crt(&stage1, &config, &ds).unwrap().params), bytes);
    assert_eq!(encode_checkpoint(&train_stage2_lmr(&stage1, &config, &ds).unwrap().params), bytes);
}

#[test]
fn zero_stage_one_epochs_return_initialization() {
    let mut config = tiny_config();
    config.stage1.epochs = 0;
    let ds = meteor(&config);
    assert_eq!(train_stage1(&config, &ds, 9).unwrap().params, init_params(&config, &ds, 9).unwrap());
}

#[test]
fn inference_never_refines() {
    let config = tiny_config();
    let ds = meteor(&config);
    let stage1 = train_stage1(&config, &ds, 2).unwrap();
    let before = refine_calls();
    let model = train_stage2_lmr(&stage1, &config, &ds).unwrap();
    let after_training = refine_calls();
    assert!(after_training > before);
    let first = evaluate_model(&model.params, &ds).unwrap();
    assert_eq!(refine_calls(), after_training);
    // interleaved refinement work does not change evaluation
    train_stage2_lmr(&stage1, &config, &ds).unwrap();
    assert_eq!(evaluate_model(&model.params, &ds).unwrap(), first);
}

#[test]
fn separable_balanced_data_is_learned() {
    let (train, test) = balanced(1, vec![], 0.3);
    let config = ExperimentConfig::default();
    let model = train_stage1(&config, &train, 1).unwrap();
    let r = evaluate_model(&model.params, &test).unwrap();
    assert!(r.avg_class_acc >= 0.95, "{}", r.avg_class_acc);
}

#[test]
fn stage_one_loss_moving_average_does_not_increase() {
    let (train, _) = balanced(2, vec![], 0.3);
    let mut config = ExperimentConfig::default();
    config.stage1.epochs = 60;
    let log = train_stage1(&config, &train, 2).unwrap().provenance.log;
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] <= w[0], "moving average rose at window {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn crt_on_balanced_data_matches_ce_within_noise() {
    let config = ExperimentConfig::default();
    let mut diffs = Vec::new();
    for seed in 0..5 {
        let (train, test) = balanced(10 + seed, vec![ConfusablePair { head: 0, tail: 1, alpha: 0.9 }], 0.3);
        let ce = train_stage1(&config, &train, seed).unwrap();
        let crt = train_crt(&ce, &config, &train).unwrap();
        let a = evaluate_model(&ce.params, &test).unwrap().avg_class_acc;
        let b = evaluate_model(&crt.params, &test).unwrap().avg_class_acc;
        diffs.push(b - a);
    }
    let m = median(&diffs);
    assert!(m.abs() <= 0.03, "median change {m}");
}

#[test]
fn ce_leaves_confusable_tail_far_behind_head() {
    let config = ExperimentConfig::default();
    let report = run_experiment(&config).unwrap();
    let gaps: Vec<f64> = report
        .runs
        .iter()
        .map(|r| {
            let ce = &r.reports[&Method::Ce];
            ce.per_class_acc[0].unwrap() - ce.per_class_acc[3].unwrap()
        })
        .collect();
    assert!(median(&gaps) >= 0.15, "{gaps:?}");
}

#[test]
fn tiny_experiment_reports_and_determinism() {
    let config = tiny_config();
    let a = run_experiment(&config).unwrap();
    assert_eq!(a.runs.len(), 2);
    for run in &a.runs {
        assert_eq!(run.reports.len(), 3);
        let n: Vec<u64> = run.reports.values().map(|r| r.n_eval).collect();
        assert!(n.iter().all(|&v| v == n[0]));
    }
    assert_eq!(a.median.len(), 3);
    // per-method rows for each run plus one median row per method
    assert_eq!(a.to_csv().lines().count(), 1 + 3 * 2 + 3);
    let header = a.to_csv().lines().next().unwrap().to_owned();
    assert_eq!(header, "method,run,ap_OT,ap_DT,ap_WL,ap_CT,ap_YD,overall_map,avg_class_acc,overall_acc");
    let b = run_experiment(&config).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.plot_csv(), b.plot_csv());
}

#[test]
fn mismatched_dims_and_small_batches_are_rejected() {
    let mut config = tiny_config();
    let ds = meteor(&config);
    let stage1 = train_stage1(&config, &ds, 1).unwrap();
    let (other, _) = balanced(3, vec![], 0.3);
    assert!(matches!(train_crt(&stage1, &config, &other), Err(Error::DimensionMismatch { .. })));
    assert!(matches!(train_stage2_lmr(&stage1, &config, &other), Err(Error::DimensionMismatch { .. })));
    config.batch_size = 1;
    assert!(train_stage2_lmr(&stage1, &config, &ds).is_err());
}

#[test]
fn mlp_with_frozen_extractor_only_moves_the_head() {
    let mut config = tiny_config();
    config.model.arch = Architecture::Mlp;
    config.model.hidden = 6;
    let ds = meteor(&config);
    let stage1 = train_stage1(&config, &ds, 4).unwrap();
    config.model.train_extractor = false;
    let tuned = train_stage2_lmr(&stage1, &config, &ds).unwrap();
    let (a, b) = (stage1.params.tensors(), tuned.params.tensors());
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
    assert_ne!(a[2], b[2]);
}
