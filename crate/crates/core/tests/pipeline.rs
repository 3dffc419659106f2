//! End-to-end: synthesize, split, pre-train, run BO, round-trip every file.

use std::collections::BTreeSet;

use mphd::bo::{decode_results, encode_results};
use mphd::data::label_split;
use mphd::io::{read_superdataset, write_superdataset};
use mphd::pretrain::{decode_model, encode_model};
use mphd::{
    generate_superdataset, pretrain, run_experiment, AcquisitionSpec, BoSettings, ExperimentConfig, MethodSpec,
    PhiKind, PretrainConfig, Setting, Smoothness, SplitMode, SuperDataset, SynthConfig, SynthProfile, SynthScale,
};

fn small_superdataset() -> SuperDataset {
    let mut cfg = SynthConfig::preset(SynthProfile::L, SynthScale::Desk).unwrap();
    cfg.n_datasets = 4;
    cfg.subdatasets_per_dataset = 3;
    cfg.observations_per_subdataset = 30;
    cfg.dim_range = (2, 3);
    let mut sd = generate_superdataset(&cfg, 3).unwrap();
    label_split(&mut sd, SplitMode::PerDatasetSubsplit, 0.7, 3).unwrap();
    sd
}

fn quick_config() -> PretrainConfig {
    let mut cfg = PretrainConfig::desk();
    cfg.step1.iterations = 100;
    cfg.step2.iterations = 100;
    cfg
}

fn settings(budget: usize) -> BoSettings {
    BoSettings { acquisition: AcquisitionSpec::pi(), budget, n_init: 3, nu: Smoothness::FiveHalves }
}

#[test]
fn full_pipeline_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sd = small_superdataset();
    let sd_path = dir.path().join("sd.json");
    write_superdataset(&sd_path, &sd).unwrap();
    let sd = read_superdataset(&sd_path).unwrap();

    let model = pretrain(&sd, PhiKind::Nn, &quick_config(), 5).unwrap();
    let bytes = encode_model(&model).unwrap();
    assert_eq!(decode_model(&bytes).unwrap(), model);
    assert_eq!(encode_model(&pretrain(&sd, PhiKind::Nn, &quick_config(), 5).unwrap()).unwrap(), bytes);

    let cfg = ExperimentConfig {
        methods: vec![MethodSpec::MphdStandard, MethodSpec::Random],
        settings: settings(6),
        setting: Setting::Default,
        seeds: vec![0, 1],
    };
    let results = run_experiment(&sd, std::slice::from_ref(&model), &cfg).unwrap();
    let n_test: usize = sd.datasets.iter().map(|d| d.test_indices().len()).sum();
    for curve in &results.curves {
        assert_eq!(curve.runs.len(), n_test * 2);
        assert_eq!(curve.mean.len(), 7);
        assert!(curve.mean.windows(2).all(|w| w[1] <= w[0] + 1e-12), "mean regret never increases");
        assert!(curve.mean.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }
    // both methods see the same initial design
    let (a, b) = (&results.curves[0].runs[0].trace, &results.curves[1].runs[0].trace);
    let init = |t: &mphd::BoTrace| t.observations.iter().filter(|o| o.init).map(|o| o.y).collect::<Vec<_>>();
    assert_eq!(init(a), init(b));

    let encoded = encode_results(&results).unwrap();
    assert_eq!(decode_results(&encoded).unwrap(), results);
    assert_eq!(encode_results(&run_experiment(&sd, &[model], &cfg).unwrap()).unwrap(), encoded);
}

#[test]
fn zero_budget_gives_single_point_curves() {
    let sd = small_superdataset();
    let model = pretrain(&sd, PhiKind::Constant, &quick_config(), 1).unwrap();
    let cfg = ExperimentConfig {
        methods: vec![MethodSpec::MphdNonNn],
        settings: settings(0),
        setting: Setting::Default,
        seeds: vec![4],
    };
    let results = run_experiment(&sd, &[model], &cfg).unwrap();
    assert_eq!(results.curves[0].mean.len(), 1);
}

#[test]
fn ntot_uses_models_that_exclude_each_test_dataset() {
    let sd = small_superdataset();
    let models: Vec<_> = sd
        .datasets
        .iter()
        .map(|d| {
            let mut cfg = quick_config();
            cfg.exclude_dataset_ids = BTreeSet::from([d.id.clone()]);
            pretrain(&sd, PhiKind::Nn, &cfg, 2).unwrap()
        })
        .collect();
    for m in &models {
        assert_eq!(m.provenance.excluded.len(), 1);
        assert!(!m.provenance.trained_on.iter().any(|id| m.provenance.excluded.contains(id)));
    }
    let mut cfg = ExperimentConfig {
        methods: vec![MethodSpec::MphdStandard],
        settings: settings(2),
        setting: Setting::Ntot,
        seeds: vec![0],
    };
    run_experiment(&sd, &models, &cfg).unwrap();

    // without a matching model the run is refused
    assert!(run_experiment(&sd, &models[1..], &cfg).is_err());
    cfg.methods = vec![MethodSpec::BaseGp];
    assert!(run_experiment(&sd, &models, &cfg).is_err());
}
