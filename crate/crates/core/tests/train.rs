mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use mts_core::augment::AugmentationPolicy;
use mts_core::dataset::{make_folds, DatasetManifest, FlightSeries, ManifestEntry};
use mts_core::models::{build, ModelConfig};
use mts_core::train::{
    self, cross_validate, read_records, train_fold, write_records, DataConfig, TrainConfig, TrainError,
};

use common::{moving_average, noise_samples, overfit_curve, real_fixture, vae_run};

fn quick(name: &str) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 4,
        ..TrainConfig::for_model(name)
    }
}

fn manifest_of(flights: &[FlightSeries]) -> DatasetManifest {
    DatasetManifest::new(
        flights
            .iter()
            .map(|f| ManifestEntry {
                flight_id: f.flight_id.clone(),
                tail_id: f.tail_id.clone(),
                cluster: f.cluster,
                label: f.label,
                day_offset: f.day_offset,
                duration_seconds: f.len() as u64,
                path: PathBuf::new(),
            })
            .collect(),
    )
    .unwrap()
}

fn small_data() -> DataConfig {
    DataConfig {
        window: 256,
        ..DataConfig::default()
    }
}

#[test]
fn memorizes_thirty_two_samples() {
    let curve = overfit_curve(0);
    let last = *curve.last().unwrap();
    assert!(last < 0.1, "train BCE after 200 steps: {curve:?}");
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let samples = noise_samples(8, 256, 1);
    let cfg = ModelConfig::preset("conv-mhsa-small").unwrap();
    let mut model = build::<f32>(&cfg, 4).unwrap();
    let before = model.params.to_bytes();
    let tc = TrainConfig {
        steps_per_epoch: 0,
        ..quick("conv-mhsa-small")
    };
    let out = train::train(&mut model, &samples, &samples, &tc, &AugmentationPolicy::default(), 0).unwrap();
    assert_eq!(model.params.to_bytes(), before);
    assert_eq!(out.report.records.len(), 1);
    assert_eq!(out.report.records[0].epoch, 0);
    assert!(out.trace.gradient.is_empty());
}

#[test]
fn training_is_deterministic() {
    let samples = noise_samples(12, 256, 2);
    let run = || {
        let mut model = build::<f32>(&ModelConfig::preset("conv-lstm-small").unwrap(), 1).unwrap();
        let tc = TrainConfig {
            augment: true,
            ..quick("conv-lstm-small")
        };
        let out = train::train(&mut model, &samples, &samples, &tc, &AugmentationPolicy::default(), 0).unwrap();
        (model.params.to_bytes(), out.report.records.iter().map(|r| r.loss).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn short_lstm_trains_on_slices() {
    let samples = noise_samples(6, 512, 3);
    let mut model = build::<f32>(&ModelConfig::preset("short-lstm-small").unwrap(), 0).unwrap();
    let out = train::train(&mut model, &samples, &samples, &quick("short-lstm-small"), &AugmentationPolicy::default(), 0)
        .unwrap();
    assert_eq!(out.report.records.len(), 3);
    // Evaluation slices are fixed per flight.
    let a = train::predict_samples(&model, &samples, 0, 4).unwrap();
    let b = train::predict_samples(&model, &samples, 0, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn validation_flights_never_reach_gradients_or_donors() {
    let flights = real_fixture(10, 300, 4);
    let plan = make_folds(&manifest_of(&flights), 5, 1).unwrap();
    let tc = TrainConfig {
        augment: true,
        steps_per_epoch: 10,
        ..quick("conv-mhsa-small")
    };
    let policy = AugmentationPolicy {
        p_apply: 1.0,
        ..AugmentationPolicy::default()
    };
    let model_cfg = ModelConfig::preset("conv-mhsa-small").unwrap();
    for fold in 0..5 {
        let o = train_fold(&flights, &plan, fold, &model_cfg, &tc, &policy, &small_data()).unwrap();
        let val: BTreeSet<String> = plan.val_ids(fold).into_iter().map(String::from).collect();
        assert!(o.outcome.trace.gradient.is_disjoint(&val));
        assert!(!o.outcome.trace.donors.is_empty());
        assert!(o.outcome.trace.donors.is_disjoint(&val));
    }
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let mut samples = noise_samples(4, 256, 5);
    for s in samples.iter_mut() {
        s.x[[10, 3]] = f32::NAN;
    }
    let mut model = build::<f32>(&ModelConfig::preset("conv-mhsa-small").unwrap(), 0).unwrap();
    let err = train::train(&mut model, &samples, &samples[..0], &quick("conv-mhsa-small"), &AugmentationPolicy::default(), 0)
        .unwrap_err();
    match err {
        TrainError::NonFinite { epoch, step, batch, .. } => {
            assert_eq!((epoch, step), (1, 0));
            assert_eq!(batch.len(), 4);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn vae_smoothed_reconstruction_loss_does_not_increase() {
    let (records, _, _) = vae_run(20, 0);
    let mse: Vec<f64> = records.iter().map(|r| r.recon_mse.unwrap()).collect();
    let smooth = moving_average(&mse, 5);
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{mse:?}");
    }
    for r in &records {
        let (m, e) = (r.recon_mse.unwrap(), r.rmse.unwrap());
        assert!((e * e - m).abs() < 1e-9);
        if r.epoch > 0 {
            assert!(r.kld.unwrap() >= 0.0);
        }
    }
}

#[test]
fn vae_rejects_pre_maintenance_flights() {
    let samples = noise_samples(4, 256, 6);
    let mut model = build::<f32>(&ModelConfig::preset("vae-conv-gru-small").unwrap(), 0).unwrap();
    let err = train::train_vae(&mut model, &samples, None, &quick("vae-conv-gru-small"), 0).unwrap_err();
    assert!(matches!(err, TrainError::VaeLabel(id) if id == "n001"));
}

#[test]
fn cross_validation_is_independent_of_worker_count() {
    let flights = real_fixture(5, 300, 7);
    let plan = make_folds(&manifest_of(&flights), 5, 2).unwrap();
    let model_cfg = ModelConfig::preset("conv-mhsa-small").unwrap();
    let tc = quick("conv-mhsa-small");
    let policy = AugmentationPolicy::default();
    let (a, sa) = cross_validate(&flights, &plan, &model_cfg, &tc, &policy, &small_data(), 1).unwrap();
    let (b, sb) = cross_validate(&flights, &plan, &model_cfg, &tc, &policy, &small_data(), 3).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!((sa.loss, sa.roc_auc, sa.accuracy), (sb.loss, sb.roc_auc, sb.accuracy));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.fold, y.fold);
        assert_eq!(x.model.params.to_bytes(), y.model.params.to_bytes());
        let key = |r: &train::EpochRecord| (r.epoch, r.train_loss, r.loss, r.roc_auc, r.pr_auc, r.accuracy);
        let ka: Vec<_> = x.outcome.report.records.iter().map(key).collect();
        let kb: Vec<_> = y.outcome.report.records.iter().map(key).collect();
        assert_eq!(ka, kb);
    }
}

#[test]
fn run_records_round_trip() {
    let samples = noise_samples(6, 256, 8);
    let mut model = build::<f32>(&ModelConfig::preset("conv-mhsa-small").unwrap(), 0).unwrap();
    let out = train::train(&mut model, &samples, &samples, &quick("conv-mhsa-small"), &AugmentationPolicy::default(), 0)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.jsonl");
    write_records(&out.report.records, &p).unwrap();
    let back = read_records(&p).unwrap();
    assert_eq!(back.len(), out.report.records.len());
    for (a, b) in back.iter().zip(&out.report.records) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.roc_auc, b.roc_auc);
    }
}
