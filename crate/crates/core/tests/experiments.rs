use std::fs;

use lipode_core::experiments::{
    penalized_gradient, run_fig1, run_fig2, synth_dataset, tie_weights, train, train_observed, Dataset,
    DataSource, ExperimentScale, Fig1Config, Fig2Config, OutputOptions, Profile, Split, SynthSpec, TrainConfig,
};
use lipode_core::resnet::{penalty_with_grad, weight_lipschitz, PenaltyKind};
use lipode_core::{Activation, ResNetModel};

fn tiny_scale() -> ExperimentScale {
    ExperimentScale {
        d: 4,
        depth: 8,
        train_size: 96,
        test_size: 48,
        epochs: 2,
        batch_size: 32,
        learning_rate: 0.02,
        bandwidth: 0.2,
        activation: Activation::Tanh,
    }
}

fn tiny_data() -> (Dataset, Dataset) {
    let spec = SynthSpec {
        classes: 3,
        clusters_per_class: 2,
        dim: 6,
        ..SynthSpec::default()
    };
    (
        synth_dataset(&spec, 96, Split::Train).unwrap(),
        synth_dataset(&spec, 48, Split::Test).unwrap(),
    )
}

fn tiny_model(seed: u64) -> ResNetModel {
    let (train, _) = tiny_data();
    tiny_scale().model(train.dim(), train.classes(), seed).unwrap()
}

#[test]
fn identical_seeds_give_identical_records() {
    let (tr, te) = tiny_data();
    let cfg = tiny_scale().train_config(0.1, PenaltyKind::FrobL2, true, 5);
    let (m1, r1) = train(&tiny_model(1), &tr, &te, &cfg).unwrap();
    let (m2, r2) = train(&tiny_model(1), &tr, &te, &cfg).unwrap();
    assert!(r1.same_metrics(&r2));
    assert_eq!(m1, m2);

    let other = TrainConfig { seed: 6, ..cfg };
    let (_, r3) = train(&tiny_model(1), &tr, &te, &other).unwrap();
    assert!(!r1.same_metrics(&r3));
}

#[test]
fn tied_training_keeps_weight_lipschitz_at_zero() {
    let (tr, te) = tiny_data();
    let cfg = tiny_scale().train_config(f64::INFINITY, PenaltyKind::FrobL2, true, 2);
    assert!(cfg.weight_tied());
    let mut seen = Vec::new();
    let (model, record) = train_observed(&tiny_model(3), &tr, &te, &cfg, |ev| {
        seen.push(weight_lipschitz(&ev.model.core));
        Ok(())
    })
    .unwrap();
    assert!(model.core.is_tied());
    assert_eq!(seen.len(), cfg.epochs);
    assert!(seen.iter().all(|w| *w == 0.0));
    assert_eq!(record.initial.weight_lipschitz, 0.0);
    assert!(record.epochs.iter().all(|e| e.weight_lipschitz == 0.0 && e.penalty == 0.0));
}

#[test]
fn penalized_gradient_adds_scaled_penalty() {
    let (tr, _) = tiny_data();
    let model = tiny_model(4);
    let batch: Vec<usize> = (0..40).collect();
    let lambda = 0.37;
    for kind in [PenaltyKind::FrobL2, PenaltyKind::MaxMax, PenaltyKind::MaxnormL2] {
        let (loss0, plain) = penalized_gradient(&model, &tr, &batch, 0.0, kind).unwrap();
        let (loss1, full) = penalized_gradient(&model, &tr, &batch, lambda, kind).unwrap();
        assert_eq!(loss0, loss1);
        let (_, pg) = penalty_with_grad(&model.core, kind);
        for ((f, p), g) in full.core.iter().zip(&plain.core).zip(&pg) {
            assert!((f - (p + lambda * g)).abs() <= 1e-10);
        }
        assert_eq!(full.input_proj, plain.input_proj);
        assert_eq!(full.output_proj, plain.output_proj);
    }

    let tied = tie_weights(&model).unwrap();
    let (_, a) = penalized_gradient(&tied, &tr, &batch, 0.0, PenaltyKind::FrobL2).unwrap();
    let (_, b) = penalized_gradient(&tied, &tr, &batch, 5.0, PenaltyKind::FrobL2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fig1_writes_final_table_and_clears_partial() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, te) = tiny_data();
    let cfg = Fig1Config {
        scale: tiny_scale(),
        runs: 2,
        settings: vec![false, true],
        seed: 9,
        ..Fig1Config::new(Profile::Desk, DataSource::synthetic_default())
    };
    let out = OutputOptions {
        dir: Some(dir.path().to_path_buf()),
        checkpoints: true,
    };
    let result = run_fig1(&cfg, &tr, &te, &out).unwrap();
    assert_eq!(result.rows.len(), 2 * 2 * cfg.scale.epochs);
    assert_eq!(result.by_setting.len(), 2);
    assert!(!dir.path().join("fig1.csv.partial").exists());
    let table = fs::read_to_string(dir.path().join("fig1.csv")).unwrap();
    assert_eq!(table.lines().count(), result.rows.len() + 1);
    assert!(table.lines().next().unwrap().contains("weight_lipschitz"));
    assert!(dir.path().join("checkpoints").is_dir());

    let again = run_fig1(&cfg, &tr, &te, &OutputOptions::default()).unwrap();
    assert_eq!(again.rows, result.rows);
}

#[test]
fn fig2_summarizes_every_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, te) = tiny_data();
    let cfg = Fig2Config {
        scale: tiny_scale(),
        repeats: 2,
        lambdas: vec![0.0, 0.5, f64::INFINITY],
        seed: 4,
        ..Fig2Config::new(Profile::Desk, DataSource::synthetic_default())
    };
    let out = OutputOptions {
        dir: Some(dir.path().to_path_buf()),
        checkpoints: false,
    };
    let result = run_fig2(&cfg, &tr, &te, &out).unwrap();
    assert_eq!(result.rows.len(), 6);
    assert_eq!(result.summary.len(), 3);
    assert!(result.summary.iter().all(|s| s.count == 2 && s.std_gap >= 0.0));
    assert_eq!(result.best_finite().map(|s| s.lambda.is_finite()), Some(true));
    assert!(!dir.path().join("fig2.csv.partial").exists());
    assert!(!dir.path().join("checkpoints").exists());
    let summary = fs::read_to_string(dir.path().join("fig2_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.contains("inf"));
}

#[test]
fn experiments_reject_empty_grids() {
    let (tr, te) = tiny_data();
    let fig2 = Fig2Config {
        scale: tiny_scale(),
        lambdas: vec![],
        ..Fig2Config::new(Profile::Desk, DataSource::synthetic_default())
    };
    assert!(run_fig2(&fig2, &tr, &te, &OutputOptions::default()).is_err());
    let fig1 = Fig1Config {
        scale: ExperimentScale { epochs: 0, ..tiny_scale() },
        ..Fig1Config::new(Profile::Desk, DataSource::synthetic_default())
    };
    assert!(run_fig1(&fig1, &tr, &te, &OutputOptions::default()).is_err());
}
