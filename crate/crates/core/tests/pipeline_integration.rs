//! End-to-end pipeline runs on a small synthetic configuration.

use std::path::Path;

use sage_core::acquisition::AcquisitionConfig;
use sage_core::defenses::DefenseConfig;
use sage_core::nnet::TrainConfig;
use sage_core::pipeline::{
    strip_timing, AttackSettings, DatasetSource, Pipeline, PipelineConfig, ProtocolChoice,
    ProtocolReport, Stage,
};
use sage_core::selector::ForestHyper;

fn small_config(dir: &Path, seed: u64, protocol: ProtocolChoice) -> PipelineConfig {
    PipelineConfig {
        dataset: DatasetSource::Synth {
            n: 600,
            d: 5,
            classes: 3,
            imbalance: vec![0.4, 0.35, 0.25],
        },
        train_fraction: 0.8,
        stats_on_train_only: false,
        nnet: TrainConfig {
            epochs: 5,
            hidden: vec![12],
            ..TrainConfig::default()
        },
        attacks: AttackSettings {
            kinds: vec!["FGSM".into(), "PGD".into(), "DF".into()],
            eps_grid: vec![0.1, 0.3],
            steps: 4,
            ..AttackSettings::default()
        },
        defense: DefenseConfig {
            pgd_steps: 3,
            rslad10_steps: 2,
            rslad100_steps: 4,
            ..DefenseConfig::default()
        },
        acquisition: AcquisitionConfig {
            budget_schedule: vec![0.1, 0.5],
            rounds_per_budget: 1,
            forest: ForestHyper {
                n_trees: 20,
                ..ForestHyper::default()
            },
            ..AcquisitionConfig::default()
        },
        deploy_budget: 0.5,
        random_runs: 5,
        recommend_k: 1,
        timing_sample_cap: 30,
        protocol,
        out_dir: dir.to_string_lossy().to_string(),
        seed,
    }
}

fn report_json_without_timing(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("eval/report.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    strip_timing(&mut value);
    value
}

#[test]
fn run_all_produces_report_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 7, ProtocolChoice::EpsShift);
    let mut pipeline = Pipeline::new(cfg).unwrap();
    let report = pipeline.run_all().unwrap();

    match &report {
        ProtocolReport::EpsShift { report } => {
            assert_eq!(report.policies.len(), 6);
            assert!(report.timing.is_some());
            // ε-shift evaluation covers only the unseen strength.
            for p in &report.policies {
                for row in &p.attacks {
                    assert!(row.cells.iter().all(|c| c.epsilon != 0.1));
                }
            }
        }
        other => panic!("unexpected protocol report {other:?}"),
    }

    for rel in [
        "manifest.json",
        "preprocess/train.csv",
        "train-baseline/baseline.model.txt",
        "attack/suite.json",
        "train-defenses/registry.json",
        "matrix/matrix.csv",
        "matrix/side_table.csv",
        "acquire/trace.csv",
        "acquire/snapshots.json",
        "train-selector/index.json",
        "eval/report.json",
        "report/table.csv",
    ] {
        assert!(dir.path().join(rel).exists(), "missing artifact {rel}");
    }
}

#[test]
fn same_seed_gives_identical_reports_modulo_timing() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    Pipeline::new(small_config(dir_a.path(), 11, ProtocolChoice::EpsShift))
        .unwrap()
        .run_all()
        .unwrap();
    Pipeline::new(small_config(dir_b.path(), 11, ProtocolChoice::EpsShift))
        .unwrap()
        .run_all()
        .unwrap();
    assert_eq!(
        report_json_without_timing(dir_a.path()),
        report_json_without_timing(dir_b.path())
    );
}

#[test]
fn different_seed_changes_the_report() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    Pipeline::new(small_config(dir_a.path(), 11, ProtocolChoice::EpsShift))
        .unwrap()
        .run_all()
        .unwrap();
    Pipeline::new(small_config(dir_b.path(), 12, ProtocolChoice::EpsShift))
        .unwrap()
        .run_all()
        .unwrap();
    assert_ne!(
        report_json_without_timing(dir_a.path()),
        report_json_without_timing(dir_b.path())
    );
}

#[test]
fn rerun_skips_every_completed_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 13, ProtocolChoice::EpsShift);
    Pipeline::new(cfg.clone()).unwrap().run_all().unwrap();
    let mut second = Pipeline::new(cfg).unwrap();
    for stage in Stage::ALL {
        assert!(!second.run_stage(stage).unwrap(), "stage {stage:?} reran");
    }
}

#[test]
fn ablation_protocol_reports_every_strategy_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 17, ProtocolChoice::AlAblation);
    let mut pipeline = Pipeline::new(cfg).unwrap();
    let report = pipeline.run_all().unwrap();
    match report {
        ProtocolReport::AlAblation { report } => {
            // 5 strategies × 2 budgets.
            assert_eq!(report.rows.len(), 10);
            assert!(dir.path().join("report/ablation.csv").exists());
        }
        other => panic!("unexpected protocol report {other:?}"),
    }
}

#[test]
fn exclusion_protocol_reports_baseline_plus_tiers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 19, ProtocolChoice::Exclusion { tiers: None });
    cfg.attacks.kinds = vec!["FGSM".into(), "PGD".into(), "DF".into(), "ZOO".into()];
    let mut pipeline = Pipeline::new(cfg).unwrap();
    let report = pipeline.run_all().unwrap();
    match report {
        ProtocolReport::Exclusion { report } => {
            assert_eq!(report.tiers.len(), 3);
            // Nested tiers grow by one kind each.
            for (i, tier) in report.tiers.iter().enumerate() {
                assert_eq!(tier.excluded.len(), i + 1);
                // Evaluation still covers all kinds.
                let sage = tier.report.policy("SAGE").unwrap();
                assert_eq!(sage.attacks.len(), 4);
            }
            assert!(dir.path().join("report/table_tier3.csv").exists());
        }
        other => panic!("unexpected protocol report {other:?}"),
    }
}
