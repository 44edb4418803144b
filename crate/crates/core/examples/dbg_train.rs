use sage_core::*;
use sage_core::data::{synth_generate, split, SplitSpec};
use sage_core::nnet::{train, TrainConfig};
use sage_core::defenses::{Portfolio, DefenseConfig};
use sage_core::attacks::{generate_suite, AttackKind, AttackSpec};
use sage_core::matrix::{AttackPool, build_matrix, label_optimal};

fn main() {
    let ds = synth_generate(400, 5, 3, &[0.4, 0.35, 0.25], sage_core::seed::derive(7, "preprocess")).unwrap();
    let (train_ds, test_ds) = split(&ds, &SplitSpec { train_fraction: 0.8, seed: sage_core::seed::derive(sage_core::seed::derive(7, "preprocess"), "split") }).unwrap();
    let tc = TrainConfig { epochs: 5, hidden: vec![12], seed: sage_core::seed::derive(7, "train-baseline"), ..TrainConfig::default() };
    let base = train(&train_ds, &tc).unwrap().model;
    let dcfg = DefenseConfig { train: TrainConfig { epochs: 5, hidden: vec![12], seed: sage_core::seed::derive(7, "train-defenses"), ..TrainConfig::default() }, pgd_steps: 3, rslad10_steps: 2, rslad100_steps: 4, ..DefenseConfig::default() };
    let portfolio = Portfolio::train_full(&train_ds, &base, &dcfg, &test_ds).unwrap();
    let mut spec = AttackSpec::new(AttackKind::Fgsm, 0.0);
    spec.steps = 4;
    let suite = generate_suite(&base, &test_ds, &[AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Deepfool], &[0.1, 0.3], 0.1, sage_core::seed::derive(7, "attack"), &spec).unwrap();
    let pool = AttackPool::from_entries(&suite.train_entries()).unwrap();
    let pm = build_matrix(&portfolio, &pool).unwrap();
    let labels = label_optimal(&pm);
    let mut counts = std::collections::BTreeMap::new();
    for l in &labels { *counts.entry(l.defense.name()).or_insert(0) += 1; }
    println!("pool size {} label distribution: {:?}", pool.len(), counts);
    println!("side f1: {:?}", pm.defense_ids.iter().map(|d| d.name()).zip(pm.side_f1.iter().map(|v| (v*100.0).round()/100.0)).collect::<Vec<_>>());
}
