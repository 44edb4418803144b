//! Acceptance suite: every exit criterion as one test, printing a pass/fail
//! line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! The ordering, gap, efficiency, label-efficiency, and exclusion criteria
//! run on two desk-scale benchmarks averaged over five seeds each: a
//! synthetic tabular benchmark (n=5000, d=20, C=4) and a bundled CSV sample
//! in the intrusion-corpus format (numeric + categorical columns, imbalanced
//! classes, missing cells). Invariant criteria (attack box/ball, gradients,
//! acquisition math, determinism) run standalone.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use sage_core::acquisition::{
    self, closed_entropy, open_entropy, select_batch, soft_assignment, AcquisitionConfig,
    LabeledPool, StrategyKind,
};
use sage_core::attacks::{self, AttackKind, AttackSpec};
use sage_core::data::{self, Dataset, SplitSpec};
use sage_core::defenses::{DefenseConfig, DefenseId, Portfolio};
use sage_core::evaluation::{
    self, build_selection, macro_f1, EvalReport, Evaluator, PolicySpec, ProtocolInputs,
    TimingReport,
};
use sage_core::mat::{euclidean, linf, Mat};
use sage_core::matrix::{oracle_assign, AttackPool};
use sage_core::nnet::{self, NeuralModel, TrainConfig};
use sage_core::seed;
use sage_core::selector;

const SEEDS: [u64; 5] = [1001, 1002, 1003, 1004, 1005];
const EPS_GRID: [f64; 4] = [0.01, 0.1, 0.2, 0.3];

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

/// Everything one benchmark seed produces.
struct SeedPack {
    report: EvalReport,
    timing: TimingReport,
    dominance_ok: bool,
    eoal1_label_f1: f64,
    strat1_label_f1: f64,
    sel_acc_b01: f64,
    sel_acc_b50: f64,
    excl_kind: String,
    excl_row_drop: f64,
    excl_avg_change: f64,
}

struct Bench {
    packs: Vec<SeedPack>,
    elapsed_secs: f64,
}

impl Bench {
    fn mean<F: Fn(&SeedPack) -> f64>(&self, f: F) -> f64 {
        self.packs.iter().map(&f).sum::<f64>() / self.packs.len() as f64
    }
}

fn policy_avg_score(report: &EvalReport, name: &str) -> f64 {
    report.policy(name).unwrap().average_score
}

fn policy_avg_f1(report: &EvalReport, name: &str) -> f64 {
    report.policy(name).unwrap().average_f1
}

fn run_pack(full: &Dataset, pack_seed: u64) -> SeedPack {
    let (train, test) = data::split(
        full,
        &SplitSpec {
            train_fraction: 0.8,
            seed: seed::derive(pack_seed, "split"),
        },
    )
    .unwrap();

    let base_cfg = TrainConfig {
        seed: seed::derive(pack_seed, "baseline"),
        ..TrainConfig::default()
    };
    let base = nnet::train(&train, &base_cfg).unwrap().model;

    let mut dcfg = DefenseConfig::default();
    dcfg.train.seed = seed::derive(pack_seed, "defenses");
    let portfolio = Portfolio::train_full(&train, &base, &dcfg, &test).unwrap();

    let suite = attacks::generate_suite(
        &base,
        &test,
        &AttackKind::ALL,
        &EPS_GRID,
        0.1,
        seed::derive(pack_seed, "attack"),
        &AttackSpec::new(AttackKind::Fgsm, 0.0),
    )
    .unwrap();

    let acq = AcquisitionConfig {
        seed: seed::derive(pack_seed, "acquire"),
        ..AcquisitionConfig::default()
    };
    let selection = build_selection(
        &portfolio,
        &suite.train_entries(),
        &acq,
        0.5,
        StrategyKind::Eoal,
    )
    .unwrap();
    let inputs = ProtocolInputs {
        base: &base,
        portfolio: &portfolio,
        suite: &suite,
        clean_test: &test,
        acq_cfg: &acq,
        deploy_budget: 0.5,
        random_runs: 100,
        recommend_k: 1,
        seed: pack_seed,
    };
    let report = evaluation::evaluate_with_selection(&inputs, &selection, false, &[]).unwrap();
    let timing = evaluation::timing_report(&inputs, &selection, 1000).unwrap();

    // Explicit Oracle correct-set dominance over the dispatch policies.
    let evaluator = Evaluator::new(
        &portfolio,
        &base,
        &selection.pool,
        &selection.matrix,
        &selection.labels,
        &test,
        suite.test_entries(),
    )
    .unwrap();
    let oracle_set = evaluator.correct_set(&PolicySpec::Oracle);
    let deployed = selection.deployed_selector();
    let dispatch_policies = [
        PolicySpec::Sage(deployed),
        PolicySpec::BestStatic,
        PolicySpec::DynamicRecommend { k: 1 },
        PolicySpec::Random {
            runs: 1,
            seed: seed::derive(pack_seed, "dominance-random"),
        },
    ];
    let mut dominance_ok = true;
    for spec in &dispatch_policies {
        let set = evaluator.correct_set(spec);
        if !set.iter().zip(&oracle_set).all(|(&s, &o)| o || !s) {
            dominance_ok = false;
        }
    }

    // Label efficiency at the 1% budget: the EOAL subset against a pure
    // stratified-random subset of the same size, judged by the fitted
    // selector's defense-label Macro-F1 on the hindsight-optimal labels of
    // the attack-test pool.
    let lpool = LabeledPool {
        x: selection.pool.x.clone(),
        labels: selection.labels.iter().map(|l| l.defense).collect(),
    };
    let (strat_snaps, _) =
        acquisition::run_strategy(&lpool, &acq, StrategyKind::StratifiedRandom).unwrap();
    let test_pool = AttackPool::from_entries(&suite.test_entries()).unwrap();
    let oracle_idx: Vec<usize> = oracle_assign(&portfolio, &test_pool)
        .unwrap()
        .iter()
        .map(|d| d.index())
        .collect();

    let fit_snapshot = |labeled: &[usize], tag: &str| {
        let x = lpool.x.select_rows(labeled);
        let picked: Vec<DefenseId> = labeled.iter().map(|&i| lpool.labels[i]).collect();
        let mut hyper = acq.forest.clone();
        hyper.seed = seed::derive(acq.seed, tag);
        selector::fit_or_constant(&x, &picked, &hyper).unwrap()
    };
    let label_quality = |ens: &selector::TreeEnsemble| {
        let preds: Vec<usize> = (0..test_pool.len())
            .map(|i| selector::predict_defense(ens, test_pool.x.row(i)).index())
            .collect();
        let f1 = macro_f1(&oracle_idx, &preds, DefenseId::COUNT).unwrap();
        let acc = preds
            .iter()
            .zip(&oracle_idx)
            .filter(|(p, o)| p == o)
            .count() as f64
            / preds.len() as f64;
        (f1, acc)
    };

    let eoal1 = &selection.snapshots[0];
    assert_eq!(eoal1.budget, 0.01);
    let strat1 = &strat_snaps[0];
    assert_eq!(strat1.budget, 0.01);
    let (eoal1_label_f1, sel_acc_b01) = label_quality(&fit_snapshot(&eoal1.labeled, "ev-b01"));
    let (strat1_label_f1, _) = label_quality(&fit_snapshot(&strat1.labeled, "ev-b01"));
    let (_, sel_acc_b50) =
        label_quality(&fit_snapshot(&selection.snapshots[3].labeled, "ev-b50"));

    // Exclusion probe: withhold the kind that damages the undefended model
    // most, rebuild the whole selection stack, evaluate on the full suite.
    let tiers = evaluation::default_exclusion_tiers(&base, &suite).unwrap();
    let excluded = tiers[0].clone();
    let kept: Vec<&attacks::AdvDataset> = suite
        .train_entries()
        .into_iter()
        .filter(|e| !excluded.contains(&e.spec.kind))
        .collect();
    let excl_selection =
        build_selection(&portfolio, &kept, &acq, 0.5, StrategyKind::Eoal).unwrap();
    let excl_report =
        evaluation::evaluate_with_selection(&inputs, &excl_selection, false, &excluded).unwrap();

    let kind_name = excluded[0].name();
    let row_of = |r: &EvalReport| {
        r.policy("SAGE")
            .unwrap()
            .attacks
            .iter()
            .find(|a| a.attack == kind_name)
            .unwrap()
            .avg_f1
    };
    let excl_row_drop = row_of(&report) - row_of(&excl_report);
    let excl_avg_change =
        (policy_avg_f1(&report, "SAGE") - policy_avg_f1(&excl_report, "SAGE")).abs();

    SeedPack {
        report,
        timing,
        dominance_ok,
        eoal1_label_f1,
        strat1_label_f1,
        sel_acc_b01,
        sel_acc_b50,
        excl_kind: kind_name.to_string(),
        excl_row_drop,
        excl_avg_change,
    }
}

fn synth_bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let packs = SEEDS
            .iter()
            .map(|&s| {
                let full =
                    data::synth_generate(5000, 20, 4, &[0.4, 0.3, 0.2, 0.1], s).unwrap();
                run_pack(&full, s)
            })
            .collect();
        Bench {
            packs,
            elapsed_secs: start.elapsed().as_secs_f64(),
        }
    })
}

/// Deterministic CSV sample in the intrusion-corpus format: numeric flow
/// features, categorical protocol/service/state columns, an imbalanced
/// label column, plus missing cells and constant/duplicate columns for the
/// cleaning path to chew on.
fn corpus_csv() -> String {
    let mut rng = seed::rng(0x5eed_c0de);
    let protos = ["tcp", "udp", "icmp"];
    let services = ["http", "dns", "smtp", "ftp"];
    let states = ["FIN", "CON", "INT"];
    let class_names = ["normal", "dos", "probe", "fuzzers"];
    let weights = [0.55, 0.2, 0.15, 0.1];
    let mut out = String::new();
    out.push_str("dur,sbytes,dbytes,sttl,dttl,sloss,dloss,sload,dload,spkts,dpkts,swin,stcpb,dtcpb,smean,dmean,proto,service,state,const_col,sbytes_copy,label\n");
    let n = 4000;
    for row in 0..n {
        let u: f64 = rng.gen();
        let mut class = 0usize;
        let mut acc = 0.0;
        for (c, w) in weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                class = c;
                break;
            }
        }
        // Class-dependent numeric features, gaussian around class anchors.
        let mut numeric = Vec::with_capacity(16);
        for j in 0..16 {
            let anchor = 3.0 * ((class + j) % 4) as f64;
            let value: f64 = anchor + rng.sample::<f64, _>(StandardNormal);
            numeric.push(value);
        }
        // Occasional missing cell (dropped rows exercise the cleaner).
        let missing = row % 97 == 0;
        let cells: Vec<String> = numeric
            .iter()
            .enumerate()
            .map(|(j, v)| {
                if missing && j == 2 {
                    String::new()
                } else {
                    format!("{v:.6}")
                }
            })
            .collect();
        let proto = protos[(class + rng.gen_range(0..2)) % protos.len()];
        let service = services[(class + rng.gen_range(0..2)) % services.len()];
        let state = states[class % states.len()];
        out.push_str(&format!(
            "{},{},{},{},1,{},{}\n",
            cells.join(","),
            proto,
            service,
            state,
            cells[1],
            class_names[class]
        ));
    }
    out
}

fn csv_bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus_sample.csv");
        std::fs::write(&path, corpus_csv()).unwrap();
        let raw = data::load_csv(&path, "label").unwrap();
        let full = data::preprocess(&raw).unwrap();
        let packs = SEEDS.iter().map(|&s| run_pack(&full, s + 7000)).collect();
        Bench {
            packs,
            elapsed_secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_attack_invariants() {
    let start = Instant::now();
    let full = data::synth_generate(5000, 20, 4, &[0.4, 0.3, 0.2, 0.1], 42).unwrap();
    let (train, test) = data::split(
        &full,
        &SplitSpec {
            train_fraction: 0.8,
            seed: 43,
        },
    )
    .unwrap();
    let base_cfg = TrainConfig {
        seed: 44,
        ..TrainConfig::default()
    };
    let base = nnet::train(&train, &base_cfg).unwrap().model;

    let suite = attacks::generate_suite(
        &base,
        &test,
        &AttackKind::ALL,
        &EPS_GRID,
        0.1,
        45,
        &AttackSpec::new(AttackKind::Fgsm, 0.0),
    )
    .unwrap();
    assert_eq!(suite.entries.len(), 28);
    let mut worst = 0.0f64;
    for entry in &suite.entries {
        for i in 0..entry.n_samples() {
            let delta = linf(entry.x_adv.row(i), test.x.row(i));
            assert!(
                delta <= entry.spec.epsilon,
                "{:?} eps {} exceeded: {delta}",
                entry.spec.kind,
                entry.spec.epsilon
            );
            worst = worst.max(delta - entry.spec.epsilon);
            for (j, &v) in entry.x_adv.row(i).iter().enumerate() {
                assert!(v >= test.feature_lo[j] && v <= test.feature_hi[j]);
            }
        }
    }
    // ε = 0 reproduces the inputs bit-exactly.
    for kind in AttackKind::ALL {
        let spec = AttackSpec::new(kind, 0.0);
        let adv = attacks::run_attack(&base, &test, &spec, 46).unwrap();
        assert_eq!(adv.x_adv, test.x, "{kind:?} at eps 0");
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "attack-invariants",
        elapsed < 300.0,
        &format!("ball+box exact for 7 kinds x 4 eps, eps=0 bit-exact, {elapsed:.1}s < 300s"),
    );
}

/// Random model with every layer randomized (the library's initializer
/// zeroes the output layer, which would leave hidden gradients untested).
fn random_model(arch: &[usize], model_seed: u64) -> NeuralModel {
    let mut rng = seed::rng(model_seed);
    let mut m = NeuralModel::init(arch, &mut rng);
    let params: Vec<f64> = (0..m.param_count())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    m.assign_params(&params);
    m
}

/// Smallest |pre-activation| across hidden units; finite differences are
/// only a valid oracle away from the rectifier kinks.
fn kink_margin(m: &NeuralModel, x: &Mat) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..x.rows() {
        let mut a = x.row(i).to_vec();
        for (l, layer) in m.layers.iter().enumerate() {
            let last = l + 1 == m.layers.len();
            let mut next = vec![0.0; layer.b.len()];
            for (o, out) in next.iter_mut().enumerate() {
                let mut z = layer.b[o];
                for (w, av) in layer.w.row(o).iter().zip(&a) {
                    z += w * av;
                }
                if !last {
                    margin = margin.min(z.abs());
                }
                *out = if last { z } else { z.max(0.0) };
            }
            a = next;
        }
    }
    margin
}

#[test]
fn criterion_gradient_correctness() {
    let h = 1e-4;
    let mut worst_param = 0.0f64;
    let mut worst_input = 0.0f64;
    let archs = [
        vec![3, 5, 2],
        vec![4, 6, 3],
        vec![5, 8, 4],
        vec![6, 4, 2],
    ];
    let mut checked = 0;
    let mut case_seed = 9000u64;
    while checked < 20 {
        let arch = &archs[checked % archs.len()];
        case_seed += 17;
        let classes = *arch.last().unwrap();
        let m = random_model(arch, case_seed);
        let ds = data::synth_generate(
            classes * 10,
            arch[0],
            classes,
            &vec![1.0 / classes as f64; classes],
            case_seed + 1,
        )
        .unwrap();
        if kink_margin(&m, &ds.x) <= 1e-2 {
            continue;
        }
        checked += 1;

        let (_, grads) = nnet::loss_and_param_grads(&m, &ds.x, &ds.y).unwrap();
        let analytic = grads.flatten();
        let base_params = m.flatten_params();
        for i in 0..base_params.len() {
            let mut probe = m.clone();
            let mut p = base_params.clone();
            p[i] = base_params[i] + h;
            probe.assign_params(&p);
            let (lp, _) = nnet::loss_and_param_grads(&probe, &ds.x, &ds.y).unwrap();
            p[i] = base_params[i] - h;
            probe.assign_params(&p);
            let (lm, _) = nnet::loss_and_param_grads(&probe, &ds.x, &ds.y).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            worst_param = worst_param.max((analytic[i] - numeric).abs() / (1.0 + analytic[i].abs()));
        }

        let x0: Vec<f64> = ds.x.row(0).to_vec();
        let y0 = ds.y[0];
        let input_grad = nnet::input_gradient(&m, &x0, y0);
        for j in 0..x0.len() {
            let mut xp = x0.clone();
            xp[j] += h;
            let lp = -m.probs_sample(&xp)[y0].max(1e-300).ln();
            let mut xm = x0.clone();
            xm[j] -= h;
            let lm = -m.probs_sample(&xm)[y0].max(1e-300).ln();
            let numeric = (lp - lm) / (2.0 * h);
            worst_input =
                worst_input.max((input_grad[j] - numeric).abs() / (1.0 + input_grad[j].abs()));
        }
    }
    verdict(
        "gradient-correctness",
        worst_param < 1e-5 && worst_input < 1e-5,
        &format!("20 random models: worst param err {worst_param:.2e}, input err {worst_input:.2e} < 1e-5"),
    );
}

#[test]
fn criterion_eoal_math() {
    let mut rng = seed::rng(777);
    // Bounds on 10k random inputs for each entropy.
    for _ in 0..10_000 {
        let k = rng.gen_range(2..=10);
        let posteriors: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let sc = closed_entropy(&posteriors).unwrap();
        assert!((0.0..=1.0).contains(&sc), "s_c {sc} out of bounds");
    }
    for _ in 0..10_000 {
        let k = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=6);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let t = rng.gen_range(0.05..4.0);
        let sd = open_entropy(&x, &centers, t).unwrap();
        assert!((0.0..=1.0).contains(&sd), "s_d {sd} out of bounds");
    }

    // Derived numeric examples, recomputed independently here.
    let h2 = |p: f64| -p * p.log2() - (1.0 - p) * (1.0 - p).log2();
    let sc_expect = (h2(0.9) + h2(0.2)) / 2.0;
    let sc = closed_entropy(&[0.9, 0.2]).unwrap();
    assert!((sc - sc_expect).abs() < 1e-12);
    assert!((sc - 0.5955).abs() < 1e-4);

    let centers = vec![vec![1.0], vec![2.0]];
    let q = soft_assignment(&[0.0], &centers, 1.0);
    let e1 = (-1.0f64).exp();
    let e2 = (-2.0f64).exp();
    let q_expect = [e1 / (e1 + e2), e2 / (e1 + e2)];
    assert!((q[0] - q_expect[0]).abs() < 1e-12);
    assert!((q[0] - 0.7311).abs() < 1e-4);
    assert!((q[1] - 0.2689).abs() < 1e-4);
    let sd = open_entropy(&[0.0], &centers, 1.0).unwrap();
    let sd_expect = -(q_expect[0] * q_expect[0].ln() + q_expect[1] * q_expect[1].ln()) / 2.0f64.ln();
    assert!((sd - sd_expect).abs() < 1e-12);
    assert!((sd - 0.8400).abs() < 1e-4);

    // Farthest-first batches equal exhaustive per-step recomputation for
    // shortlists up to 12 candidates (quota 2 additionally checked against
    // full 2-subset enumeration).
    for trial in 0..50 {
        let n = rng.gen_range(3..=12);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let x = Mat::from_rows(&rows);
        let ranked: Vec<usize> = (0..n).collect();
        let quota = rng.gen_range(1..=n.div_ceil(2));
        let got = select_batch(&ranked, quota, &x, 5).unwrap();
        let shortlist: Vec<usize> = ranked.iter().copied().take(5 * quota).collect();
        if quota >= shortlist.len() {
            assert_eq!(got, shortlist);
            continue;
        }
        let mut expect = vec![shortlist[0]];
        while expect.len() < quota {
            let mut best: Option<(usize, f64)> = None;
            for &cand in &shortlist {
                if expect.contains(&cand) {
                    continue;
                }
                let dmin = expect
                    .iter()
                    .map(|&p| euclidean(x.row(cand), x.row(p)))
                    .fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(_, bd)| dmin > bd) {
                    best = Some((cand, dmin));
                }
            }
            expect.push(best.unwrap().0);
        }
        assert_eq!(got, expect, "greedy mismatch on trial {trial}");
        if quota == 2 {
            let seedp = shortlist[0];
            let mut best = (f64::NEG_INFINITY, 0usize);
            for &other in &shortlist[1..] {
                let d = euclidean(x.row(seedp), x.row(other));
                if d > best.0 {
                    best = (d, other);
                }
            }
            assert_eq!(got, vec![seedp, best.1]);
        }
    }
    verdict(
        "eoal-math",
        true,
        "entropies bounded on 10k inputs; s_c=0.5955, q=(0.7311,0.2689), s_d=0.8400 within 1e-4; batches match brute force",
    );
}

#[test]
fn criterion_oracle_dominance() {
    for (name, bench) in [("synthetic", synth_bench()), ("csv", csv_bench())] {
        let ok = bench.packs.iter().all(|p| p.dominance_ok);
        verdict(
            "oracle-dominance",
            ok,
            &format!("{name}: Oracle correct-set covers SAGE/BEST_STATIC/DYNAMIC/RANDOM on all 5 seeds"),
        );
    }
}

#[test]
fn criterion_ordering_property() {
    for (name, bench) in [("synthetic", synth_bench()), ("csv", csv_bench())] {
        let oracle = bench.mean(|p| policy_avg_score(&p.report, "ORACLE"));
        let sage = bench.mean(|p| policy_avg_score(&p.report, "SAGE"));
        let random = bench.mean(|p| policy_avg_score(&p.report, "RANDOM"));
        let nodef = bench.mean(|p| policy_avg_score(&p.report, "NO_DEFENSE"));
        let pass = oracle >= sage && sage >= random && sage >= nodef && sage - random >= 0.03;
        verdict(
            "ordering-property",
            pass,
            &format!(
                "{name}: score means oracle {oracle:.3} >= sage {sage:.3} >= random {random:.3}, sage >= no-defense {nodef:.3}, sage-random {:.3} >= 0.03",
                sage - random
            ),
        );
    }
    let elapsed = synth_bench().elapsed_secs;
    verdict(
        "ordering-runtime",
        elapsed < 1800.0,
        &format!("synthetic 5-seed benchmark end-to-end in {elapsed:.0}s < 1800s"),
    );
}

#[test]
fn criterion_oracle_gap() {
    let bench = synth_bench();
    let gap = bench.mean(|p| {
        policy_avg_f1(&p.report, "ORACLE") - policy_avg_f1(&p.report, "SAGE")
    });
    verdict(
        "oracle-gap",
        gap <= 0.15,
        &format!("synthetic: mean cross-attack F1 gap to Oracle {gap:.3} <= 0.15"),
    );
}

#[test]
fn criterion_efficiency() {
    for (name, bench) in [("synthetic", synth_bench()), ("csv", csv_bench())] {
        for pack in &bench.packs {
            let oracle = pack
                .timing
                .entries
                .iter()
                .find(|e| e.policy == "ORACLE")
                .unwrap();
            let sage = pack
                .timing
                .entries
                .iter()
                .find(|e| e.policy == "SAGE")
                .unwrap();
            assert_eq!(oracle.defended_calls_per_sample, 10.0);
            assert_eq!(oracle.selector_calls_per_sample, 0.0);
            assert_eq!(sage.defended_calls_per_sample, 1.0);
            assert_eq!(sage.selector_calls_per_sample, 1.0);
        }
        let ratio = bench.mean(|p| {
            let oracle = p
                .timing
                .entries
                .iter()
                .find(|e| e.policy == "ORACLE")
                .unwrap();
            let sage = p.timing.entries.iter().find(|e| e.policy == "SAGE").unwrap();
            oracle.ms_per_sample / sage.ms_per_sample
        });
        verdict(
            "efficiency",
            ratio >= 5.0,
            &format!("{name}: exact call counts 10 vs 1+selector; mean ms/sample ratio {ratio:.1} >= 5"),
        );
    }
}

#[test]
fn criterion_label_efficiency() {
    for (name, bench) in [("synthetic", synth_bench()), ("csv", csv_bench())] {
        let eoal = bench.mean(|p| p.eoal1_label_f1);
        let strat = bench.mean(|p| p.strat1_label_f1);
        verdict(
            "label-efficiency",
            eoal >= strat,
            &format!("{name}: EOAL@1% selector macro-F1 {eoal:.3} >= stratified-random@1% {strat:.3} (5-seed means)"),
        );
        // Monotone budget sanity: budget-50% selector accuracy within 2
        // points of (or above) the 1% point.
        let b50 = bench.mean(|p| p.sel_acc_b50);
        let b01 = bench.mean(|p| p.sel_acc_b01);
        verdict(
            "budget-sanity",
            b50 >= b01 - 0.02,
            &format!("{name}: selector accuracy at 50% budget {b50:.3} >= 1% budget {b01:.3} - 0.02"),
        );
    }
}

#[test]
fn criterion_exclusion_protocol() {
    for (name, bench) in [("synthetic", synth_bench()), ("csv", csv_bench())] {
        let drop = bench.mean(|p| p.excl_row_drop);
        let avg_change = bench.mean(|p| p.excl_avg_change);
        let kinds: Vec<&str> = bench.packs.iter().map(|p| p.excl_kind.as_str()).collect();
        verdict(
            "exclusion-protocol",
            drop >= 0.05 && avg_change <= 0.06,
            &format!(
                "{name}: excluding {kinds:?} drops that row by {drop:.3} >= 0.05 while the Average moves {avg_change:.3} <= 0.06"
            ),
        );
    }
}

#[test]
fn criterion_determinism() {
    use sage_core::pipeline::{
        strip_timing, AttackSettings, DatasetSource, Pipeline, PipelineConfig, ProtocolChoice,
    };
    let run = |dir: &std::path::Path| {
        let cfg = PipelineConfig {
            dataset: DatasetSource::Synth {
                n: 1200,
                d: 8,
                classes: 3,
                imbalance: vec![0.5, 0.3, 0.2],
            },
            train_fraction: 0.8,
            stats_on_train_only: false,
            nnet: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            attacks: AttackSettings {
                eps_grid: vec![0.1, 0.2],
                ..AttackSettings::default()
            },
            defense: DefenseConfig {
                train: TrainConfig {
                    epochs: 5,
                    ..TrainConfig::default()
                },
                rslad100_steps: 20,
                ..DefenseConfig::default()
            },
            acquisition: AcquisitionConfig {
                budget_schedule: vec![0.1, 0.5],
                forest: sage_core::selector::ForestHyper {
                    n_trees: 50,
                    ..sage_core::selector::ForestHyper::default()
                },
                ..AcquisitionConfig::default()
            },
            deploy_budget: 0.5,
            random_runs: 20,
            recommend_k: 1,
            timing_sample_cap: 50,
            protocol: ProtocolChoice::EpsShift,
            out_dir: dir.to_string_lossy().to_string(),
            seed: 20260809,
        };
        Pipeline::new(cfg).unwrap().run_all().unwrap();
        let text = std::fs::read_to_string(dir.join("eval/report.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        strip_timing(&mut v);
        v
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run(dir_a.path());
    let b = run(dir_b.path());
    verdict(
        "determinism",
        a == b,
        "run_all twice with one seed: identical non-timing report JSON",
    );
}
