//! Metrics, baselines, scoring, robustness protocols, and timing.
//!
//! Policies dispatch each test sample to a defense (or to the undefended
//! base model) and are scored with Macro-F1 and the sample-count-weighted
//! Score. Predictions of every portfolio member on every test sample are
//! cached once, so policy evaluation is a lookup; the timing report instead
//! measures real per-sample dispatch plus defended inference.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    run_strategy, AcquisitionConfig, AcquisitionTrace, BudgetSnapshot, LabeledPool, StrategyKind,
};
use crate::attacks::{AdvDataset, AttackKind};
use crate::data::Dataset;
use crate::defenses::{defended_predict, DefenseId, Portfolio};
use crate::error::{Result, SageError};
use crate::mat::manhattan;
use crate::matrix::{build_matrix, label_optimal, AttackPool, OptimalLabel, PerformanceMatrix};
use crate::nnet::NeuralModel;
use crate::seed;
use crate::selector::{self, TreeEnsemble};

/// Unweighted mean of per-class F1. Classes absent from both the truth and
/// the predictions are excluded; a class with no true positives scores 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], class_count: usize) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(SageError::DimMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
            context: "macro_f1 labels".into(),
        });
    }
    if y_true.is_empty() {
        return Err(SageError::EmptyInput("macro_f1 on empty labels".into()));
    }
    if y_true.iter().chain(y_pred).any(|&c| c >= class_count) {
        return Err(SageError::InvalidArgument("label out of range".into()));
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fnn = vec![0usize; class_count];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..class_count {
        if tp[c] == 0 && fp[c] == 0 && fnn[c] == 0 {
            continue;
        }
        counted += 1;
        if tp[c] > 0 {
            let precision = tp[c] as f64 / (tp[c] + fp[c]) as f64;
            let recall = tp[c] as f64 / (tp[c] + fnn[c]) as f64;
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / counted.max(1) as f64)
}

/// Sample-count-weighted average of per-defense scores.
pub fn weighted_score(counts: &[usize], f1s: &[f64]) -> Result<f64> {
    if counts.len() != f1s.len() {
        return Err(SageError::DimMismatch {
            expected: counts.len(),
            got: f1s.len(),
            context: "weighted_score".into(),
        });
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(SageError::EmptyInput(
            "weighted_score with zero samples".into(),
        ));
    }
    Ok(counts
        .iter()
        .zip(f1s)
        .map(|(&c, &f)| c as f64 / total as f64 * f)
        .sum())
}

/// Per-sample dispatch decision: the base model or one portfolio column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assign {
    Base,
    Col(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Sage,
    Oracle,
    DynamicRecommend,
    BestStatic,
    Random,
    NoDefense,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Sage => "SAGE",
            PolicyKind::Oracle => "ORACLE",
            PolicyKind::DynamicRecommend => "DYNAMIC_RECOMMEND",
            PolicyKind::BestStatic => "BEST_STATIC",
            PolicyKind::Random => "RANDOM",
            PolicyKind::NoDefense => "NO_DEFENSE",
        }
    }
}

/// Fully parameterized policy.
pub enum PolicySpec<'a> {
    Sage(&'a TreeEnsemble),
    Oracle,
    DynamicRecommend { k: usize },
    BestStatic,
    Random { runs: usize, seed: u64 },
    NoDefense,
}

impl PolicySpec<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicySpec::Sage(_) => PolicyKind::Sage,
            PolicySpec::Oracle => PolicyKind::Oracle,
            PolicySpec::DynamicRecommend { .. } => PolicyKind::DynamicRecommend,
            PolicySpec::BestStatic => PolicyKind::BestStatic,
            PolicySpec::Random { .. } => PolicyKind::Random,
            PolicySpec::NoDefense => PolicyKind::NoDefense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsCell {
    pub epsilon: f64,
    pub f1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub cells: Vec<EpsCell>,
    pub avg_f1: f64,
    pub avg_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub clean_f1: f64,
    pub clean_score: f64,
    pub attacks: Vec<AttackRow>,
    /// Cross-attack averages (clean row excluded).
    pub average_f1: f64,
    pub average_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub train_epsilon: f64,
    pub eps_grid: Vec<f64>,
    pub attack_kinds: Vec<String>,
    pub excluded_kinds: Vec<String>,
    pub budgets: Vec<f64>,
    pub deploy_budget: f64,
    pub seed: u64,
    /// Per-attack rows average their per-ε Macro-F1 cells.
    pub eps_rows_averaged: bool,
    /// Evaluation covers the training strength too when true; otherwise
    /// only the unseen strengths (the ε-shift protocol).
    pub includes_train_epsilon: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub policy: String,
    pub ms_per_sample: f64,
    pub defended_calls_per_sample: f64,
    pub selector_calls_per_sample: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TimingReport {
    pub entries: Vec<TimingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub policies: Vec<PolicyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name)
    }

    /// Plot-ready CSV mirroring the final-performance table layout: one row
    /// per attack (clean first, average last), one column per policy.
    pub fn table_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("row");
        for p in &self.policies {
            out.push(',');
            out.push_str(&p.policy);
        }
        out.push('\n');
        out.push_str("Clean");
        for p in &self.policies {
            out.push_str(&format!(",{:.4}", p.clean_f1));
        }
        out.push('\n');
        if let Some(first) = self.policies.first() {
            for (row_idx, row) in first.attacks.iter().enumerate() {
                out.push_str(&row.attack);
                for p in &self.policies {
                    out.push_str(&format!(",{:.4}", p.attacks[row_idx].avg_f1));
                }
                out.push('\n');
            }
        }
        out.push_str("Average");
        for p in &self.policies {
            out.push_str(&format!(",{:.4}", p.average_f1));
        }
        out.push('\n');
        out
    }
}

/// Cached predictions and oracle assignments over the evaluation pools.
pub struct Evaluator<'a> {
    pub portfolio: &'a Portfolio,
    pub base: &'a NeuralModel,
    pub train_pool: &'a AttackPool,
    pub train_matrix: &'a PerformanceMatrix,
    pub train_labels: &'a [OptimalLabel],
    pub clean_test: &'a Dataset,
    pub entries: Vec<&'a AdvDataset>,
    class_count: usize,
    defense_preds: Vec<Vec<Vec<usize>>>,
    base_preds: Vec<Vec<usize>>,
    clean_defense_preds: Vec<Vec<usize>>,
    clean_base_preds: Vec<usize>,
    oracle_cols: Vec<Vec<usize>>,
    oracle_clean_cols: Vec<usize>,
    best_static_col: usize,
}

/// Matrix assembled from cached predictions (no re-inference).
fn matrix_from_preds(
    rows: Vec<crate::matrix::PoolRow>,
    per_defense: &[Vec<usize>],
    defense_ids: &[DefenseId],
    class_count: usize,
) -> PerformanceMatrix {
    let y: Vec<usize> = rows.iter().map(|r| r.true_label).collect();
    let side_f1: Vec<f64> = per_defense
        .iter()
        .map(|p| macro_f1(&y, p, class_count).expect("aligned labels"))
        .collect();
    let n = rows.len();
    let k = per_defense.len();
    let mut predictions = vec![vec![0usize; k]; n];
    let mut correct = vec![vec![false; k]; n];
    for (d, preds) in per_defense.iter().enumerate() {
        for i in 0..n {
            predictions[i][d] = preds[i];
            correct[i][d] = preds[i] == y[i];
        }
    }
    PerformanceMatrix {
        rows,
        predictions,
        correct,
        side_f1,
        defense_ids: defense_ids.to_vec(),
    }
}

impl<'a> Evaluator<'a> {
    pub fn new(
        portfolio: &'a Portfolio,
        base: &'a NeuralModel,
        train_pool: &'a AttackPool,
        train_matrix: &'a PerformanceMatrix,
        train_labels: &'a [OptimalLabel],
        clean_test: &'a Dataset,
        entries: Vec<&'a AdvDataset>,
    ) -> Result<Evaluator<'a>> {
        if entries.is_empty() {
            return Err(SageError::EmptyInput("no test entries".into()));
        }
        let class_count = clean_test.class_count;
        let defense_preds: Vec<Vec<Vec<usize>>> = entries
            .par_iter()
            .map(|e| {
                portfolio
                    .models
                    .iter()
                    .map(|dm| {
                        (0..e.n_samples())
                            .map(|i| defended_predict(dm, e.x_adv.row(i)))
                            .collect::<Result<Vec<usize>>>()
                    })
                    .collect::<Result<Vec<Vec<usize>>>>()
            })
            .collect::<Result<_>>()?;
        let base_preds: Vec<Vec<usize>> = entries
            .par_iter()
            .map(|e| base.predict_batch(&e.x_adv))
            .collect();
        let clean_defense_preds: Vec<Vec<usize>> = portfolio
            .models
            .par_iter()
            .map(|dm| {
                (0..clean_test.n_samples())
                    .map(|i| defended_predict(dm, clean_test.x.row(i)))
                    .collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<_>>()?;
        let clean_base_preds = base.predict_batch(&clean_test.x);

        // Oracle over the concatenated adversarial test pool: pool-level
        // side F1 breaks ties, exactly as on the training side.
        let defense_ids: Vec<DefenseId> = portfolio.models.iter().map(|m| m.id).collect();
        let mut all_rows = Vec::new();
        let mut all_preds: Vec<Vec<usize>> = vec![Vec::new(); portfolio.len()];
        for (e_idx, e) in entries.iter().enumerate() {
            for i in 0..e.n_samples() {
                all_rows.push(crate::matrix::PoolRow {
                    sample_id: i,
                    attack: e.spec.kind,
                    epsilon: e.spec.epsilon,
                    true_label: e.y[i],
                });
            }
            for (d, col) in all_preds.iter_mut().enumerate() {
                col.extend_from_slice(&defense_preds[e_idx][d]);
            }
        }
        let test_matrix = matrix_from_preds(all_rows, &all_preds, &defense_ids, class_count);
        let oracle_flat: Vec<usize> = label_optimal(&test_matrix)
            .into_iter()
            .map(|l| {
                defense_ids
                    .iter()
                    .position(|&d| d == l.defense)
                    .expect("oracle label from portfolio")
            })
            .collect();
        let mut oracle_cols = Vec::with_capacity(entries.len());
        let mut at = 0;
        for e in &entries {
            oracle_cols.push(oracle_flat[at..at + e.n_samples()].to_vec());
            at += e.n_samples();
        }

        let clean_rows: Vec<crate::matrix::PoolRow> = (0..clean_test.n_samples())
            .map(|i| crate::matrix::PoolRow {
                sample_id: i,
                attack: AttackKind::Fgsm,
                epsilon: 0.0,
                true_label: clean_test.y[i],
            })
            .collect();
        let clean_matrix =
            matrix_from_preds(clean_rows, &clean_defense_preds, &defense_ids, class_count);
        let oracle_clean_cols: Vec<usize> = label_optimal(&clean_matrix)
            .into_iter()
            .map(|l| defense_ids.iter().position(|&d| d == l.defense).unwrap())
            .collect();

        let best_static_col = best_static_from_matrix(train_matrix);

        Ok(Evaluator {
            portfolio,
            base,
            train_pool,
            train_matrix,
            train_labels,
            clean_test,
            entries,
            class_count,
            defense_preds,
            base_preds,
            clean_defense_preds,
            clean_base_preds,
            oracle_cols,
            oracle_clean_cols,
            best_static_col,
        })
    }

    pub fn best_static_id(&self) -> DefenseId {
        self.train_matrix.defense_ids[self.best_static_col]
    }

    fn entry_labels(&self, entry: usize) -> &[usize] {
        &self.entries[entry].y
    }

    fn predict_with(&self, entry: Option<usize>, assign: Assign, sample: usize) -> usize {
        match (entry, assign) {
            (Some(e), Assign::Base) => self.base_preds[e][sample],
            (Some(e), Assign::Col(c)) => self.defense_preds[e][c][sample],
            (None, Assign::Base) => self.clean_base_preds[sample],
            (None, Assign::Col(c)) => self.clean_defense_preds[c][sample],
        }
    }

    /// Assignments of one policy on one entry (`None` = the clean pool).
    fn assignments(&self, spec: &PolicySpec, entry: Option<usize>, run: usize) -> Vec<Assign> {
        let n = match entry {
            Some(e) => self.entries[e].n_samples(),
            None => self.clean_test.n_samples(),
        };
        match spec {
            PolicySpec::NoDefense => vec![Assign::Base; n],
            PolicySpec::BestStatic => vec![Assign::Col(self.best_static_col); n],
            PolicySpec::Oracle => match entry {
                Some(e) => self.oracle_cols[e].iter().map(|&c| Assign::Col(c)).collect(),
                None => self
                    .oracle_clean_cols
                    .iter()
                    .map(|&c| Assign::Col(c))
                    .collect(),
            },
            PolicySpec::Random { seed: s, .. } => {
                let tag = match entry {
                    Some(e) => format!("random-{run}-entry-{e}"),
                    None => format!("random-{run}-clean"),
                };
                let mut rng = seed::rng(seed::derive(*s, &tag));
                (0..n)
                    .map(|_| Assign::Col(rng.gen_range(0..self.portfolio.len())))
                    .collect()
            }
            PolicySpec::Sage(ens) => {
                let x = match entry {
                    Some(e) => &self.entries[e].x_adv,
                    None => &self.clean_test.x,
                };
                (0..n)
                    .map(|i| {
                        let id = selector::predict_defense(ens, x.row(i));
                        Assign::Col(self.col_of(id))
                    })
                    .collect()
            }
            PolicySpec::DynamicRecommend { k } => {
                let x = match entry {
                    Some(e) => &self.entries[e].x_adv,
                    None => &self.clean_test.x,
                };
                (0..n)
                    .into_par_iter()
                    .map(|i| Assign::Col(self.col_of(self.recommend(x.row(i), (*k).max(1)))))
                    .collect()
            }
        }
    }

    fn col_of(&self, id: DefenseId) -> usize {
        self.train_matrix
            .defense_ids
            .iter()
            .position(|&d| d == id)
            .expect("defense id present in portfolio")
    }

    /// Nearest attack-train samples by Manhattan distance vote on their
    /// optimal labels; ties (distance and vote) resolve to the lower index
    /// and the earlier defense id.
    fn recommend(&self, x: &[f64], k: usize) -> DefenseId {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in 0..self.train_pool.len() {
            let d = manhattan(x, self.train_pool.x.row(i));
            let pos = best.partition_point(|&(bd, bi)| bd < d || (bd == d && bi < i));
            if pos < k {
                best.insert(pos, (d, i));
                if best.len() > k {
                    best.pop();
                }
            }
        }
        let mut votes = [0usize; DefenseId::COUNT];
        for &(_, i) in &best {
            votes[self.train_labels[i].defense.index()] += 1;
        }
        let mut winner = 0usize;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[winner] {
                winner = c;
            }
        }
        DefenseId::ALL[winner]
    }

    /// Macro-F1 and weighted Score of an assignment on one entry.
    fn score_assignment(&self, entry: Option<usize>, assigns: &[Assign]) -> (f64, f64) {
        let y: Vec<usize> = match entry {
            Some(e) => self.entry_labels(e).to_vec(),
            None => self.clean_test.y.clone(),
        };
        let preds: Vec<usize> = assigns
            .iter()
            .enumerate()
            .map(|(i, &a)| self.predict_with(entry, a, i))
            .collect();
        let f1 = macro_f1(&y, &preds, self.class_count).expect("aligned predictions");

        // Weighted Score: group samples by assigned model, score each group.
        let mut groups: Vec<(Assign, Vec<usize>)> = Vec::new();
        for (i, &a) in assigns.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == a) {
                Some((_, members)) => members.push(i),
                None => groups.push((a, vec![i])),
            }
        }
        let mut counts = Vec::with_capacity(groups.len());
        let mut f1s = Vec::with_capacity(groups.len());
        for (_, members) in &groups {
            let gy: Vec<usize> = members.iter().map(|&i| y[i]).collect();
            let gp: Vec<usize> = members.iter().map(|&i| preds[i]).collect();
            counts.push(members.len());
            f1s.push(macro_f1(&gy, &gp, self.class_count).expect("group predictions"));
        }
        let score = weighted_score(&counts, &f1s).expect("non-empty entry");
        (f1, score)
    }

    /// Full report rows for one policy.
    pub fn evaluate(&self, spec: &PolicySpec) -> Result<PolicyReport> {
        let runs = match spec {
            PolicySpec::Random { runs, .. } => (*runs).max(1),
            _ => 1,
        };

        let mut per_entry_f1 = vec![0.0; self.entries.len()];
        let mut per_entry_score = vec![0.0; self.entries.len()];
        let mut clean_f1 = 0.0;
        let mut clean_score = 0.0;
        let mut run_averages = Vec::with_capacity(runs);
        for run in 0..runs {
            let mut this_run = Vec::with_capacity(self.entries.len());
            for e in 0..self.entries.len() {
                let assigns = self.assignments(spec, Some(e), run);
                let (f1, score) = self.score_assignment(Some(e), &assigns);
                per_entry_f1[e] += f1 / runs as f64;
                per_entry_score[e] += score / runs as f64;
                this_run.push(f1);
            }
            let ac = self.assignments(spec, None, run);
            let (cf1, cscore) = self.score_assignment(None, &ac);
            clean_f1 += cf1 / runs as f64;
            clean_score += cscore / runs as f64;
            run_averages.push(this_run.iter().sum::<f64>() / this_run.len() as f64);
        }

        let random_std_err = if runs > 1 {
            let mean = run_averages.iter().sum::<f64>() / runs as f64;
            let var = run_averages
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>()
                / (runs - 1) as f64;
            Some((var / runs as f64).sqrt())
        } else {
            None
        };

        // Group entries into per-attack rows, ε cells sorted ascending.
        let mut attacks = Vec::new();
        for kind in AttackKind::ALL {
            let mut cells: Vec<EpsCell> = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.spec.kind == kind)
                .map(|(i, e)| EpsCell {
                    epsilon: e.spec.epsilon,
                    f1: per_entry_f1[i],
                    score: per_entry_score[i],
                })
                .collect();
            if cells.is_empty() {
                continue;
            }
            cells.sort_by(|a, b| a.epsilon.partial_cmp(&b.epsilon).unwrap());
            let avg_f1 = cells.iter().map(|c| c.f1).sum::<f64>() / cells.len() as f64;
            let avg_score = cells.iter().map(|c| c.score).sum::<f64>() / cells.len() as f64;
            attacks.push(AttackRow {
                attack: kind.name().to_string(),
                cells,
                avg_f1,
                avg_score,
            });
        }
        let average_f1 = attacks.iter().map(|r| r.avg_f1).sum::<f64>() / attacks.len() as f64;
        let average_score =
            attacks.iter().map(|r| r.avg_score).sum::<f64>() / attacks.len() as f64;

        Ok(PolicyReport {
            policy: spec.kind().name().to_string(),
            clean_f1,
            clean_score,
            attacks,
            average_f1,
            average_score,
            random_std_err,
        })
    }

    /// Correctly-handled flags over clean + all test entries, for the
    /// dominance checks. Random policies use their first run.
    pub fn correct_set(&self, spec: &PolicySpec) -> Vec<bool> {
        let mut out = Vec::new();
        let ac = self.assignments(spec, None, 0);
        for (i, &a) in ac.iter().enumerate() {
            out.push(self.predict_with(None, a, i) == self.clean_test.y[i]);
        }
        for e in 0..self.entries.len() {
            let assigns = self.assignments(spec, Some(e), 0);
            for (i, &a) in assigns.iter().enumerate() {
                out.push(self.predict_with(Some(e), a, i) == self.entries[e].y[i]);
            }
        }
        out
    }
}

/// Column of the defense with the highest mean per-attack-kind Macro-F1 on
/// the attack-train pool; ties break by defense id order.
pub fn best_static_from_matrix(pm: &PerformanceMatrix) -> usize {
    let mut kinds: Vec<AttackKind> = pm.rows.iter().map(|r| r.attack).collect();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    let class_count = pm
        .rows
        .iter()
        .map(|r| r.true_label)
        .max()
        .map_or(2, |m| m + 1);
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for d in 0..pm.defense_ids.len() {
        let mut total = 0.0;
        for &kind in &kinds {
            let members: Vec<usize> = (0..pm.rows.len())
                .filter(|&i| pm.rows[i].attack == kind)
                .collect();
            let y: Vec<usize> = members.iter().map(|&i| pm.rows[i].true_label).collect();
            let p: Vec<usize> = members.iter().map(|&i| pm.predictions[i][d]).collect();
            total += macro_f1(&y, &p, class_count).expect("non-empty kind group");
        }
        let score = total / kinds.len() as f64;
        if score > best_score {
            best_score = score;
            best = d;
        }
    }
    best
}

/// Everything the selection machinery produces from the attack-train pool.
pub struct SelectionOutcome {
    pub pool: AttackPool,
    pub matrix: PerformanceMatrix,
    pub labels: Vec<OptimalLabel>,
    pub snapshots: Vec<BudgetSnapshot>,
    pub trace: AcquisitionTrace,
    /// One fitted selector per budget point.
    pub selectors: Vec<(f64, TreeEnsemble)>,
    /// Index into `selectors` of the deployed budget.
    pub deployed: usize,
}

impl SelectionOutcome {
    pub fn deployed_selector(&self) -> &TreeEnsemble {
        &self.selectors[self.deployed].1
    }
}

/// Build matrix, optimal labels, acquisition snapshots, and selectors from
/// the attack-train entries.
pub fn build_selection(
    portfolio: &Portfolio,
    train_entries: &[&AdvDataset],
    acq_cfg: &AcquisitionConfig,
    deploy_budget: f64,
    strategy: StrategyKind,
) -> Result<SelectionOutcome> {
    let pool = AttackPool::from_entries(train_entries)?;
    let matrix = build_matrix(portfolio, &pool)?;
    let labels = label_optimal(&matrix);
    let lpool = LabeledPool {
        x: pool.x.clone(),
        labels: labels.iter().map(|l| l.defense).collect(),
    };
    let (snapshots, trace) = run_strategy(&lpool, acq_cfg, strategy)?;
    let mut selectors = Vec::with_capacity(snapshots.len());
    for snap in &snapshots {
        let x = lpool.x.select_rows(&snap.labeled);
        let picked: Vec<DefenseId> = snap.labeled.iter().map(|&i| lpool.labels[i]).collect();
        let mut hyper = acq_cfg.forest.clone();
        hyper.seed = seed::derive(acq_cfg.seed, &format!("selector-{}", snap.budget));
        let ens = selector::fit_or_constant(&x, &picked, &hyper)?;
        selectors.push((snap.budget, ens));
    }
    let deployed = selectors
        .iter()
        .position(|(b, _)| (*b - deploy_budget).abs() < 1e-12)
        .ok_or_else(|| {
            SageError::InvalidArgument(format!(
                "deploy budget {deploy_budget} is not in the schedule"
            ))
        })?;
    Ok(SelectionOutcome {
        pool,
        matrix,
        labels,
        snapshots,
        trace,
        selectors,
        deployed,
    })
}

/// Shared inputs for the evaluation protocols.
pub struct ProtocolInputs<'a> {
    pub base: &'a NeuralModel,
    pub portfolio: &'a Portfolio,
    pub suite: &'a crate::attacks::AttackSuite,
    pub clean_test: &'a Dataset,
    pub acq_cfg: &'a AcquisitionConfig,
    pub deploy_budget: f64,
    pub random_runs: usize,
    pub recommend_k: usize,
    pub seed: u64,
}

fn standard_policies<'a>(
    selector: &'a TreeEnsemble,
    inputs: &ProtocolInputs,
) -> Vec<PolicySpec<'a>> {
    vec![
        PolicySpec::Oracle,
        PolicySpec::Sage(selector),
        PolicySpec::DynamicRecommend {
            k: inputs.recommend_k,
        },
        PolicySpec::BestStatic,
        PolicySpec::Random {
            runs: inputs.random_runs,
            seed: seed::derive(inputs.seed, "random-policy"),
        },
        PolicySpec::NoDefense,
    ]
}

fn make_meta(
    inputs: &ProtocolInputs,
    excluded: &[AttackKind],
    include_train_eps: bool,
) -> ReportMeta {
    let mut grid: Vec<f64> = inputs
        .suite
        .entries
        .iter()
        .map(|e| e.spec.epsilon)
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let mut kinds: Vec<String> = inputs
        .suite
        .entries
        .iter()
        .map(|e| e.spec.kind.name().to_string())
        .collect();
    kinds.dedup();
    ReportMeta {
        train_epsilon: inputs.suite.train_epsilon,
        eps_grid: grid,
        attack_kinds: kinds,
        excluded_kinds: excluded.iter().map(|k| k.name().to_string()).collect(),
        budgets: inputs.acq_cfg.budget_schedule.clone(),
        deploy_budget: inputs.deploy_budget,
        seed: inputs.seed,
        eps_rows_averaged: true,
        includes_train_epsilon: include_train_eps,
    }
}

/// Evaluate every policy given a prepared selection outcome. Verifies the
/// Oracle's correct-set dominance over every portfolio-dispatch policy.
pub fn evaluate_with_selection(
    inputs: &ProtocolInputs,
    selection: &SelectionOutcome,
    include_train_eps: bool,
    excluded: &[AttackKind],
) -> Result<EvalReport> {
    let entries: Vec<&AdvDataset> = if include_train_eps {
        inputs.suite.entries.iter().collect()
    } else {
        inputs.suite.test_entries()
    };
    let evaluator = Evaluator::new(
        inputs.portfolio,
        inputs.base,
        &selection.pool,
        &selection.matrix,
        &selection.labels,
        inputs.clean_test,
        entries,
    )?;
    let selector = selection.deployed_selector();
    let policies = standard_policies(selector, inputs);
    let mut reports = Vec::with_capacity(policies.len());
    for spec in &policies {
        reports.push(evaluator.evaluate(spec)?);
    }

    let oracle_set = evaluator.correct_set(&PolicySpec::Oracle);
    for spec in &policies {
        if matches!(spec, PolicySpec::NoDefense | PolicySpec::Oracle) {
            continue;
        }
        let set = evaluator.correct_set(spec);
        for (i, (&o, &s)) in oracle_set.iter().zip(&set).enumerate() {
            if s && !o {
                return Err(SageError::InvalidArgument(format!(
                    "oracle dominance violated by {} at pooled sample {i}",
                    spec.kind().name()
                )));
            }
        }
    }

    Ok(EvalReport {
        metadata: make_meta(inputs, excluded, include_train_eps),
        policies: reports,
        timing: None,
    })
}

/// Standard run: selection machinery from the attack-train pool, evaluation
/// over the full suite plus clean data.
pub fn standard_protocol(inputs: &ProtocolInputs) -> Result<EvalReport> {
    let train_entries = inputs.suite.train_entries();
    let selection = build_selection(
        inputs.portfolio,
        &train_entries,
        inputs.acq_cfg,
        inputs.deploy_budget,
        StrategyKind::Eoal,
    )?;
    evaluate_with_selection(inputs, &selection, true, &[])
}

/// Train the selection machinery at the training strength only and report
/// on the unseen strengths plus clean data.
pub fn epsilon_shift_protocol(inputs: &ProtocolInputs) -> Result<EvalReport> {
    let train_entries = inputs.suite.train_entries();
    if train_entries.is_empty() {
        return Err(SageError::InvalidArgument(format!(
            "suite has no datasets at the training strength {}",
            inputs.suite.train_epsilon
        )));
    }
    if inputs.suite.test_entries().is_empty() {
        return Err(SageError::InvalidArgument(
            "suite has no unseen-strength datasets".into(),
        ));
    }
    let selection = build_selection(
        inputs.portfolio,
        &train_entries,
        inputs.acq_cfg,
        inputs.deploy_budget,
        StrategyKind::Eoal,
    )?;
    evaluate_with_selection(inputs, &selection, false, &[])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub excluded: Vec<String>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub baseline: EvalReport,
    pub tiers: Vec<TierReport>,
}

/// Rank attack kinds by the base model's Macro-F1 on the attack-train pool,
/// most damaging first. Default exclusion tiers nest the top three.
pub fn default_exclusion_tiers(
    base: &NeuralModel,
    suite: &crate::attacks::AttackSuite,
) -> Result<Vec<Vec<AttackKind>>> {
    let train_entries = suite.train_entries();
    if train_entries.is_empty() {
        return Err(SageError::EmptyInput("no attack-train entries".into()));
    }
    let mut ranked: Vec<(AttackKind, f64)> = Vec::new();
    for e in train_entries {
        let preds = base.predict_batch(&e.x_adv);
        let classes = e.y.iter().copied().max().unwrap_or(1) + 1;
        let f1 = macro_f1(&e.y, &preds, classes)?;
        ranked.push((e.spec.kind, f1));
    }
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then(a.0.name().cmp(b.0.name()))
    });
    let tiers = (1..=3.min(ranked.len().saturating_sub(1)))
        .map(|n| ranked.iter().take(n).map(|(k, _)| *k).collect())
        .collect();
    Ok(tiers)
}

/// Withhold attack kinds from every training stage, evaluate on the full
/// suite. Matrix, labels, acquisition, and selector are rebuilt per tier;
/// the no-exclusion baseline selection is supplied by the caller.
pub fn exclusion_protocol(
    inputs: &ProtocolInputs,
    tiers: &[Vec<AttackKind>],
    baseline_selection: &SelectionOutcome,
) -> Result<ExclusionReport> {
    let baseline = evaluate_with_selection(inputs, baseline_selection, false, &[])?;

    let mut reports = Vec::with_capacity(tiers.len());
    for excluded in tiers {
        let kept: Vec<&AdvDataset> = inputs
            .suite
            .train_entries()
            .into_iter()
            .filter(|e| !excluded.contains(&e.spec.kind))
            .collect();
        if kept.is_empty() {
            return Err(SageError::InvalidArgument(
                "exclusion tier removes every attack kind".into(),
            ));
        }
        let selection = build_selection(
            inputs.portfolio,
            &kept,
            inputs.acq_cfg,
            inputs.deploy_budget,
            StrategyKind::Eoal,
        )?;
        let report = evaluate_with_selection(inputs, &selection, false, excluded)?;
        reports.push(TierReport {
            excluded: excluded.iter().map(|k| k.name().to_string()).collect(),
            report,
        });
    }
    Ok(ExclusionReport {
        baseline,
        tiers: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub budget: f64,
    /// Macro-F1 of the selector's defense-label predictions against the
    /// hindsight-optimal labels of the test pool.
    pub selector_label_f1: f64,
    pub average_f1: f64,
    pub average_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// One row per acquisition strategy per budget: selector quality and
/// downstream dispatch performance. The matrix artifacts of the attack-train
/// pool are supplied by the caller.
pub fn al_ablation(
    inputs: &ProtocolInputs,
    pool: &AttackPool,
    matrix: &PerformanceMatrix,
    labels: &[OptimalLabel],
) -> Result<AblationReport> {
    let lpool = LabeledPool {
        x: pool.x.clone(),
        labels: labels.iter().map(|l| l.defense).collect(),
    };

    let test_entries = inputs.suite.test_entries();
    let evaluator = Evaluator::new(
        inputs.portfolio,
        inputs.base,
        pool,
        matrix,
        labels,
        inputs.clean_test,
        test_entries.clone(),
    )?;
    let test_pool = AttackPool::from_entries(&test_entries)?;
    let oracle_test = crate::matrix::oracle_assign(inputs.portfolio, &test_pool)?;
    let oracle_idx: Vec<usize> = oracle_test.iter().map(|d| d.index()).collect();

    let mut rows = Vec::new();
    for kind in StrategyKind::ALL {
        let (snapshots, _) = run_strategy(&lpool, inputs.acq_cfg, kind)?;
        for snap in &snapshots {
            let x = lpool.x.select_rows(&snap.labeled);
            let picked: Vec<DefenseId> = snap.labeled.iter().map(|&i| lpool.labels[i]).collect();
            let mut hyper = inputs.acq_cfg.forest.clone();
            hyper.seed = seed::derive(
                inputs.acq_cfg.seed,
                &format!("ablation-{}-{}", kind.name(), snap.budget),
            );
            let ens = selector::fit_or_constant(&x, &picked, &hyper)?;
            let selector_preds: Vec<usize> = (0..test_pool.len())
                .map(|i| selector::predict_defense(&ens, test_pool.x.row(i)).index())
                .collect();
            let selector_label_f1 = macro_f1(&oracle_idx, &selector_preds, DefenseId::COUNT)?;
            let report = evaluator.evaluate(&PolicySpec::Sage(&ens))?;
            rows.push(AblationRow {
                strategy: kind.name().to_string(),
                budget: snap.budget,
                selector_label_f1,
                average_f1: report.average_f1,
                average_score: report.average_score,
            });
        }
    }
    Ok(AblationReport { rows })
}

/// Wall-clock per-sample dispatch + defended inference, measured serially
/// after a warm-up pass. The Oracle enumerates the whole portfolio per
/// sample; call counts are tracked exactly.
pub fn timing_report(
    inputs: &ProtocolInputs,
    selection: &SelectionOutcome,
    sample_cap: usize,
) -> Result<TimingReport> {
    let entries = inputs.suite.test_entries();
    let first = entries
        .first()
        .ok_or_else(|| SageError::EmptyInput("no test entries to time".into()))?;
    let n = first.n_samples().min(sample_cap.max(1));
    if n == 0 {
        return Err(SageError::EmptyInput("empty timing pool".into()));
    }
    let x = &first.x_adv;
    let y = &first.y;
    let portfolio = inputs.portfolio;
    let selector_model = selection.deployed_selector();
    let side_f1 = &selection.matrix.side_f1;
    let best_static = best_static_from_matrix(&selection.matrix);

    // Warm-up pass touches every code path outside the timed loops.
    for i in 0..n.min(100) {
        for dm in &portfolio.models {
            let _ = defended_predict(dm, x.row(i))?;
        }
        let _ = selector::predict_defense(selector_model, x.row(i));
        let _ = inputs.base.predict_sample(x.row(i));
    }

    let mut entries_out = Vec::new();

    // SAGE: one selector call + one defended inference per sample.
    let mut defended_calls = 0usize;
    let mut selector_calls = 0usize;
    let t0 = Instant::now();
    for i in 0..n {
        let id = selector::predict_defense(selector_model, x.row(i));
        selector_calls += 1;
        let _ = defended_predict(portfolio.get(id), x.row(i))?;
        defended_calls += 1;
    }
    let sage_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
    entries_out.push(TimingEntry {
        policy: "SAGE".into(),
        ms_per_sample: sage_ms,
        defended_calls_per_sample: defended_calls as f64 / n as f64,
        selector_calls_per_sample: selector_calls as f64 / n as f64,
        samples: n,
    });

    // ORACLE: full-portfolio enumeration per sample.
    defended_calls = 0;
    let t0 = Instant::now();
    for i in 0..n {
        let mut best: Option<(usize, bool)> = None;
        for (d, dm) in portfolio.models.iter().enumerate() {
            let pred = defended_predict(dm, x.row(i))?;
            defended_calls += 1;
            let correct = pred == y[i];
            let better = match best {
                None => true,
                Some((bd, bc)) => (correct && !bc) || (correct == bc && side_f1[d] > side_f1[bd]),
            };
            if better {
                best = Some((d, correct));
            }
        }
    }
    let oracle_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
    entries_out.push(TimingEntry {
        policy: "ORACLE".into(),
        ms_per_sample: oracle_ms,
        defended_calls_per_sample: defended_calls as f64 / n as f64,
        selector_calls_per_sample: 0.0,
        samples: n,
    });

    // DYNAMIC_RECOMMEND: nearest-neighbor scan + one defended inference.
    let train_pool = &selection.pool;
    let train_labels = &selection.labels;
    defended_calls = 0;
    let t0 = Instant::now();
    for i in 0..n {
        let mut best = (f64::INFINITY, 0usize);
        for t in 0..train_pool.len() {
            let d = manhattan(x.row(i), train_pool.x.row(t));
            if d < best.0 {
                best = (d, t);
            }
        }
        let id = train_labels[best.1].defense;
        let _ = defended_predict(portfolio.get(id), x.row(i))?;
        defended_calls += 1;
    }
    let dynamic_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
    entries_out.push(TimingEntry {
        policy: "DYNAMIC_RECOMMEND".into(),
        ms_per_sample: dynamic_ms,
        defended_calls_per_sample: defended_calls as f64 / n as f64,
        selector_calls_per_sample: 0.0,
        samples: n,
    });

    // BEST_STATIC: one defended inference, no dispatch.
    defended_calls = 0;
    let t0 = Instant::now();
    for i in 0..n {
        let _ = defended_predict(&portfolio.models[best_static], x.row(i))?;
        defended_calls += 1;
    }
    let static_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
    entries_out.push(TimingEntry {
        policy: "BEST_STATIC".into(),
        ms_per_sample: static_ms,
        defended_calls_per_sample: defended_calls as f64 / n as f64,
        selector_calls_per_sample: 0.0,
        samples: n,
    });

    // NO_DEFENSE: the undefended base model.
    let t0 = Instant::now();
    for i in 0..n {
        let _ = inputs.base.predict_sample(x.row(i));
    }
    let base_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
    entries_out.push(TimingEntry {
        policy: "NO_DEFENSE".into(),
        ms_per_sample: base_ms,
        defended_calls_per_sample: 0.0,
        selector_calls_per_sample: 0.0,
        samples: n,
    });

    Ok(TimingReport {
        entries: entries_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackSpec;
    use crate::data::synth_generate;
    use crate::defenses::DefenseModel;
    use crate::mat::Mat;

    #[test]
    fn perfect_predictions_score_one() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn all_wrong_two_class_scores_zero() {
        assert_eq!(macro_f1(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_confusion_example() {
        // y_true=[0,0,1,1], y_pred=[0,1,1,1]: F1 = (2/3 + 4/5)/2.
        let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((f1 - (2.0 / 3.0 + 4.0 / 5.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded_from_mean() {
        let f1 = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn brute_force_confusion_oracle_agrees() {
        let mut rng = seed::rng(99);
        for _ in 0..50 {
            let n = rng.gen_range(1..50);
            let c = rng.gen_range(2..5);
            let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut total = 0.0;
            let mut classes = 0usize;
            for class in 0..c {
                let tp = y_true
                    .iter()
                    .zip(&y_pred)
                    .filter(|(&t, &p)| t == class && p == class)
                    .count() as f64;
                let in_true = y_true.iter().filter(|&&t| t == class).count() as f64;
                let in_pred = y_pred.iter().filter(|&&p| p == class).count() as f64;
                if in_true == 0.0 && in_pred == 0.0 {
                    continue;
                }
                classes += 1;
                if tp > 0.0 {
                    let p = tp / in_pred;
                    let r = tp / in_true;
                    total += 2.0 * p * r / (p + r);
                }
            }
            let expect = total / classes.max(1) as f64;
            let got = macro_f1(&y_true, &y_pred, c).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(macro_f1(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn weighted_score_formula() {
        let s = weighted_score(&[60, 40], &[0.9, 0.5]).unwrap();
        assert!((s - 0.74).abs() < 1e-12);
    }

    #[test]
    fn weighted_score_single_defense_is_its_f1() {
        assert_eq!(weighted_score(&[10], &[0.83]).unwrap(), 0.83);
    }

    #[test]
    fn weighted_score_is_permutation_invariant() {
        let a = weighted_score(&[60, 40, 5], &[0.9, 0.5, 0.1]).unwrap();
        let b = weighted_score(&[5, 60, 40], &[0.1, 0.9, 0.5]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn weighted_score_zero_total_is_an_error() {
        assert!(weighted_score(&[0, 0], &[0.5, 0.5]).is_err());
    }

    /// Tiny handcrafted world: separable data, a perfect defense, a
    /// constant defense, and a clean base model.
    struct World {
        portfolio: Portfolio,
        base: NeuralModel,
        clean: Dataset,
        adv: Vec<AdvDataset>,
    }

    fn linear(w0: Vec<f64>, w1: Vec<f64>, bias: Vec<f64>) -> NeuralModel {
        let d = w0.len();
        let mut rng = seed::rng(0);
        let mut m = NeuralModel::init(&[d, 2], &mut rng);
        m.layers[0].w = Mat::from_rows(&[w0, w1]);
        m.layers[0].b = bias;
        m
    }

    fn world(seed_v: u64) -> World {
        let mut clean = synth_generate(120, 2, 2, &[0.5, 0.5], seed_v).unwrap();
        for i in 0..clean.n_samples() {
            clean.y[i] = usize::from(clean.x.get(i, 0) > 0.0);
        }
        let perfect = linear(vec![-50.0, 0.0], vec![50.0, 0.0], vec![0.0, 0.0]);
        let constant = linear(vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0]);
        let portfolio = Portfolio::from_models(vec![
            DefenseModel {
                id: DefenseId::PgdAt,
                model: perfect.clone(),
                transform: None,
                clean_accuracy: 1.0,
            },
            DefenseModel {
                id: DefenseId::Gn,
                model: constant,
                transform: None,
                clean_accuracy: 0.5,
            },
        ]);
        let adv: Vec<AdvDataset> = [0.1, 0.2]
            .iter()
            .map(|&eps| AdvDataset {
                x_adv: clean.x.clone(),
                y: clean.y.clone(),
                spec: AttackSpec::new(AttackKind::Fgsm, eps),
                sample_seeds: vec![0; clean.n_samples()],
            })
            .collect();
        World {
            portfolio,
            base: perfect,
            clean,
            adv,
        }
    }

    fn make_eval(w: &World) -> (AttackPool, PerformanceMatrix, Vec<OptimalLabel>) {
        let train_pool = AttackPool::from_entries(&[&w.adv[0]]).unwrap();
        let matrix = build_matrix(&w.portfolio, &train_pool).unwrap();
        let labels = label_optimal(&matrix);
        (train_pool, matrix, labels)
    }

    #[test]
    fn oracle_row_dominates_and_scores_high() {
        let w = world(31);
        let (train_pool, matrix, labels) = make_eval(&w);
        let evaluator = Evaluator::new(
            &w.portfolio,
            &w.base,
            &train_pool,
            &matrix,
            &labels,
            &w.clean,
            vec![&w.adv[1]],
        )
        .unwrap();
        let oracle = evaluator.evaluate(&PolicySpec::Oracle).unwrap();
        assert!((oracle.average_f1 - 1.0).abs() < 1e-12);
        let random = evaluator
            .evaluate(&PolicySpec::Random { runs: 20, seed: 5 })
            .unwrap();
        assert!(oracle.average_f1 >= random.average_f1);
        assert!(random.random_std_err.is_some());

        let oset = evaluator.correct_set(&PolicySpec::Oracle);
        let rset = evaluator.correct_set(&PolicySpec::Random { runs: 20, seed: 5 });
        for (o, r) in oset.iter().zip(&rset) {
            assert!(*o || !*r);
        }
    }

    #[test]
    fn best_static_picks_the_strong_defense() {
        let w = world(32);
        let (_, matrix, _) = make_eval(&w);
        assert_eq!(best_static_from_matrix(&matrix), 0);
    }

    #[test]
    fn random_reruns_agree_within_three_standard_errors() {
        let w = world(33);
        let (train_pool, matrix, labels) = make_eval(&w);
        let evaluator = Evaluator::new(
            &w.portfolio,
            &w.base,
            &train_pool,
            &matrix,
            &labels,
            &w.clean,
            vec![&w.adv[1]],
        )
        .unwrap();
        let r1 = evaluator
            .evaluate(&PolicySpec::Random { runs: 300, seed: 6 })
            .unwrap();
        let r2 = evaluator
            .evaluate(&PolicySpec::Random { runs: 300, seed: 7 })
            .unwrap();
        let se = r1.random_std_err.unwrap() + r2.random_std_err.unwrap();
        assert!(
            (r1.average_f1 - r2.average_f1).abs() <= 3.0 * se.max(1e-9),
            "means {} vs {} with se {se}",
            r1.average_f1,
            r2.average_f1
        );
    }

    #[test]
    fn no_defense_uses_base_model() {
        let w = world(34);
        let (train_pool, matrix, labels) = make_eval(&w);
        let evaluator = Evaluator::new(
            &w.portfolio,
            &w.base,
            &train_pool,
            &matrix,
            &labels,
            &w.clean,
            vec![&w.adv[1]],
        )
        .unwrap();
        let nd = evaluator.evaluate(&PolicySpec::NoDefense).unwrap();
        // The base model here is the perfect linear model.
        assert!((nd.clean_f1 - 1.0).abs() < 1e-12);
        assert!((nd.average_f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_path_score_consistency_for_oracle() {
        // Weighted score from matrix-derived groups equals the score from
        // re-run defended predictions.
        let w = world(35);
        let (train_pool, matrix, labels) = make_eval(&w);
        let evaluator = Evaluator::new(
            &w.portfolio,
            &w.base,
            &train_pool,
            &matrix,
            &labels,
            &w.clean,
            vec![&w.adv[1]],
        )
        .unwrap();
        let report = evaluator.evaluate(&PolicySpec::Oracle).unwrap();
        let from_cache = report.attacks[0].cells[0].score;

        let entry = &w.adv[1];
        let test_pool = AttackPool::from_entries(&[entry]).unwrap();
        let assignment = crate::matrix::oracle_assign(&w.portfolio, &test_pool).unwrap();
        let mut groups: Vec<(DefenseId, Vec<usize>)> = Vec::new();
        for (i, id) in assignment.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| g == id) {
                Some((_, m)) => m.push(i),
                None => groups.push((*id, vec![i])),
            }
        }
        let mut counts = Vec::new();
        let mut f1s = Vec::new();
        for (id, members) in &groups {
            let dm = w.portfolio.get(*id);
            let gy: Vec<usize> = members.iter().map(|&i| entry.y[i]).collect();
            let gp: Vec<usize> = members
                .iter()
                .map(|&i| defended_predict(dm, entry.x_adv.row(i)).unwrap())
                .collect();
            counts.push(members.len());
            f1s.push(macro_f1(&gy, &gp, 2).unwrap());
        }
        let recomputed = weighted_score(&counts, &f1s).unwrap();
        assert!((from_cache - recomputed).abs() < 1e-12);
    }

    #[test]
    fn table_csv_has_expected_shape() {
        let w = world(36);
        let (train_pool, matrix, labels) = make_eval(&w);
        let evaluator = Evaluator::new(
            &w.portfolio,
            &w.base,
            &train_pool,
            &matrix,
            &labels,
            &w.clean,
            vec![&w.adv[1]],
        )
        .unwrap();
        let reports = vec![
            evaluator.evaluate(&PolicySpec::Oracle).unwrap(),
            evaluator.evaluate(&PolicySpec::NoDefense).unwrap(),
        ];
        let report = EvalReport {
            metadata: ReportMeta {
                train_epsilon: 0.1,
                eps_grid: vec![0.1, 0.2],
                attack_kinds: vec!["FGSM".into()],
                excluded_kinds: vec![],
                budgets: vec![0.5],
                deploy_budget: 0.5,
                seed: 0,
                eps_rows_averaged: true,
                includes_train_epsilon: false,
            },
            policies: reports,
            timing: None,
        };
        let csv = report.table_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,ORACLE,NO_DEFENSE");
        assert!(lines[1].starts_with("Clean,"));
        assert!(lines[2].starts_with("FGSM,"));
        assert!(lines[3].starts_with("Average,"));
    }
}
