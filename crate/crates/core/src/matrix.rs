//! Per-sample × per-defense performance matrix, optimal-defense labels,
//! and the hindsight Oracle assignment.
//!
//! Each entry records whether a defense classified an adversarial sample
//! correctly. The per-sample optimal defense is the correct one with the
//! highest pool-level Macro-F1 (ties by defense id order); samples no
//! defense handles fall back to the globally best defense.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{AdvDataset, AttackKind};
use crate::defenses::{defended_predict, DefenseId, Portfolio};
use crate::error::{Result, SageError};
use crate::evaluation::macro_f1;
use crate::mat::Mat;

/// Metadata for one adversarial sample in a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub sample_id: usize,
    pub attack: AttackKind,
    pub epsilon: f64,
    pub true_label: usize,
}

/// Concatenated adversarial pool with aligned metadata.
#[derive(Debug, Clone)]
pub struct AttackPool {
    pub x: Mat,
    pub rows: Vec<PoolRow>,
}

impl AttackPool {
    pub fn from_entries(entries: &[&AdvDataset]) -> Result<AttackPool> {
        if entries.is_empty() {
            return Err(SageError::EmptyInput("empty adversarial pool".into()));
        }
        let d = entries[0].x_adv.cols();
        let total: usize = entries.iter().map(|e| e.n_samples()).sum();
        let mut x = Mat::zeros(total, d);
        let mut rows = Vec::with_capacity(total);
        let mut at = 0;
        for entry in entries {
            for i in 0..entry.n_samples() {
                x.row_mut(at).copy_from_slice(entry.x_adv.row(i));
                rows.push(PoolRow {
                    sample_id: i,
                    attack: entry.spec.kind,
                    epsilon: entry.spec.epsilon,
                    true_label: entry.y[i],
                });
                at += 1;
            }
        }
        Ok(AttackPool { x, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.true_label).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PerformanceMatrix {
    pub rows: Vec<PoolRow>,
    /// Predicted label per (sample, defense), defense-major in id order.
    pub predictions: Vec<Vec<usize>>,
    /// Correctness indicator per (sample, defense).
    pub correct: Vec<Vec<bool>>,
    /// Pool-level Macro-F1 per defense.
    pub side_f1: Vec<f64>,
    pub defense_ids: Vec<DefenseId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimalLabel {
    pub sample_id: usize,
    pub defense: DefenseId,
}

/// Evaluate every portfolio member on every pool sample.
pub fn build_matrix(portfolio: &Portfolio, pool: &AttackPool) -> Result<PerformanceMatrix> {
    if pool.is_empty() {
        return Err(SageError::EmptyInput("empty pool for matrix".into()));
    }
    let class_count = portfolio.models[0].model.class_count();
    let y = pool.true_labels();

    let per_defense: Result<Vec<Vec<usize>>> = portfolio
        .models
        .par_iter()
        .map(|dm| {
            (0..pool.len())
                .map(|i| defended_predict(dm, pool.x.row(i)))
                .collect::<Result<Vec<usize>>>()
        })
        .collect();
    let per_defense = per_defense?;

    let side_f1: Vec<f64> = per_defense
        .iter()
        .map(|preds| macro_f1(&y, preds, class_count).expect("aligned label vectors"))
        .collect();

    let n = pool.len();
    let k = portfolio.len();
    let mut predictions = vec![vec![0usize; k]; n];
    let mut correct = vec![vec![false; k]; n];
    for (d, preds) in per_defense.iter().enumerate() {
        for i in 0..n {
            predictions[i][d] = preds[i];
            correct[i][d] = preds[i] == y[i];
        }
    }

    Ok(PerformanceMatrix {
        rows: pool.rows.clone(),
        predictions,
        correct,
        side_f1,
        defense_ids: portfolio.models.iter().map(|m| m.id).collect(),
    })
}

/// Highest-side-F1 correct defense per sample; defense id order breaks
/// ties; the globally best defense is the fallback when nothing is correct.
pub fn label_optimal(pm: &PerformanceMatrix) -> Vec<OptimalLabel> {
    let global_best = best_by_f1(&pm.side_f1, None);
    pm.correct
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let pick = best_by_f1(&pm.side_f1, Some(row)).unwrap_or(global_best.unwrap());
            OptimalLabel {
                sample_id: i,
                defense: pm.defense_ids[pick],
            }
        })
        .collect()
}

/// Index of the highest-F1 defense, optionally restricted to a correctness
/// mask. Ties resolve to the lowest index, which is defense id order.
fn best_by_f1(side_f1: &[f64], mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (d, &f1) in side_f1.iter().enumerate() {
        if let Some(m) = mask {
            if !m[d] {
                continue;
            }
        }
        if best.is_none_or(|b| f1 > side_f1[b]) {
            best = Some(d);
        }
    }
    best
}

/// Hindsight per-sample assignment over a test pool: the same rule as
/// [`label_optimal`], computed on that pool.
pub fn oracle_assign(portfolio: &Portfolio, pool: &AttackPool) -> Result<Vec<DefenseId>> {
    let pm = build_matrix(portfolio, pool)?;
    Ok(label_optimal(&pm).into_iter().map(|l| l.defense).collect())
}

/// Matrix CSV: sample_id, attack, epsilon, true_label, one 0/1 column per
/// defense, optimal_label.
pub fn save_matrix_csv(
    pm: &PerformanceMatrix,
    labels: &[OptimalLabel],
    path: &std::path::Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "sample_id".to_string(),
        "attack".to_string(),
        "epsilon".to_string(),
        "true_label".to_string(),
    ];
    header.extend(pm.defense_ids.iter().map(|d| d.name().to_string()));
    header.push("optimal_label".into());
    writer.write_record(&header)?;
    for (i, row) in pm.rows.iter().enumerate() {
        let mut rec = vec![
            row.sample_id.to_string(),
            row.attack.name().to_string(),
            format!("{}", row.epsilon),
            row.true_label.to_string(),
        ];
        rec.extend(pm.correct[i].iter().map(|&c| u8::from(c).to_string()));
        rec.push(labels[i].defense.name().to_string());
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Side table CSV: defense_id, macro_f1.
pub fn save_side_table_csv(pm: &PerformanceMatrix, path: &std::path::Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["defense_id", "macro_f1"])?;
    for (d, f1) in pm.defense_ids.iter().zip(&pm.side_f1) {
        writer.write_record([d.name(), &format!("{f1}")])?;
    }
    writer.flush()?;
    Ok(())
}
