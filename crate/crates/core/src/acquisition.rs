//! First layer of the dynamic selection algorithm: entropic open-set
//! active learning over the attack-train pool, plus the conventional
//! acquisition strategies used in the ablation.
//!
//! A candidate's score combines closed-set uncertainty (mean one-vs-rest
//! binary entropy of the first-level posteriors) and open-set uncertainty
//! (entropy of temperature-softened assignments to k-means centers of the
//! unlabeled working set). Batches are diversified with a farthest-first
//! filter over a shortlist of top-scoring candidates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::defenses::DefenseId;
use crate::error::{Result, SageError};
use crate::mat::{euclidean, Mat};
use crate::seed;
use crate::selector::{ForestHyper, TreeEnsemble};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// Cluster count for the open-set term (the defense class count).
    pub cluster_count: usize,
    pub temperature: f64,
    /// Warm-start fraction labeled by stratified random sampling.
    pub init_fraction: f64,
    /// Cumulative label ratios, strictly increasing.
    pub budget_schedule: Vec<f64>,
    /// Acquisition rounds between consecutive budget points.
    pub rounds_per_budget: usize,
    /// Shortlist size for the diversity filter, as a multiple of the quota.
    pub shortlist_factor: usize,
    /// Rank by largest score when true (the published selection rule).
    pub select_largest: bool,
    pub forest: ForestHyper,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            cluster_count: DefenseId::COUNT,
            temperature: 1.0,
            init_fraction: 0.10,
            budget_schedule: vec![0.01, 0.10, 0.20, 0.50],
            rounds_per_budget: 2,
            shortlist_factor: 5,
            select_largest: true,
            forest: ForestHyper::default(),
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(SageError::InvalidArgument("temperature must be > 0".into()));
        }
        if self.cluster_count < 2 {
            return Err(SageError::InvalidArgument(
                "cluster count must be >= 2".into(),
            ));
        }
        if self.budget_schedule.is_empty() {
            return Err(SageError::InvalidArgument("empty budget schedule".into()));
        }
        let mut prev = 0.0;
        for &b in &self.budget_schedule {
            if b <= prev || b > 1.0 {
                return Err(SageError::InvalidArgument(format!(
                    "budget schedule must be strictly increasing in (0, 1], got {b} after {prev}"
                )));
            }
            prev = b;
        }
        if !(0.0 < self.init_fraction && self.init_fraction <= 1.0) {
            return Err(SageError::InvalidArgument(
                "init_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Attack-train pool with its ground-truth optimal-defense labels (the
/// label oracle queried during acquisition).
#[derive(Debug, Clone)]
pub struct LabeledPool {
    pub x: Mat,
    pub labels: Vec<DefenseId>,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|d| d.index()).collect()
    }
}

/// Binary entropy in bits; zero at both endpoints.
fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Mean one-vs-rest binary entropy of the posteriors, in [0, 1].
pub fn closed_entropy(posteriors: &[f64]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(SageError::EmptyInput("no posteriors".into()));
    }
    if posteriors.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(SageError::InvalidArgument(
            "posterior outside [0, 1]".into(),
        ));
    }
    let k = posteriors.len() as f64;
    Ok(posteriors.iter().map(|&p| binary_entropy(p)).sum::<f64>() / k)
}

/// Lloyd k-means with greedy farthest-point seeding. Runs at most 100
/// iterations or until the relative inertia change drops below 1e-6; empty
/// clusters are re-seeded to the point farthest from its own center.
pub fn cluster_centers(features: &Mat, k: usize, cluster_seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = features.rows();
    if n < k {
        return Err(SageError::WorkingSetTooSmall { got: n, want: k });
    }
    let mut rng = seed::rng(cluster_seed);
    let first = rng.gen_range(0..n);
    let mut centers: Vec<Vec<f64>> = vec![features.row(first).to_vec()];
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| euclidean(features.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let mut far = 0usize;
        for i in 1..n {
            if min_dist[i] > min_dist[far] {
                far = i;
            }
        }
        centers.push(features.row(far).to_vec());
        for i in 0..n {
            let d = euclidean(features.row(i), centers.last().unwrap());
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..100 {
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = euclidean(features.row(i), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            inertia += best_d * best_d;
        }

        let d = features.cols();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed to the point farthest from its own center.
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let dist = euclidean(features.row(i), &centers[assignment[i]]);
                    if dist > far_d {
                        far_d = dist;
                        far = i;
                    }
                }
                centers[c] = features.row(far).to_vec();
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centers[c][j] = s / counts[c] as f64;
                }
            }
        }

        if (prev_inertia - inertia).abs() <= 1e-6 * prev_inertia.max(1e-12) {
            break;
        }
        prev_inertia = inertia;
    }
    Ok(centers)
}

/// Temperature-softened assignment of a point to the cluster centers,
/// computed with the max-shift trick.
pub fn soft_assignment(x: &[f64], centers: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let dists: Vec<f64> = centers.iter().map(|c| euclidean(x, c)).collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = dists
        .iter()
        .map(|&d| (-(d - min) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Normalized entropy of the soft cluster assignment, in [0, 1].
pub fn open_entropy(x: &[f64], centers: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let k = centers.len();
    if k < 2 {
        return Err(SageError::InvalidArgument(
            "open entropy needs at least 2 centers".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(SageError::InvalidArgument("temperature must be > 0".into()));
    }
    let q = soft_assignment(x, centers, temperature);
    let mut h = 0.0;
    for &qi in &q {
        if qi > 0.0 {
            h -= qi * qi.ln();
        }
    }
    Ok(h / (k as f64).ln())
}

/// Combined acquisition score for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionScore {
    pub closed: f64,
    pub open: f64,
    pub score: f64,
}

pub fn acquisition_score(
    posteriors: &[f64],
    x: &[f64],
    centers: &[Vec<f64>],
    temperature: f64,
) -> Result<AcquisitionScore> {
    let closed = closed_entropy(posteriors)?;
    let open = open_entropy(x, centers, temperature)?;
    Ok(AcquisitionScore {
        closed,
        open,
        score: closed - open,
    })
}

/// Farthest-first diversity filter. `ranked` must already be sorted by
/// descending score; the first pick is the top-ranked candidate of the
/// shortlist, each later pick maximizes its minimum distance to the batch.
pub fn select_batch(
    ranked: &[usize],
    quota: usize,
    features: &Mat,
    shortlist_factor: usize,
) -> Result<Vec<usize>> {
    if ranked.is_empty() {
        return Err(SageError::EmptyInput("no candidates to select".into()));
    }
    if quota == 0 {
        return Err(SageError::InvalidArgument("quota must be >= 1".into()));
    }
    let shortlist: Vec<usize> = ranked
        .iter()
        .copied()
        .take(shortlist_factor.max(1) * quota)
        .collect();
    if quota >= shortlist.len() {
        return Ok(shortlist);
    }
    let mut picked = vec![shortlist[0]];
    let mut min_dist: Vec<f64> = shortlist
        .iter()
        .map(|&i| euclidean(features.row(i), features.row(shortlist[0])))
        .collect();
    let mut taken = vec![false; shortlist.len()];
    taken[0] = true;
    while picked.len() < quota {
        let mut best: Option<usize> = None;
        for (pos, &cand) in shortlist.iter().enumerate() {
            if taken[pos] {
                continue;
            }
            let _ = cand;
            if best.is_none_or(|b| min_dist[pos] > min_dist[b]) {
                best = Some(pos);
            }
        }
        let pos = best.unwrap();
        taken[pos] = true;
        picked.push(shortlist[pos]);
        for (p, &cand) in shortlist.iter().enumerate() {
            if !taken[p] {
                let d = euclidean(features.row(cand), features.row(shortlist[pos]));
                if d < min_dist[p] {
                    min_dist[p] = d;
                }
            }
        }
    }
    Ok(picked)
}

/// One labeled subset per budget point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSnapshot {
    pub budget: f64,
    pub labeled: Vec<usize>,
}

/// Audit trace: one row per labeled sample with the scores that selected it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AcquisitionTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub budget: f64,
    pub sample_id: usize,
    pub closed: Option<f64>,
    pub open: Option<f64>,
    pub score: Option<f64>,
}

impl AcquisitionTrace {
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["round", "budget", "sample_id", "s_c", "s_d", "s"])?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for r in &self.rows {
            writer.write_record([
                r.round.to_string(),
                format!("{}", r.budget),
                r.sample_id.to_string(),
                fmt(r.closed),
                fmt(r.open),
                fmt(r.score),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Eoal,
    Uncertainty,
    DensityWeighted,
    BatchMode,
    StratifiedRandom,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Eoal,
        StrategyKind::Uncertainty,
        StrategyKind::DensityWeighted,
        StrategyKind::BatchMode,
        StrategyKind::StratifiedRandom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Eoal => "eoal",
            StrategyKind::Uncertainty => "uncertainty",
            StrategyKind::DensityWeighted => "density_weighted",
            StrategyKind::BatchMode => "batch_mode",
            StrategyKind::StratifiedRandom => "stratified_random",
        }
    }

    pub fn parse(name: &str) -> Result<StrategyKind> {
        StrategyKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| SageError::InvalidArgument(format!("unknown AL strategy '{name}'")))
    }
}

/// Stratified random sample of `size` indices preserving defense-class
/// proportions within ±1.
fn stratified_sample(
    labels: &[DefenseId],
    size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let n = labels.len();
    let size = size.min(n);
    let mut by_class: Vec<(DefenseId, Vec<usize>)> = Vec::new();
    for id in DefenseId::ALL {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == id).collect();
        if !idx.is_empty() {
            by_class.push((id, idx));
        }
    }
    // Largest-remainder apportionment of the requested size.
    let mut wants: Vec<(usize, f64)> = by_class
        .iter()
        .map(|(_, idx)| {
            let exact = size as f64 * idx.len() as f64 / n as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = wants.iter().map(|w| w.0).sum();
    let mut order: Vec<usize> = (0..wants.len()).collect();
    order.sort_by(|&a, &b| wants[b].1.partial_cmp(&wants[a].1).unwrap().then(a.cmp(&b)));
    for &c in &order {
        if assigned >= size {
            break;
        }
        if wants[c].0 < by_class[c].1.len() {
            wants[c].0 += 1;
            assigned += 1;
        }
    }
    // Every present class gets at least one pick when the size allows,
    // rare classes included; donors are the largest allocations.
    if size >= by_class.len() {
        while let Some(zero) = (0..wants.len()).find(|&c| wants[c].0 == 0) {
            let donor = (0..wants.len())
                .max_by_key(|&c| (wants[c].0, std::cmp::Reverse(c)))
                .unwrap();
            if wants[donor].0 <= 1 {
                break;
            }
            wants[donor].0 -= 1;
            wants[zero].0 += 1;
        }
    }
    let mut picked = Vec::with_capacity(size);
    for ((_, idx), (count, _)) in by_class.iter().zip(&wants) {
        let mut pool = idx.clone();
        pool.shuffle(rng);
        picked.extend_from_slice(&pool[..(*count).min(pool.len())]);
    }
    picked.sort_unstable();
    picked
}

fn entropy_nats(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Scores for every unlabeled candidate under one strategy.
struct ScoredCandidates {
    /// (pool index, closed, open, combined) per candidate, unranked.
    entries: Vec<(usize, Option<f64>, Option<f64>, f64)>,
}

struct RoundContext<'a> {
    pool: &'a LabeledPool,
    cfg: &'a AcquisitionConfig,
    first_level: Option<&'a TreeEnsemble>,
    centers: Option<&'a [Vec<f64>]>,
    /// Mean of L2-normalized pool vectors, for the density weight.
    density_anchor: Option<&'a [f64]>,
}

fn score_candidates(
    ctx: &RoundContext,
    unlabeled: &[usize],
    kind: StrategyKind,
) -> ScoredCandidates {
    let uniform = vec![1.0 / DefenseId::COUNT as f64; DefenseId::COUNT];
    let posteriors_of = |i: usize| -> Vec<f64> {
        match ctx.first_level {
            Some(f) => f.predict_posteriors(ctx.pool.x.row(i)),
            None => uniform.clone(),
        }
    };
    let entries = unlabeled
        .iter()
        .map(|&i| {
            let x = ctx.pool.x.row(i);
            match kind {
                StrategyKind::Eoal => {
                    let closed = closed_entropy(&posteriors_of(i)).unwrap();
                    let open = match ctx.centers {
                        Some(c) if c.len() >= 2 => {
                            open_entropy(x, c, ctx.cfg.temperature).unwrap()
                        }
                        _ => 0.0,
                    };
                    let s = closed - open;
                    let s = if ctx.cfg.select_largest { s } else { -s };
                    (i, Some(closed), Some(open), s)
                }
                StrategyKind::Uncertainty | StrategyKind::BatchMode => {
                    let s = entropy_nats(&posteriors_of(i));
                    (i, None, None, s)
                }
                StrategyKind::DensityWeighted => {
                    let ent = entropy_nats(&posteriors_of(i));
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let sim = match ctx.density_anchor {
                        Some(anchor) if norm > 0.0 => {
                            x.iter().zip(anchor).map(|(a, b)| a * b).sum::<f64>() / norm
                        }
                        _ => 0.0,
                    };
                    (i, None, None, ent * sim)
                }
                StrategyKind::StratifiedRandom => (i, None, None, 0.0),
            }
        })
        .collect();
    ScoredCandidates { entries }
}

/// Mean of the L2-normalized rows; candidates' mean cosine similarity to
/// the pool is their normalized dot product with this vector.
fn density_anchor(x: &Mat, members: &[usize]) -> Vec<f64> {
    let d = x.cols();
    let mut anchor = vec![0.0; d];
    for &i in members {
        let row = x.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (a, v) in anchor.iter_mut().zip(row) {
                *a += v / norm;
            }
        }
    }
    for a in anchor.iter_mut() {
        *a /= members.len().max(1) as f64;
    }
    anchor
}

fn fit_first_level(
    pool: &LabeledPool,
    labeled: &[usize],
    cfg: &AcquisitionConfig,
    round: usize,
) -> Option<TreeEnsemble> {
    let labels = pool.label_indices();
    let y: Vec<usize> = labeled.iter().map(|&i| labels[i]).collect();
    let mut distinct = y.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || labeled.len() < 10 {
        return None;
    }
    let x = pool.x.select_rows(labeled);
    let mut hyper = cfg.forest.clone();
    hyper.seed = seed::derive(cfg.seed, &format!("first-level-{round}"));
    TreeEnsemble::fit(&x, &y, DefenseId::COUNT, &hyper).ok()
}

/// Acquire until `target` samples are labeled, in `rounds` chunks with the
/// first-level model and clusters refreshed between chunks.
#[allow(clippy::too_many_arguments)]
fn acquire_to_target(
    pool: &LabeledPool,
    cfg: &AcquisitionConfig,
    kind: StrategyKind,
    labeled: &mut Vec<usize>,
    is_labeled: &mut [bool],
    target: usize,
    budget: f64,
    trace: &mut AcquisitionTrace,
    round_base: usize,
) {
    let n = pool.len();
    let rounds = cfg.rounds_per_budget.max(1);
    for r in 0..rounds {
        if labeled.len() >= target {
            break;
        }
        let remaining_rounds = rounds - r;
        let quota = (target - labeled.len()).div_ceil(remaining_rounds);
        let unlabeled: Vec<usize> = (0..n).filter(|&i| !is_labeled[i]).collect();
        if unlabeled.is_empty() {
            break;
        }
        let quota = quota.min(unlabeled.len());
        let round_id = round_base + r;

        if kind == StrategyKind::StratifiedRandom {
            let mut rng = seed::rng(seed::derive(
                cfg.seed,
                &format!("stratified-round-{budget}-{round_id}"),
            ));
            let labels: Vec<DefenseId> = unlabeled.iter().map(|&i| pool.labels[i]).collect();
            let picks = stratified_sample(&labels, quota, &mut rng);
            for p in picks {
                let i = unlabeled[p];
                labeled.push(i);
                is_labeled[i] = true;
                trace.rows.push(TraceRow {
                    round: round_id,
                    budget,
                    sample_id: i,
                    closed: None,
                    open: None,
                    score: None,
                });
            }
            continue;
        }

        let first_level = fit_first_level(pool, labeled, cfg, round_id);
        let centers = if kind == StrategyKind::Eoal {
            let k = cfg.cluster_count.min(unlabeled.len());
            if k >= 2 {
                let cx = pool.x.select_rows(&unlabeled);
                cluster_centers(
                    &cx,
                    k,
                    seed::derive(cfg.seed, &format!("clusters-{budget}-{round_id}")),
                )
                .ok()
            } else {
                None
            }
        } else {
            None
        };
        let anchor = if kind == StrategyKind::DensityWeighted {
            Some(density_anchor(&pool.x, &unlabeled))
        } else {
            None
        };
        let ctx = RoundContext {
            pool,
            cfg,
            first_level: first_level.as_ref(),
            centers: centers.as_deref(),
            density_anchor: anchor.as_deref(),
        };
        let scored = score_candidates(&ctx, &unlabeled, kind);

        let mut order: Vec<usize> = (0..scored.entries.len()).collect();
        order.sort_by(|&a, &b| {
            scored.entries[b]
                .3
                .partial_cmp(&scored.entries[a].3)
                .unwrap()
                .then(scored.entries[a].0.cmp(&scored.entries[b].0))
        });
        let ranked: Vec<usize> = order.iter().map(|&p| scored.entries[p].0).collect();

        let picks = match kind {
            StrategyKind::Eoal | StrategyKind::BatchMode => {
                select_batch(&ranked, quota, &pool.x, cfg.shortlist_factor).unwrap()
            }
            _ => ranked.into_iter().take(quota).collect(),
        };
        let score_of: std::collections::BTreeMap<usize, (Option<f64>, Option<f64>, f64)> = scored
            .entries
            .iter()
            .map(|&(i, c, o, s)| (i, (c, o, s)))
            .collect();
        for i in picks {
            let (c, o, s) = score_of[&i];
            labeled.push(i);
            is_labeled[i] = true;
            trace.rows.push(TraceRow {
                round: round_id,
                budget,
                sample_id: i,
                closed: c,
                open: o,
                score: Some(s),
            });
        }
    }
}

/// Run one acquisition strategy over the full budget schedule. Budgets at
/// or above the warm-start fraction share one growing trajectory; smaller
/// budgets get their own trajectory seeded with a half-budget stratified
/// sample. The stratified-random control draws each budget directly.
pub fn run_strategy(
    pool: &LabeledPool,
    cfg: &AcquisitionConfig,
    kind: StrategyKind,
) -> Result<(Vec<BudgetSnapshot>, AcquisitionTrace)> {
    cfg.validate()?;
    let n = pool.len();
    if n == 0 {
        return Err(SageError::EmptyInput("empty acquisition pool".into()));
    }
    let smallest = cfg.budget_schedule[0];
    if (smallest * n as f64).round() < 1.0 {
        return Err(SageError::InvalidArgument(format!(
            "pool of {n} samples is too small for budget {smallest}"
        )));
    }

    let mut snapshots = Vec::new();
    let mut trace = AcquisitionTrace::default();

    if kind == StrategyKind::StratifiedRandom {
        for (b_idx, &budget) in cfg.budget_schedule.iter().enumerate() {
            let target = ((budget * n as f64).round() as usize).clamp(1, n);
            let mut rng = seed::rng(seed::derive(cfg.seed, &format!("stratified-{budget}")));
            let labeled = stratified_sample(&pool.labels, target, &mut rng);
            for &i in &labeled {
                trace.rows.push(TraceRow {
                    round: b_idx,
                    budget,
                    sample_id: i,
                    closed: None,
                    open: None,
                    score: None,
                });
            }
            snapshots.push(BudgetSnapshot { budget, labeled });
        }
        return Ok((snapshots, trace));
    }

    // Trajectories for budgets below the warm start: a proportionally
    // smaller stratified seed (half the budget) topped up by acquisition.
    let small: Vec<f64> = cfg
        .budget_schedule
        .iter()
        .copied()
        .filter(|&b| b < cfg.init_fraction)
        .collect();
    for budget in small {
        let target = ((budget * n as f64).round() as usize).clamp(1, n);
        let warm_size = ((0.5 * target as f64).round() as usize).max(1);
        let mut rng = seed::rng(seed::derive(cfg.seed, &format!("warm-{budget}")));
        let mut labeled = stratified_sample(&pool.labels, warm_size, &mut rng);
        let mut is_labeled = vec![false; n];
        for &i in &labeled {
            is_labeled[i] = true;
            trace.rows.push(TraceRow {
                round: 0,
                budget,
                sample_id: i,
                closed: None,
                open: None,
                score: None,
            });
        }
        acquire_to_target(
            pool,
            cfg,
            kind,
            &mut labeled,
            &mut is_labeled,
            target,
            budget,
            &mut trace,
            1,
        );
        let mut sorted = labeled.clone();
        sorted.sort_unstable();
        snapshots.push(BudgetSnapshot {
            budget,
            labeled: sorted,
        });
    }

    // Main trajectory: warm start at init_fraction, then grow.
    let large: Vec<f64> = cfg
        .budget_schedule
        .iter()
        .copied()
        .filter(|&b| b >= cfg.init_fraction)
        .collect();
    if !large.is_empty() {
        let warm_size = ((cfg.init_fraction * n as f64).round() as usize).clamp(1, n);
        let mut rng = seed::rng(seed::derive(cfg.seed, "warm"));
        let mut labeled = stratified_sample(&pool.labels, warm_size, &mut rng);
        let mut is_labeled = vec![false; n];
        for &i in &labeled {
            is_labeled[i] = true;
            trace.rows.push(TraceRow {
                round: 0,
                budget: cfg.init_fraction,
                sample_id: i,
                closed: None,
                open: None,
                score: None,
            });
        }
        let mut round_base = 1;
        for &budget in &large {
            let target = ((budget * n as f64).round() as usize).clamp(1, n);
            if budget >= 1.0 {
                let all: Vec<usize> = (0..n).collect();
                snapshots.push(BudgetSnapshot {
                    budget,
                    labeled: all,
                });
                continue;
            }
            acquire_to_target(
                pool,
                cfg,
                kind,
                &mut labeled,
                &mut is_labeled,
                target,
                budget,
                &mut trace,
                round_base,
            );
            round_base += cfg.rounds_per_budget.max(1);
            let mut sorted = labeled.clone();
            sorted.sort_unstable();
            snapshots.push(BudgetSnapshot {
                budget,
                labeled: sorted,
            });
        }
    }

    snapshots.sort_by(|a, b| a.budget.partial_cmp(&b.budget).unwrap());
    Ok((snapshots, trace))
}

/// EOAL acquisition over the budget schedule.
pub fn run_rounds(
    pool: &LabeledPool,
    cfg: &AcquisitionConfig,
) -> Result<(Vec<BudgetSnapshot>, AcquisitionTrace)> {
    run_strategy(pool, cfg, StrategyKind::Eoal)
}
