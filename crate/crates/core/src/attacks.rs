//! Adversarial example generation over the test pool.
//!
//! Every attack perturbs within an L-infinity budget and the per-feature
//! valid box of the attacked dataset, and is deterministic given the
//! per-sample seeds derived from the suite seed. ZOO is black-box by
//! contract: it only queries forward outputs, which the [`CallCounter`]
//! wrapper enforces.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureOrigin};
use crate::error::{Result, SageError};
use crate::mat::Mat;
use crate::nnet::{self, NeuralModel};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Deepfool,
    Zoo,
    SiniFgsm,
    VniFgsm,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::Deepfool,
        AttackKind::Zoo,
        AttackKind::SiniFgsm,
        AttackKind::VniFgsm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Bim => "BIM",
            AttackKind::Pgd => "PGD",
            AttackKind::Deepfool => "DF",
            AttackKind::Zoo => "ZOO",
            AttackKind::SiniFgsm => "SINIFGSM",
            AttackKind::VniFgsm => "VNIFGSM",
        }
    }

    pub fn parse(name: &str) -> Result<AttackKind> {
        AttackKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| SageError::InvalidArgument(format!("unknown attack kind '{name}'")))
    }
}

/// Full attack parameterization. Defaults follow the standard conventions
/// for each method; anything unused by a kind is simply ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    /// Step size; `None` means the budget-filling default 2.5·ε/steps.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub overshoot: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    /// Coordinates probed per ZOO step; `None` means min(d, 16).
    pub coords_per_step: Option<usize>,
    pub decay: f64,
    pub scale_copies: usize,
    pub variance_samples: usize,
    pub variance_radius: f64,
    pub freeze_categorical: bool,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, epsilon: f64) -> AttackSpec {
        AttackSpec {
            kind,
            epsilon,
            steps: 10,
            step_size: None,
            random_start: true,
            overshoot: 0.02,
            max_iters: 50,
            fd_step: 1e-4,
            coords_per_step: None,
            decay: 1.0,
            scale_copies: 5,
            variance_samples: 5,
            variance_radius: 1.5,
            freeze_categorical: false,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }
}

/// Adversarial variant of a dataset, one row per base sample.
#[derive(Debug, Clone)]
pub struct AdvDataset {
    pub x_adv: Mat,
    pub y: Vec<usize>,
    pub spec: AttackSpec,
    pub sample_seeds: Vec<u64>,
}

impl AdvDataset {
    pub fn n_samples(&self) -> usize {
        self.x_adv.rows()
    }
}

/// Model surface the attacks are written against. Gradient-based attacks
/// use the gradient queries; ZOO must not.
pub trait Target: Sync {
    fn input_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn probs(&self, x: &[f64]) -> Vec<f64>;
    fn logits(&self, x: &[f64]) -> Vec<f64>;
    fn grad_ce(&self, x: &[f64], y: usize) -> Vec<f64>;
    fn grad_logit(&self, x: &[f64], class: usize) -> Vec<f64>;
}

impl Target for NeuralModel {
    fn input_dim(&self) -> usize {
        self.arch[0]
    }
    fn class_count(&self) -> usize {
        *self.arch.last().unwrap()
    }
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.probs_sample(x)
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_sample(x)
    }
    fn grad_ce(&self, x: &[f64], y: usize) -> Vec<f64> {
        nnet::input_gradient(self, x, y)
    }
    fn grad_logit(&self, x: &[f64], class: usize) -> Vec<f64> {
        nnet::logit_input_gradient(self, x, class)
    }
}

/// Instrumented wrapper counting forward and gradient queries.
pub struct CallCounter<'a, T: Target> {
    inner: &'a T,
    forward_calls: AtomicUsize,
    gradient_calls: AtomicUsize,
}

impl<'a, T: Target> CallCounter<'a, T> {
    pub fn new(inner: &'a T) -> Self {
        CallCounter {
            inner,
            forward_calls: AtomicUsize::new(0),
            gradient_calls: AtomicUsize::new(0),
        }
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient_calls.load(Ordering::Relaxed)
    }
}

impl<T: Target> Target for CallCounter<'_, T> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.probs(x)
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(x)
    }
    fn grad_ce(&self, x: &[f64], y: usize) -> Vec<f64> {
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_ce(x, y)
    }
    fn grad_logit(&self, x: &[f64], class: usize) -> Vec<f64> {
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_logit(x, class)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `x` into the intersection of the ε-ball around `clean` and the
/// feature box; frozen coordinates snap back to the clean value.
fn project(
    clean: &[f64],
    x: &mut [f64],
    eps: f64,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
) {
    for j in 0..x.len() {
        if let Some(mask) = frozen {
            if mask[j] {
                x[j] = clean[j];
                continue;
            }
        }
        let low = lo[j].max(clean[j] - eps);
        let high = hi[j].min(clean[j] + eps);
        x[j] = x[j].clamp(low, high);
    }
}

fn frozen_mask(ds: &Dataset, spec: &AttackSpec) -> Option<Vec<bool>> {
    if !spec.freeze_categorical {
        return None;
    }
    Some(
        ds.feature_meta
            .iter()
            .map(|m| matches!(m, FeatureOrigin::OneHot { .. }))
            .collect(),
    )
}

fn ce_loss_from_probs(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(1e-300).ln()
}

/// Symmetric-difference gradient estimate from forward outputs only.
pub fn zoo_estimate_gradient<T: Target>(
    target: &T,
    x: &[f64],
    y: usize,
    h: f64,
    coords: &[usize],
) -> Vec<(usize, f64)> {
    coords
        .iter()
        .map(|&j| {
            let mut plus = x.to_vec();
            plus[j] += h;
            let mut minus = x.to_vec();
            minus[j] -= h;
            let lp = ce_loss_from_probs(&target.probs(&plus), y);
            let lm = ce_loss_from_probs(&target.probs(&minus), y);
            (j, (lp - lm) / (2.0 * h))
        })
        .collect()
}

fn fgsm_sample<T: Target>(
    target: &T,
    clean: &[f64],
    y: usize,
    spec: &AttackSpec,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
) -> Vec<f64> {
    let g = target.grad_ce(clean, y);
    let mut x: Vec<f64> = clean
        .iter()
        .zip(&g)
        .map(|(&c, &gj)| c + spec.epsilon * sign(gj))
        .collect();
    project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    x
}

fn bim_like_sample<T: Target>(
    target: &T,
    clean: &[f64],
    y: usize,
    spec: &AttackSpec,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
    rng: &mut ChaCha8Rng,
    random_start: bool,
) -> Vec<f64> {
    let alpha = spec.alpha();
    let mut x = clean.to_vec();
    if random_start && spec.epsilon > 0.0 {
        for v in x.iter_mut() {
            *v += rng.gen_range(-spec.epsilon..=spec.epsilon);
        }
        project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    }
    for _ in 0..spec.steps {
        let g = target.grad_ce(&x, y);
        for (v, &gj) in x.iter_mut().zip(&g) {
            *v += alpha * sign(gj);
        }
        project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    }
    x
}

fn deepfool_sample<T: Target>(
    target: &T,
    clean: &[f64],
    y: usize,
    spec: &AttackSpec,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
) -> Vec<f64> {
    let classes = target.class_count();
    let mut r_total = vec![0.0; clean.len()];
    for _ in 0..spec.max_iters {
        let x_cur: Vec<f64> = clean
            .iter()
            .zip(&r_total)
            .map(|(&c, &r)| c + (1.0 + spec.overshoot) * r)
            .collect();
        let logits = target.logits(&x_cur);
        if nnet::argmax(&logits) != y {
            break;
        }
        let grad_true = target.grad_logit(&x_cur, y);
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for k in 0..classes {
            if k == y {
                continue;
            }
            let gk = target.grad_logit(&x_cur, k);
            let w: Vec<f64> = gk.iter().zip(&grad_true).map(|(a, b)| a - b).collect();
            let wnorm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if wnorm < 1e-12 {
                continue;
            }
            let f = (logits[k] - logits[y]).abs();
            let dist = f / wnorm;
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                best = Some((dist, w, f));
            }
        }
        let Some((_, w, f)) = best else { break };
        let wsq: f64 = w.iter().map(|v| v * v).sum();
        for (r, wj) in r_total.iter_mut().zip(&w) {
            *r += f / wsq * wj;
        }
    }
    let mut x: Vec<f64> = clean
        .iter()
        .zip(&r_total)
        .map(|(&c, &r)| c + (1.0 + spec.overshoot) * r)
        .collect();
    project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    x
}

fn zoo_sample<T: Target>(
    target: &T,
    clean: &[f64],
    y: usize,
    spec: &AttackSpec,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = clean.len();
    let per_step = spec.coords_per_step.unwrap_or(d.min(16)).max(1).min(d);
    let alpha = spec.alpha();
    let candidates: Vec<usize> = (0..d)
        .filter(|&j| frozen.is_none_or(|m| !m[j]))
        .collect();
    if candidates.is_empty() {
        return clean.to_vec();
    }
    let mut x = clean.to_vec();
    for _ in 0..spec.steps {
        let mut pool = candidates.clone();
        let mut coords = Vec::with_capacity(per_step.min(pool.len()));
        for _ in 0..per_step.min(pool.len()) {
            let pick = rng.gen_range(0..pool.len());
            coords.push(pool.swap_remove(pick));
        }
        let estimates = zoo_estimate_gradient(target, &x, y, spec.fd_step, &coords);
        for (j, g) in estimates {
            x[j] += alpha * sign(g);
        }
        project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    }
    x
}

fn l1_normalize(v: &[f64]) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn sini_sample<T: Target>(
    target: &T,
    clean: &[f64],
    y: usize,
    spec: &AttackSpec,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
) -> Vec<f64> {
    let alpha = spec.alpha();
    let d = clean.len();
    let mut momentum = vec![0.0; d];
    let mut x = clean.to_vec();
    for _ in 0..spec.steps {
        // Nesterov look-ahead along the accumulated direction.
        let x_nes: Vec<f64> = x
            .iter()
            .zip(&momentum)
            .map(|(&v, &m)| v + alpha * spec.decay * m)
            .collect();
        // Scale-invariant gradient: average over inputs scaled by 1/2^i.
        let mut avg = vec![0.0; d];
        for i in 0..spec.scale_copies.max(1) {
            let scale = 0.5f64.powi(i as i32);
            let scaled: Vec<f64> = x_nes.iter().map(|&v| v * scale).collect();
            let g = target.grad_ce(&scaled, y);
            for (a, gj) in avg.iter_mut().zip(&g) {
                *a += gj;
            }
        }
        for a in avg.iter_mut() {
            *a /= spec.scale_copies.max(1) as f64;
        }
        let unit = l1_normalize(&avg);
        for (m, u) in momentum.iter_mut().zip(&unit) {
            *m = spec.decay * *m + u;
        }
        for (v, &m) in x.iter_mut().zip(&momentum) {
            *v += alpha * sign(m);
        }
        project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    }
    x
}

pub(crate) fn uniform_ball(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            if radius > 0.0 {
                rng.gen_range(-radius..=radius)
            } else {
                0.0
            }
        })
        .collect()
}

fn vni_sample<T: Target>(
    target: &T,
    clean: &[f64],
    y: usize,
    spec: &AttackSpec,
    lo: &[f64],
    hi: &[f64],
    frozen: Option<&[bool]>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let alpha = spec.alpha();
    let d = clean.len();
    let radius = spec.variance_radius * spec.epsilon;
    let mut momentum = vec![0.0; d];
    let mut variance = vec![0.0; d];
    let mut x = clean.to_vec();
    for _ in 0..spec.steps {
        let x_nes: Vec<f64> = x
            .iter()
            .zip(&momentum)
            .map(|(&v, &m)| v + alpha * spec.decay * m)
            .collect();
        let g = target.grad_ce(&x_nes, y);
        let combined: Vec<f64> = g.iter().zip(&variance).map(|(a, b)| a + b).collect();
        let unit = l1_normalize(&combined);
        for (m, u) in momentum.iter_mut().zip(&unit) {
            *m = spec.decay * *m + u;
        }
        // Variance of gradients over a neighborhood of the look-ahead point.
        let n = spec.variance_samples.max(1);
        let mut neighborhood = vec![0.0; d];
        for _ in 0..n {
            let offset = uniform_ball(rng, d, radius);
            let probe: Vec<f64> = x_nes.iter().zip(&offset).map(|(a, b)| a + b).collect();
            let gp = target.grad_ce(&probe, y);
            for (acc, gj) in neighborhood.iter_mut().zip(&gp) {
                *acc += gj;
            }
        }
        for ((v, acc), gj) in variance.iter_mut().zip(&neighborhood).zip(&g) {
            *v = acc / n as f64 - gj;
        }
        for (v, &m) in x.iter_mut().zip(&momentum) {
            *v += alpha * sign(m);
        }
        project(clean, &mut x, spec.epsilon, lo, hi, frozen);
    }
    x
}

fn attack_one<T: Target>(
    target: &T,
    ds: &Dataset,
    spec: &AttackSpec,
    frozen: Option<&[bool]>,
    i: usize,
    sample_seed: u64,
) -> Vec<f64> {
    let clean = ds.x.row(i);
    let y = ds.y[i];
    let lo = &ds.feature_lo;
    let hi = &ds.feature_hi;
    let mut rng = seed::rng(sample_seed);
    match spec.kind {
        AttackKind::Fgsm => fgsm_sample(target, clean, y, spec, lo, hi, frozen),
        AttackKind::Bim => bim_like_sample(target, clean, y, spec, lo, hi, frozen, &mut rng, false),
        AttackKind::Pgd => {
            bim_like_sample(target, clean, y, spec, lo, hi, frozen, &mut rng, spec.random_start)
        }
        AttackKind::Deepfool => deepfool_sample(target, clean, y, spec, lo, hi, frozen),
        AttackKind::Zoo => zoo_sample(target, clean, y, spec, lo, hi, frozen, &mut rng),
        AttackKind::SiniFgsm => sini_sample(target, clean, y, spec, lo, hi, frozen),
        AttackKind::VniFgsm => vni_sample(target, clean, y, spec, lo, hi, frozen, &mut rng),
    }
}

/// Run one attack over the whole dataset, parallel over samples with
/// per-sample seeds so parallel and serial runs agree exactly.
pub fn run_attack<T: Target>(
    target: &T,
    ds: &Dataset,
    spec: &AttackSpec,
    attack_seed: u64,
) -> Result<AdvDataset> {
    if ds.n_features() != target.input_dim() {
        return Err(SageError::DimMismatch {
            expected: target.input_dim(),
            got: ds.n_features(),
            context: "attack input".into(),
        });
    }
    if spec.epsilon < 0.0 {
        return Err(SageError::InvalidArgument("epsilon must be >= 0".into()));
    }
    if spec.steps == 0 {
        return Err(SageError::InvalidArgument("steps must be >= 1".into()));
    }
    let frozen = frozen_mask(ds, spec);
    let n = ds.n_samples();
    let sample_seeds: Vec<u64> = (0..n as u64)
        .map(|i| seed::derive_idx(attack_seed, i))
        .collect();

    if spec.kind == AttackKind::Zoo {
        // Enforce the black-box contract on every run.
        let counter = CallCounter::new(target);
        let rows: Vec<Vec<f64>> = sample_seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| attack_one(&counter, ds, spec, frozen.as_deref(), i, s))
            .collect();
        assert_eq!(counter.gradient_calls(), 0, "ZOO must not query gradients");
        return Ok(AdvDataset {
            x_adv: Mat::from_rows(&rows),
            y: ds.y.clone(),
            spec: spec.clone(),
            sample_seeds,
        });
    }

    let rows: Vec<Vec<f64>> = sample_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| attack_one(target, ds, spec, frozen.as_deref(), i, s))
        .collect();
    Ok(AdvDataset {
        x_adv: Mat::from_rows(&rows),
        y: ds.y.clone(),
        spec: spec.clone(),
        sample_seeds,
    })
}

pub fn fgsm<T: Target>(target: &T, ds: &Dataset, epsilon: f64, seed: u64) -> Result<AdvDataset> {
    run_attack(target, ds, &AttackSpec::new(AttackKind::Fgsm, epsilon), seed)
}

pub fn bim<T: Target>(
    target: &T,
    ds: &Dataset,
    epsilon: f64,
    steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdvDataset> {
    let mut spec = AttackSpec::new(AttackKind::Bim, epsilon);
    spec.steps = steps;
    spec.step_size = Some(alpha);
    run_attack(target, ds, &spec, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn pgd<T: Target>(
    target: &T,
    ds: &Dataset,
    epsilon: f64,
    steps: usize,
    alpha: f64,
    random_start: bool,
    seed: u64,
) -> Result<AdvDataset> {
    let mut spec = AttackSpec::new(AttackKind::Pgd, epsilon);
    spec.steps = steps;
    spec.step_size = Some(alpha);
    spec.random_start = random_start;
    run_attack(target, ds, &spec, seed)
}

pub fn deepfool<T: Target>(
    target: &T,
    ds: &Dataset,
    epsilon: f64,
    max_iters: usize,
    overshoot: f64,
    seed: u64,
) -> Result<AdvDataset> {
    let mut spec = AttackSpec::new(AttackKind::Deepfool, epsilon);
    spec.max_iters = max_iters;
    spec.overshoot = overshoot;
    run_attack(target, ds, &spec, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn zoo<T: Target>(
    target: &T,
    ds: &Dataset,
    epsilon: f64,
    steps: usize,
    fd_step: f64,
    coords_per_step: usize,
    seed: u64,
) -> Result<AdvDataset> {
    let mut spec = AttackSpec::new(AttackKind::Zoo, epsilon);
    spec.steps = steps;
    spec.fd_step = fd_step;
    spec.coords_per_step = Some(coords_per_step);
    run_attack(target, ds, &spec, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn sini_fgsm<T: Target>(
    target: &T,
    ds: &Dataset,
    epsilon: f64,
    steps: usize,
    decay: f64,
    scale_copies: usize,
    seed: u64,
) -> Result<AdvDataset> {
    let mut spec = AttackSpec::new(AttackKind::SiniFgsm, epsilon);
    spec.steps = steps;
    spec.decay = decay;
    spec.scale_copies = scale_copies;
    run_attack(target, ds, &spec, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn vni_fgsm<T: Target>(
    target: &T,
    ds: &Dataset,
    epsilon: f64,
    steps: usize,
    decay: f64,
    variance_samples: usize,
    variance_radius: f64,
    seed: u64,
) -> Result<AdvDataset> {
    let mut spec = AttackSpec::new(AttackKind::VniFgsm, epsilon);
    spec.steps = steps;
    spec.decay = decay;
    spec.variance_samples = variance_samples;
    spec.variance_radius = variance_radius;
    run_attack(target, ds, &spec, seed)
}

/// Attack suite over every (kind, ε) combination of the grid. Datasets at
/// the training strength form the attack-train pool, the rest attack-test.
#[derive(Debug, Clone)]
pub struct AttackSuite {
    pub entries: Vec<AdvDataset>,
    pub train_epsilon: f64,
}

impl AttackSuite {
    pub fn train_entries(&self) -> Vec<&AdvDataset> {
        self.entries
            .iter()
            .filter(|e| e.spec.epsilon == self.train_epsilon)
            .collect()
    }

    pub fn test_entries(&self) -> Vec<&AdvDataset> {
        self.entries
            .iter()
            .filter(|e| e.spec.epsilon != self.train_epsilon)
            .collect()
    }
}

pub fn generate_suite<T: Target>(
    target: &T,
    test_ds: &Dataset,
    kinds: &[AttackKind],
    eps_grid: &[f64],
    train_epsilon: f64,
    suite_seed: u64,
    base_spec: &AttackSpec,
) -> Result<AttackSuite> {
    if kinds.is_empty() || eps_grid.is_empty() {
        return Err(SageError::EmptyInput(
            "kinds and eps grid must be non-empty".into(),
        ));
    }
    let mut entries = Vec::with_capacity(kinds.len() * eps_grid.len());
    for &kind in kinds {
        for &eps in eps_grid {
            let mut spec = base_spec.clone();
            spec.kind = kind;
            spec.epsilon = eps;
            spec.step_size = None;
            let ds_seed = seed::derive(suite_seed, &format!("attack-{}-{eps:?}", kind.name()));
            entries.push(run_attack(target, test_ds, &spec, ds_seed)?);
        }
    }
    Ok(AttackSuite {
        entries,
        train_epsilon,
    })
}

/// Persist an adversarial dataset: sample_id, attack, epsilon, features..., true_label.
pub fn save_adv_csv(
    adv: &AdvDataset,
    feature_names: &[String],
    path: &std::path::Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "sample_id".to_string(),
        "attack".to_string(),
        "epsilon".to_string(),
    ];
    header.extend_from_slice(feature_names);
    header.push("true_label".into());
    writer.write_record(&header)?;
    for i in 0..adv.n_samples() {
        let mut rec = vec![
            i.to_string(),
            adv.spec.kind.name().to_string(),
            format!("{}", adv.spec.epsilon),
        ];
        rec.extend(adv.x_adv.row(i).iter().map(|v| format!("{v}")));
        rec.push(adv.y[i].to_string());
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}
