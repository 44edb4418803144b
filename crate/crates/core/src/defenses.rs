//! The ten-entry defense portfolio.
//!
//! Eight defenses retrain the classifier (adversarial training variants,
//! Gaussian augmentation, distillation); feature squeezing and Gaussian
//! noise wrap the undefended base model with an inference-time input
//! transform. Every entry exposes the same surface: predict a class for a
//! possibly adversarial sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Result, SageError};
use crate::mat::Mat;
use crate::nnet::{self, NeuralModel, TrainConfig};
use crate::seed;

/// Portfolio member ids, in the fixed order used for tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DefenseId {
    PgdAt,
    Iat,
    Trades,
    Fat,
    Ga,
    Dd,
    Rslad10,
    Rslad100,
    Fs,
    Gn,
}

impl DefenseId {
    pub const ALL: [DefenseId; 10] = [
        DefenseId::PgdAt,
        DefenseId::Iat,
        DefenseId::Trades,
        DefenseId::Fat,
        DefenseId::Ga,
        DefenseId::Dd,
        DefenseId::Rslad10,
        DefenseId::Rslad100,
        DefenseId::Fs,
        DefenseId::Gn,
    ];

    pub const COUNT: usize = 10;

    pub fn index(self) -> usize {
        DefenseId::ALL.iter().position(|&d| d == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            DefenseId::PgdAt => "PGD_AT",
            DefenseId::Iat => "IAT",
            DefenseId::Trades => "TRADES",
            DefenseId::Fat => "FAT",
            DefenseId::Ga => "GA",
            DefenseId::Dd => "DD",
            DefenseId::Rslad10 => "RSLAD10",
            DefenseId::Rslad100 => "RSLAD100",
            DefenseId::Fs => "FS",
            DefenseId::Gn => "GN",
        }
    }

    pub fn parse(name: &str) -> Result<DefenseId> {
        DefenseId::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| SageError::InvalidArgument(format!("unknown defense id '{name}'")))
    }
}

/// Hyperparameters for the whole portfolio; every default is config-visible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub train: TrainConfig,
    /// Attack strength used by every training-time defense.
    pub train_epsilon: f64,
    pub pgd_steps: usize,
    pub trades_beta: f64,
    pub fat_replay: usize,
    pub ga_sigma: f64,
    pub dd_temperature: f64,
    pub rslad10_steps: usize,
    pub rslad100_steps: usize,
    pub fs_bits: u32,
    pub gn_sigma: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        // Defense retraining is ~10x the baseline's cost per epoch (inner
        // attack loops), so the portfolio default is shorter.
        let train = TrainConfig {
            epochs: 12,
            ..TrainConfig::default()
        };
        DefenseConfig {
            train,
            train_epsilon: 0.1,
            pgd_steps: 10,
            trades_beta: 6.0,
            fat_replay: 4,
            ga_sigma: 0.1,
            dd_temperature: 20.0,
            rslad10_steps: 10,
            rslad100_steps: 100,
            fs_bits: 8,
            gn_sigma: 0.05,
        }
    }
}

/// Inference-time input preprocessing for the wrapper defenses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputTransform {
    Quantize {
        bits: u32,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
}

/// One portfolio member: either a retrained model or a transform over the
/// base model.
#[derive(Debug, Clone)]
pub struct DefenseModel {
    pub id: DefenseId,
    pub model: NeuralModel,
    pub transform: Option<InputTransform>,
    pub clean_accuracy: f64,
}

/// Snap each coordinate to the nearest of 2^bits uniform levels on [lo, hi].
pub fn quantize(x: &[f64], bits: u32, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    assert!((1..=16).contains(&bits), "bits must be in [1, 16]");
    let levels = (1u32 << bits) as f64;
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let (l, h) = (lo[j], hi[j]);
            assert!(h > l, "quantize needs hi > lo per feature");
            let t = ((v - l) / (h - l)).clamp(0.0, 1.0);
            let k = (t * (levels - 1.0)).round();
            l + k * (h - l) / (levels - 1.0)
        })
        .collect()
}

/// Per-call noise seed: a pure function of the defense seed and the input
/// bytes, so repeated and parallel evaluations agree.
fn noise_seed(seed: u64, x: &[f64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for v in x {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl DefenseModel {
    /// Apply the transform (if any) and return the transformed input.
    pub fn apply_transform(&self, x: &[f64]) -> Vec<f64> {
        match &self.transform {
            None => x.to_vec(),
            Some(InputTransform::Quantize { bits, lo, hi }) => quantize(x, *bits, lo, hi),
            Some(InputTransform::GaussianNoise { sigma, seed }) => {
                if *sigma == 0.0 {
                    return x.to_vec();
                }
                let mut rng = seed::rng(noise_seed(*seed, x));
                x.iter()
                    .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        }
    }
}

/// Transform-then-argmax prediction for one sample.
pub fn defended_predict(dm: &DefenseModel, x: &[f64]) -> Result<usize> {
    if x.len() != dm.model.input_dim() {
        return Err(SageError::DimMismatch {
            expected: dm.model.input_dim(),
            got: x.len(),
            context: format!("defended_predict {}", dm.id.name()),
        });
    }
    let z = dm.apply_transform(x);
    Ok(dm.model.predict_sample(&z))
}

fn accuracy(model: &NeuralModel, ds: &Dataset) -> f64 {
    let preds = model.predict_batch(&ds.x);
    let correct = preds.iter().zip(&ds.y).filter(|(p, t)| p == t).count();
    correct as f64 / ds.n_samples().max(1) as f64
}

fn defended_accuracy(dm: &DefenseModel, ds: &Dataset) -> f64 {
    let mut correct = 0;
    for i in 0..ds.n_samples() {
        if defended_predict(dm, ds.x.row(i)).unwrap() == ds.y[i] {
            correct += 1;
        }
    }
    correct as f64 / ds.n_samples().max(1) as f64
}

/// Batched PGD ascent on cross-entropy inside the training box.
fn pgd_batch(
    model: &NeuralModel,
    bx: &Mat,
    by: &[usize],
    eps: f64,
    steps: usize,
    lo: &[f64],
    hi: &[f64],
    rng: &mut ChaCha8Rng,
) -> Mat {
    let alpha = 2.5 * eps / steps.max(1) as f64;
    let mut x = bx.clone();
    for v in x.as_mut_slice().iter_mut() {
        if eps > 0.0 {
            *v += rng.gen_range(-eps..=eps);
        }
    }
    clamp_to(&mut x, bx, eps, lo, hi);
    for _ in 0..steps {
        let g = nnet::input_gradient_batch(model, &x, by);
        ascend(&mut x, &g, alpha);
        clamp_to(&mut x, bx, eps, lo, hi);
    }
    x
}

/// Batched PGD ascent on soft-target cross-entropy (the divergence inner
/// maximization used by the distillation-style defenses).
fn pgd_batch_soft(
    model: &NeuralModel,
    bx: &Mat,
    targets: &Mat,
    eps: f64,
    steps: usize,
    lo: &[f64],
    hi: &[f64],
    rng: &mut ChaCha8Rng,
) -> Mat {
    let alpha = 2.5 * eps / steps.max(1) as f64;
    let mut x = bx.clone();
    for v in x.as_mut_slice().iter_mut() {
        *v += 1e-3 * rng.sample::<f64, _>(StandardNormal);
    }
    clamp_to(&mut x, bx, eps, lo, hi);
    for _ in 0..steps {
        let g = nnet::input_gradient_batch_soft(model, &x, targets);
        ascend(&mut x, &g, alpha);
        clamp_to(&mut x, bx, eps, lo, hi);
    }
    x
}

fn ascend(x: &mut Mat, g: &Mat, alpha: f64) {
    for (v, gv) in x.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *v += alpha * gv.signum() * if *gv == 0.0 { 0.0 } else { 1.0 };
    }
}

fn clamp_to(x: &mut Mat, clean: &Mat, eps: f64, lo: &[f64], hi: &[f64]) {
    let cols = clean.cols();
    for i in 0..clean.rows() {
        let crow = clean.row(i);
        let xrow = x.row_mut(i);
        for j in 0..cols {
            let low = lo[j].max(crow[j] - eps);
            let high = hi[j].min(crow[j] + eps);
            xrow[j] = xrow[j].clamp(low, high);
        }
    }
}

fn kl_rows(p: &Mat, q: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..p.rows() {
        for (pv, qv) in p.row(i).iter().zip(q.row(i)) {
            if *pv > 0.0 {
                total += pv * (pv.max(1e-300).ln() - qv.max(1e-300).ln());
            }
        }
    }
    total / p.rows() as f64
}

fn train_pgd_at(ds: &Dataset, cfg: &DefenseConfig, tc: &TrainConfig) -> Result<NeuralModel> {
    let (lo, hi) = (ds.feature_lo.clone(), ds.feature_hi.clone());
    let eps = cfg.train_epsilon;
    let steps = cfg.pgd_steps;
    let mut hook = |m: &NeuralModel, bx: &Mat, by: &[usize], rng: &mut ChaCha8Rng| {
        let adv = pgd_batch(m, bx, by, eps, steps, &lo, &hi, rng);
        nnet::loss_and_param_grads(m, &adv, by)
    };
    Ok(nnet::train_with_hook(ds, tc, &mut hook)?.model)
}

fn train_iat(ds: &Dataset, cfg: &DefenseConfig, tc: &TrainConfig) -> Result<NeuralModel> {
    let (lo, hi) = (ds.feature_lo.clone(), ds.feature_hi.clone());
    let eps = cfg.train_epsilon;
    let steps = cfg.pgd_steps;
    let mut hook = |m: &NeuralModel, bx: &Mat, by: &[usize], rng: &mut ChaCha8Rng| {
        let adv = pgd_batch(m, bx, by, eps, steps, &lo, &hi, rng);
        let lambda: f64 = rng.gen_range(0.0..=1.0);
        let mut mixed = bx.clone();
        for (mv, av) in mixed.as_mut_slice().iter_mut().zip(adv.as_slice()) {
            *mv = lambda * *mv + (1.0 - lambda) * av;
        }
        nnet::loss_and_param_grads(m, &mixed, by)
    };
    Ok(nnet::train_with_hook(ds, tc, &mut hook)?.model)
}

fn train_trades(ds: &Dataset, cfg: &DefenseConfig, tc: &TrainConfig) -> Result<NeuralModel> {
    let (lo, hi) = (ds.feature_lo.clone(), ds.feature_hi.clone());
    let eps = cfg.train_epsilon;
    let steps = cfg.pgd_steps;
    let beta = cfg.trades_beta;
    let mut hook = |m: &NeuralModel, bx: &Mat, by: &[usize], rng: &mut ChaCha8Rng| {
        let clean_probs = nnet::forward(m, bx)?;
        let adv = pgd_batch_soft(m, bx, &clean_probs, eps, steps, &lo, &hi, rng);
        let (ce, mut grads) = nnet::loss_and_param_grads(m, bx, by)?;
        let (_, kl_grads, _) = nnet::soft_target_backward(m, &adv, &clean_probs, 1.0, false)?;
        grads.scaled_add(beta, &kl_grads);
        let adv_probs = nnet::forward(m, &adv)?;
        let loss = ce + beta * kl_rows(&clean_probs, &adv_probs);
        Ok((loss, grads))
    };
    Ok(nnet::train_with_hook(ds, tc, &mut hook)?.model)
}

/// Free adversarial training: each minibatch is replayed, every replay both
/// updates the parameters and advances a persistent perturbation using the
/// input gradients that the parameter pass already produced.
fn train_fat(ds: &Dataset, cfg: &DefenseConfig, tc: &TrainConfig) -> Result<NeuralModel> {
    use rand::seq::SliceRandom;
    let replay = cfg.fat_replay.max(1);
    let eps = cfg.train_epsilon;
    let mut arch = vec![ds.n_features()];
    arch.extend_from_slice(&tc.hidden);
    arch.push(ds.class_count);
    let mut init_rng = seed::rng(seed::derive(tc.seed, "nnet-init"));
    let mut model = NeuralModel::init(&arch, &mut init_rng);
    let mut shuffle_rng = seed::rng(seed::derive(tc.seed, "nnet-shuffle"));
    let mut adam = nnet::AdamState::new(model.param_count());

    let outer_epochs = tc.epochs.div_ceil(replay).max(1);
    let n = ds.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut delta = Mat::zeros(tc.batch_size, ds.n_features());
    for epoch in 0..outer_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tc.batch_size) {
            let bx = ds.x.select_rows(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| ds.y[i]).collect();
            for _ in 0..replay {
                let mut adv = bx.clone();
                for i in 0..adv.rows() {
                    let drow = delta.row(i);
                    let arow = adv.row_mut(i);
                    for j in 0..arow.len() {
                        arow[j] += drow[j];
                    }
                }
                clamp_to(&mut adv, &bx, eps, &ds.feature_lo, &ds.feature_hi);
                let (loss, grads, igrads) = nnet::param_and_input_grads(&model, &adv, &by)?;
                if !loss.is_finite() {
                    return Err(SageError::Diverged { epoch });
                }
                adam.apply(&mut model, &grads, tc);
                for i in 0..adv.rows() {
                    let grow = igrads.row(i);
                    let drow = delta.row_mut(i);
                    for j in 0..drow.len() {
                        drow[j] = (drow[j] + eps * grow[j].signum()).clamp(-eps, eps);
                    }
                }
            }
        }
    }
    Ok(model)
}

fn train_ga(ds: &Dataset, cfg: &DefenseConfig, tc: &TrainConfig) -> Result<NeuralModel> {
    let sigma = cfg.ga_sigma;
    let mut hook = |m: &NeuralModel, bx: &Mat, by: &[usize], rng: &mut ChaCha8Rng| {
        let mut noisy = bx.clone();
        for v in noisy.as_mut_slice().iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        nnet::loss_and_param_grads(m, &noisy, by)
    };
    Ok(nnet::train_with_hook(ds, tc, &mut hook)?.model)
}

/// Defensive distillation: teacher trained at temperature t, student
/// trained on the teacher's temperature-softened posteriors.
fn train_dd(ds: &Dataset, cfg: &DefenseConfig, tc: &TrainConfig) -> Result<NeuralModel> {
    let temp = cfg.dd_temperature;
    let mut teacher_hook = |m: &NeuralModel, bx: &Mat, by: &[usize], _rng: &mut ChaCha8Rng| {
        let mut targets = Mat::zeros(by.len(), m.class_count());
        for (i, &c) in by.iter().enumerate() {
            targets.set(i, c, 1.0);
        }
        let (loss, grads, _) = nnet::soft_target_backward(m, bx, &targets, temp, false)?;
        Ok((loss, grads))
    };
    let teacher = nnet::train_with_hook(ds, tc, &mut teacher_hook)?.model;

    let mut student_cfg = tc.clone();
    student_cfg.seed = seed::derive(tc.seed, "dd-student");
    let mut student_hook = |m: &NeuralModel, bx: &Mat, _by: &[usize], _rng: &mut ChaCha8Rng| {
        let soft = nnet::forward_temp(&teacher, bx, temp)?;
        let (loss, grads, _) = nnet::soft_target_backward(m, bx, &soft, temp, false)?;
        Ok((loss, grads))
    };
    Ok(nnet::train_with_hook(ds, &student_cfg, &mut student_hook)?.model)
}

/// Robust soft-label distillation: the student matches the teacher's soft
/// labels on adversarial inputs found by an inner attack on the student.
fn train_rslad(
    ds: &Dataset,
    cfg: &DefenseConfig,
    tc: &TrainConfig,
    teacher: &NeuralModel,
    inner_steps: usize,
) -> Result<NeuralModel> {
    let (lo, hi) = (ds.feature_lo.clone(), ds.feature_hi.clone());
    let eps = cfg.train_epsilon;
    let mut hook = |m: &NeuralModel, bx: &Mat, _by: &[usize], rng: &mut ChaCha8Rng| {
        let soft = nnet::forward(teacher, bx)?;
        let adv = pgd_batch_soft(m, bx, &soft, eps, inner_steps, &lo, &hi, rng);
        let (loss, grads, _) = nnet::soft_target_backward(m, &adv, &soft, 1.0, false)?;
        Ok((loss, grads))
    };
    Ok(nnet::train_with_hook(ds, tc, &mut hook)?.model)
}

/// Train (or wrap) one defense. RSLAD variants distill from `teacher`,
/// which the portfolio supplies as its TRADES member.
pub fn train_defense(
    id: DefenseId,
    train_ds: &Dataset,
    base: &NeuralModel,
    cfg: &DefenseConfig,
    heldout: &Dataset,
    teacher: Option<&NeuralModel>,
) -> Result<DefenseModel> {
    let mut tc = cfg.train.clone();
    tc.seed = seed::derive(cfg.train.seed, &format!("defense-{}", id.name()));
    let (model, transform) = match id {
        DefenseId::PgdAt => (train_pgd_at(train_ds, cfg, &tc)?, None),
        DefenseId::Iat => (train_iat(train_ds, cfg, &tc)?, None),
        DefenseId::Trades => (train_trades(train_ds, cfg, &tc)?, None),
        DefenseId::Fat => (train_fat(train_ds, cfg, &tc)?, None),
        DefenseId::Ga => (train_ga(train_ds, cfg, &tc)?, None),
        DefenseId::Dd => (train_dd(train_ds, cfg, &tc)?, None),
        DefenseId::Rslad10 | DefenseId::Rslad100 => {
            let teacher = teacher.ok_or_else(|| {
                SageError::InvalidArgument("RSLAD needs a teacher model".into())
            })?;
            let steps = if id == DefenseId::Rslad10 {
                cfg.rslad10_steps
            } else {
                cfg.rslad100_steps
            };
            (train_rslad(train_ds, cfg, &tc, teacher, steps)?, None)
        }
        DefenseId::Fs => (
            base.clone(),
            Some(InputTransform::Quantize {
                bits: cfg.fs_bits,
                lo: train_ds.feature_lo.clone(),
                hi: train_ds.feature_hi.clone(),
            }),
        ),
        DefenseId::Gn => (
            base.clone(),
            Some(InputTransform::GaussianNoise {
                sigma: cfg.gn_sigma,
                seed: seed::derive(cfg.train.seed, "gn-noise"),
            }),
        ),
    };
    let mut dm = DefenseModel {
        id,
        model,
        transform,
        clean_accuracy: 0.0,
    };
    dm.clean_accuracy = defended_accuracy(&dm, heldout);
    Ok(dm)
}

/// The full ten-entry portfolio, in `DefenseId::ALL` order.
#[derive(Debug, Clone)]
pub struct Portfolio {
    pub models: Vec<DefenseModel>,
}

impl Portfolio {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, id: DefenseId) -> &DefenseModel {
        self.models
            .iter()
            .find(|m| m.id == id)
            .expect("portfolio is missing a defense")
    }

    pub fn from_models(models: Vec<DefenseModel>) -> Portfolio {
        Portfolio { models }
    }

    /// Train all ten defenses. The TRADES member is trained first because
    /// the RSLAD variants distill from it; the rest run in parallel.
    pub fn train_full(
        train_ds: &Dataset,
        base: &NeuralModel,
        cfg: &DefenseConfig,
        heldout: &Dataset,
    ) -> Result<Portfolio> {
        let trades = train_defense(DefenseId::Trades, train_ds, base, cfg, heldout, None)?;
        let teacher = trades.model.clone();
        let rest: Vec<DefenseId> = DefenseId::ALL
            .iter()
            .copied()
            .filter(|&d| d != DefenseId::Trades)
            .collect();
        let trained: Result<Vec<DefenseModel>> = rest
            .par_iter()
            .map(|&id| train_defense(id, train_ds, base, cfg, heldout, Some(&teacher)))
            .collect();
        let mut models = trained?;
        models.push(trades);
        models.sort_by_key(|m| m.id.index());
        Ok(Portfolio { models })
    }
}

/// Fraction of samples a model classifies correctly on a dataset.
pub fn clean_accuracy(model: &NeuralModel, ds: &Dataset) -> f64 {
    accuracy(model, ds)
}

/// Serialized defense: a transform descriptor block followed by the model.
pub fn serialize_defense(dm: &DefenseModel) -> String {
    let mut out = String::new();
    out.push_str("sage-defense 1\n");
    out.push_str(&format!("id {}\n", dm.id.name()));
    out.push_str(&format!("clean_accuracy {:.17e}\n", dm.clean_accuracy));
    match &dm.transform {
        None => out.push_str("transform none\n"),
        Some(InputTransform::Quantize { bits, lo, hi }) => {
            out.push_str(&format!("transform quantize {bits}\n"));
            let los: Vec<String> = lo.iter().map(|v| format!("{v:.17e}")).collect();
            let his: Vec<String> = hi.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&format!("lo {}\n", los.join(" ")));
            out.push_str(&format!("hi {}\n", his.join(" ")));
        }
        Some(InputTransform::GaussianNoise { sigma, seed }) => {
            out.push_str(&format!("transform gaussian {sigma:.17e} {seed}\n"));
        }
    }
    out.push_str(&nnet::serialize_model(&dm.model));
    out
}

pub fn deserialize_defense(text: &str) -> Result<DefenseModel> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != "sage-defense 1" {
        return Err(SageError::ModelFormat(format!(
            "unexpected defense header '{header}'"
        )));
    }
    let id_line = lines
        .next()
        .ok_or_else(|| SageError::ModelFormat("missing id line".into()))?;
    let id = DefenseId::parse(
        id_line
            .strip_prefix("id ")
            .ok_or_else(|| SageError::ModelFormat("missing id prefix".into()))?,
    )?;
    let acc_line = lines
        .next()
        .ok_or_else(|| SageError::ModelFormat("missing accuracy line".into()))?;
    let clean_accuracy: f64 = acc_line
        .strip_prefix("clean_accuracy ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SageError::ModelFormat("bad accuracy line".into()))?;
    let tline = lines
        .next()
        .ok_or_else(|| SageError::ModelFormat("missing transform line".into()))?;
    let toks: Vec<&str> = tline.split_whitespace().collect();
    let parse_vec = |line: &str, prefix: &str| -> Result<Vec<f64>> {
        line.strip_prefix(prefix)
            .ok_or_else(|| SageError::ModelFormat(format!("missing '{prefix}' line")))?
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| SageError::ModelFormat(format!("bad float '{t}'")))
            })
            .collect()
    };
    let (transform, remainder_start) = match toks.as_slice() {
        ["transform", "none"] => (None, 0),
        ["transform", "quantize", bits] => {
            let bits: u32 = bits
                .parse()
                .map_err(|_| SageError::ModelFormat("bad bits".into()))?;
            let lo_line = lines
                .next()
                .ok_or_else(|| SageError::ModelFormat("missing lo line".into()))?;
            let hi_line = lines
                .next()
                .ok_or_else(|| SageError::ModelFormat("missing hi line".into()))?;
            let lo = parse_vec(lo_line, "lo ")?;
            let hi = parse_vec(hi_line, "hi ")?;
            (Some(InputTransform::Quantize { bits, lo, hi }), 2)
        }
        ["transform", "gaussian", sigma, seed] => {
            let sigma: f64 = sigma
                .parse()
                .map_err(|_| SageError::ModelFormat("bad sigma".into()))?;
            let seed: u64 = seed
                .parse()
                .map_err(|_| SageError::ModelFormat("bad noise seed".into()))?;
            (Some(InputTransform::GaussianNoise { sigma, seed }), 0)
        }
        _ => {
            return Err(SageError::ModelFormat(format!(
                "bad transform line '{tline}'"
            )))
        }
    };
    let _ = remainder_start;
    let model_text: String = lines.collect::<Vec<&str>>().join("\n");
    let model = nnet::deserialize_model(&model_text)?;
    Ok(DefenseModel {
        id,
        model,
        transform,
        clean_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks;
    use crate::data::synth_generate;
    use crate::nnet::train;

    fn small_cfg(seed: u64) -> DefenseConfig {
        DefenseConfig {
            train: TrainConfig {
                epochs: 8,
                hidden: vec![12],
                seed,
                ..TrainConfig::default()
            },
            pgd_steps: 5,
            rslad10_steps: 3,
            rslad100_steps: 6,
            ..DefenseConfig::default()
        }
    }

    fn base_and_data(seed: u64) -> (Dataset, Dataset, NeuralModel) {
        let ds = synth_generate(400, 4, 2, &[0.5, 0.5], seed).unwrap();
        let (train_ds, test_ds) = crate::data::split(
            &ds,
            &crate::data::SplitSpec {
                train_fraction: 0.8,
                seed,
            },
        )
        .unwrap();
        let tc = TrainConfig {
            epochs: 10,
            hidden: vec![12],
            seed,
            ..TrainConfig::default()
        };
        let base = train(&train_ds, &tc).unwrap().model;
        (train_ds, test_ds, base)
    }

    #[test]
    fn quantize_two_levels() {
        let lo = [0.0];
        let hi = [1.0];
        assert_eq!(quantize(&[0.3], 1, &lo, &hi), vec![0.0]);
        assert_eq!(quantize(&[0.7], 1, &lo, &hi), vec![1.0]);
    }

    #[test]
    fn quantize_four_levels() {
        // b=2 over [0,1]: levels {0, 1/3, 2/3, 1}; 0.4 snaps to 1/3.
        let q = quantize(&[0.4], 2, &[0.0], &[1.0]);
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quantize_is_idempotent() {
        let lo = vec![-2.0, 0.0, 1.0];
        let hi = vec![3.0, 5.0, 9.0];
        let x = [0.123, 4.9, 3.3333];
        let once = quantize(&x, 5, &lo, &hi);
        let twice = quantize(&once, 5, &lo, &hi);
        assert_eq!(once, twice);
    }

    #[test]
    fn fs_wrapper_keeps_base_model_unchanged() {
        let (train_ds, test_ds, base) = base_and_data(61);
        let cfg = small_cfg(61);
        let fs =
            train_defense(DefenseId::Fs, &train_ds, &base, &cfg, &test_ds, None).unwrap();
        assert_eq!(fs.model, base);
        assert!(matches!(
            fs.transform,
            Some(InputTransform::Quantize { bits: 8, .. })
        ));
        // A quantized input maps to itself, so FS and base agree on it.
        let x = quantize(
            test_ds.x.row(0),
            8,
            &train_ds.feature_lo,
            &train_ds.feature_hi,
        );
        assert_eq!(
            defended_predict(&fs, &x).unwrap(),
            base.predict_sample(&x)
        );
    }

    #[test]
    fn gn_with_zero_sigma_matches_base() {
        let (train_ds, test_ds, base) = base_and_data(62);
        let mut cfg = small_cfg(62);
        cfg.gn_sigma = 0.0;
        let gn =
            train_defense(DefenseId::Gn, &train_ds, &base, &cfg, &test_ds, None).unwrap();
        for i in 0..test_ds.n_samples() {
            assert_eq!(
                defended_predict(&gn, test_ds.x.row(i)).unwrap(),
                base.predict_sample(test_ds.x.row(i))
            );
        }
    }

    #[test]
    fn gn_prediction_is_reproducible_per_input() {
        let (train_ds, test_ds, base) = base_and_data(63);
        let cfg = small_cfg(63);
        let gn =
            train_defense(DefenseId::Gn, &train_ds, &base, &cfg, &test_ds, None).unwrap();
        let x = test_ds.x.row(0);
        let a = defended_predict(&gn, x).unwrap();
        let b = defended_predict(&gn, x).unwrap();
        assert_eq!(a, b);
        assert_eq!(gn.apply_transform(x), gn.apply_transform(x));
    }

    #[test]
    fn pgd_at_beats_base_under_attack() {
        // Robust accuracy under the training-strength PGD, 3 seeds.
        let mut base_robust = 0.0;
        let mut at_robust = 0.0;
        for seed in [71, 72, 73] {
            let (train_ds, test_ds, base) = base_and_data(seed);
            let cfg = small_cfg(seed);
            let at = train_defense(DefenseId::PgdAt, &train_ds, &base, &cfg, &test_ds, None)
                .unwrap();
            let adv = attacks::pgd(
                &base,
                &test_ds,
                cfg.train_epsilon,
                10,
                2.5 * cfg.train_epsilon / 10.0,
                true,
                seed,
            )
            .unwrap();
            let mut bc = 0;
            let mut ac = 0;
            for i in 0..adv.n_samples() {
                if base.predict_sample(adv.x_adv.row(i)) == adv.y[i] {
                    bc += 1;
                }
                if defended_predict(&at, adv.x_adv.row(i)).unwrap() == adv.y[i] {
                    ac += 1;
                }
            }
            base_robust += bc as f64 / adv.n_samples() as f64;
            at_robust += ac as f64 / adv.n_samples() as f64;
        }
        assert!(
            at_robust > base_robust,
            "PGD-AT robust {at_robust} vs base {base_robust}"
        );
    }

    #[test]
    fn dd_student_tracks_teacher_accuracy() {
        let (train_ds, test_ds, base) = base_and_data(81);
        let cfg = small_cfg(81);
        let dd =
            train_defense(DefenseId::Dd, &train_ds, &base, &cfg, &test_ds, None).unwrap();
        let base_acc = clean_accuracy(&base, &test_ds);
        assert!(
            dd.clean_accuracy >= base_acc - 0.05,
            "student {} vs teacher-side baseline {base_acc}",
            dd.clean_accuracy
        );
    }

    #[test]
    fn full_portfolio_has_ten_members_in_order() {
        let (train_ds, test_ds, base) = base_and_data(91);
        let cfg = small_cfg(91);
        let portfolio = Portfolio::train_full(&train_ds, &base, &cfg, &test_ds).unwrap();
        assert_eq!(portfolio.len(), 10);
        for (m, id) in portfolio.models.iter().zip(DefenseId::ALL) {
            assert_eq!(m.id, id);
            assert!(m.clean_accuracy.is_finite());
        }
        // Wrapper defenses reference the base parameters unchanged.
        assert_eq!(portfolio.get(DefenseId::Fs).model, base);
        assert_eq!(portfolio.get(DefenseId::Gn).model, base);
    }

    #[test]
    fn rslad_without_teacher_is_an_error() {
        let (train_ds, test_ds, base) = base_and_data(92);
        let cfg = small_cfg(92);
        assert!(train_defense(
            DefenseId::Rslad10,
            &train_ds,
            &base,
            &cfg,
            &test_ds,
            None
        )
        .is_err());
    }

    #[test]
    fn defense_serialization_round_trips() {
        let (train_ds, test_ds, base) = base_and_data(93);
        let cfg = small_cfg(93);
        for id in [DefenseId::Fs, DefenseId::Gn, DefenseId::Ga] {
            let dm = train_defense(id, &train_ds, &base, &cfg, &test_ds, None).unwrap();
            let text = serialize_defense(&dm);
            let back = deserialize_defense(&text).unwrap();
            assert_eq!(back.id, dm.id);
            assert_eq!(back.model, dm.model);
            assert_eq!(back.transform, dm.transform);
            assert_eq!(text, serialize_defense(&back));
        }
    }

    #[test]
    fn defense_id_order_is_stable() {
        assert!(DefenseId::PgdAt < DefenseId::Gn);
        assert_eq!(DefenseId::ALL[0].index(), 0);
        assert_eq!(DefenseId::parse("RSLAD100").unwrap(), DefenseId::Rslad100);
        assert!(DefenseId::parse("RGAN").is_err());
    }
}
