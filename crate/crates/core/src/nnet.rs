//! Minimal feed-forward classifier with exact analytic gradients with
//! respect to both parameters and inputs.
//!
//! Rectifier hidden layers, softmax output, 64-bit floats throughout so the
//! finite-difference oracles in the test suite stay tight. Training uses
//! seeded minibatch Adam; a per-batch hook lets defense recipes substitute
//! their own loss and batch construction while reusing the same optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SageError};
use crate::mat::Mat;
use crate::seed;

/// One dense layer. Weights are stored `[out × in]` row-major so that the
/// weight row feeding output unit `o` is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub layers: Vec<Layer>,
    /// Layer widths, input first, class count last.
    pub arch: Vec<usize>,
}

/// Gradient structure mirroring the model's layers.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            hidden: vec![64, 32],
            seed: 0,
        }
    }
}

/// Outcome of a training run; the final train accuracy is recorded so the
/// pipeline can log it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralModel,
    pub final_train_accuracy: f64,
    pub final_loss: f64,
}

impl NeuralModel {
    /// He-initialized hidden layers; the output layer starts at zero so the
    /// initial posterior is uniform regardless of input scale.
    pub fn init(arch: &[usize], rng: &mut ChaCha8Rng) -> NeuralModel {
        assert!(arch.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::new();
        for l in 1..arch.len() {
            let (fan_in, fan_out) = (arch[l - 1], arch[l]);
            let last = l + 1 == arch.len();
            let scale = if last { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
            let mut w = Mat::zeros(fan_out, fan_in);
            for v in w.as_mut_slice() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
            });
        }
        NeuralModel {
            layers,
            arch: arch.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn class_count(&self) -> usize {
        *self.arch.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.as_slice().len() + l.b.len())
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(l.w.as_slice());
            flat.extend_from_slice(&l.b);
        }
        flat
    }

    pub fn assign_params(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let wlen = l.w.as_slice().len();
            l.w.as_mut_slice().copy_from_slice(&flat[k..k + wlen]);
            k += wlen;
            let blen = l.b.len();
            l.b.copy_from_slice(&flat[k..k + blen]);
            k += blen;
        }
        assert_eq!(k, flat.len());
    }

    /// Logits for a single sample.
    pub fn logits_sample(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "input dim mismatch");
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == self.layers.len();
            let mut next = vec![0.0; layer.b.len()];
            for (o, out) in next.iter_mut().enumerate() {
                let mut s = layer.b[o];
                for (wi, ai) in layer.w.row(o).iter().zip(&a) {
                    s += wi * ai;
                }
                *out = if last { s } else { s.max(0.0) };
            }
            a = next;
        }
        a
    }

    /// Class probabilities for a single sample.
    pub fn probs_sample(&self, x: &[f64]) -> Vec<f64> {
        softmax_row(&self.logits_sample(x), 1.0)
    }

    /// Argmax class for a single sample.
    pub fn predict_sample(&self, x: &[f64]) -> usize {
        argmax(&self.logits_sample(x))
    }

    /// Argmax class for every row.
    pub fn predict_batch(&self, x: &Mat) -> Vec<usize> {
        x.iter_rows().map(|row| self.predict_sample(row)).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_row(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - m) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Forward cache: post-activation values per layer, input first, logits last.
struct ForwardCache {
    activations: Vec<Mat>,
}

fn forward_cache(m: &NeuralModel, x: &Mat) -> ForwardCache {
    let mut activations = Vec::with_capacity(m.layers.len() + 1);
    activations.push(x.clone());
    for (l, layer) in m.layers.iter().enumerate() {
        let last = l + 1 == m.layers.len();
        let prev = activations.last().unwrap();
        let mut out = Mat::zeros(prev.rows(), layer.b.len());
        for i in 0..prev.rows() {
            let prow = prev.row(i);
            let orow = out.row_mut(i);
            for (o, cell) in orow.iter_mut().enumerate() {
                let mut s = layer.b[o];
                for (wi, ai) in layer.w.row(o).iter().zip(prow) {
                    s += wi * ai;
                }
                *cell = if last { s } else { s.max(0.0) };
            }
        }
        activations.push(out);
    }
    ForwardCache { activations }
}

/// Batch logits.
pub fn logits(m: &NeuralModel, x: &Mat) -> Result<Mat> {
    if x.cols() != m.input_dim() {
        return Err(SageError::DimMismatch {
            expected: m.input_dim(),
            got: x.cols(),
            context: "logits input".into(),
        });
    }
    let cache = forward_cache(m, x);
    Ok(cache.activations.last().unwrap().clone())
}

/// Batch probabilities at a softmax temperature.
pub fn forward_temp(m: &NeuralModel, x: &Mat, temperature: f64) -> Result<Mat> {
    let z = logits(m, x)?;
    let mut probs = Mat::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        probs
            .row_mut(i)
            .copy_from_slice(&softmax_row(z.row(i), temperature));
    }
    Ok(probs)
}

/// Class-probability matrix; each row sums to 1.
pub fn forward(m: &NeuralModel, x: &Mat) -> Result<Mat> {
    if x.cols() != m.input_dim() {
        return Err(SageError::DimMismatch {
            expected: m.input_dim(),
            got: x.cols(),
            context: "forward input".into(),
        });
    }
    let cache = forward_cache(m, x);
    let logits = cache.activations.last().unwrap();
    let mut probs = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let p = softmax_row(logits.row(i), 1.0);
        probs.row_mut(i).copy_from_slice(&p);
    }
    Ok(probs)
}

fn zero_grads(m: &NeuralModel) -> Grads {
    Grads {
        layers: m
            .layers
            .iter()
            .map(|l| Layer {
                w: Mat::zeros(l.w.rows(), l.w.cols()),
                b: vec![0.0; l.b.len()],
            })
            .collect(),
    }
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(l.w.as_slice());
            flat.extend_from_slice(&l.b);
        }
        flat
    }

    /// self += a · other
    pub fn scaled_add(&mut self, a: f64, other: &Grads) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            for (d, s) in dst.w.as_mut_slice().iter_mut().zip(src.w.as_slice()) {
                *d += a * s;
            }
            for (d, s) in dst.b.iter_mut().zip(&src.b) {
                *d += a * s;
            }
        }
    }
}

/// Adam optimizer state, reusable by custom training loops.
pub struct AdamState {
    m1: Vec<f64>,
    m2: Vec<f64>,
    step: usize,
}

impl AdamState {
    pub fn new(param_count: usize) -> AdamState {
        AdamState {
            m1: vec![0.0; param_count],
            m2: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn apply(&mut self, model: &mut NeuralModel, grads: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let g = grads.flatten();
        let mut params = model.flatten_params();
        let b1t = 1.0 - cfg.beta1.powi(self.step as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m1[i] = cfg.beta1 * self.m1[i] + (1.0 - cfg.beta1) * g[i];
            self.m2[i] = cfg.beta2 * self.m2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = self.m1[i] / b1t;
            let vhat = self.m2[i] / b2t;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps_opt);
        }
        model.assign_params(&params);
    }
}

/// Backpropagate from output-layer deltas; returns parameter gradients and,
/// on request, per-sample input gradients.
fn backward(
    m: &NeuralModel,
    cache: &ForwardCache,
    mut delta: Mat,
    want_input_grads: bool,
) -> (Grads, Option<Mat>) {
    let mut grads = zero_grads(m);
    let n = delta.rows();
    let mut input_grads = None;
    for l in (0..m.layers.len()).rev() {
        let prev = &cache.activations[l];
        let layer = &m.layers[l];
        let g = &mut grads.layers[l];
        for i in 0..n {
            let drow = delta.row(i);
            let prow = prev.row(i);
            for (o, &d) in drow.iter().enumerate() {
                if d != 0.0 {
                    let grow = g.w.row_mut(o);
                    for (gw, &p) in grow.iter_mut().zip(prow) {
                        *gw += d * p;
                    }
                    g.b[o] += d;
                }
            }
        }
        let is_first = l == 0;
        if is_first && !want_input_grads {
            break;
        }
        // d(prev activation) = delta · W, gated by the rectifier mask.
        let mut dprev = Mat::zeros(n, layer.w.cols());
        for i in 0..n {
            let drow = delta.row(i);
            let out = dprev.row_mut(i);
            for (o, &d) in drow.iter().enumerate() {
                if d != 0.0 {
                    for (acc, &w) in out.iter_mut().zip(layer.w.row(o)) {
                        *acc += d * w;
                    }
                }
            }
            if !is_first {
                let arow = prev.row(i);
                for (acc, &a) in out.iter_mut().zip(arow) {
                    if a <= 0.0 {
                        *acc = 0.0;
                    }
                }
            }
        }
        if is_first {
            input_grads = Some(dprev);
            break;
        }
        delta = dprev;
    }
    (grads, input_grads)
}

fn one_hot_targets(y: &[usize], classes: usize) -> Mat {
    let mut t = Mat::zeros(y.len(), classes);
    for (i, &c) in y.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

fn ce_from_probs(probs: &Mat, targets: &Mat) -> f64 {
    let n = probs.rows() as f64;
    let mut loss = 0.0;
    for i in 0..probs.rows() {
        for (p, t) in probs.row(i).iter().zip(targets.row(i)) {
            if *t > 0.0 {
                loss -= t * p.max(1e-300).ln();
            }
        }
    }
    loss / n
}

/// Mean cross-entropy and parameter gradients for hard labels.
pub fn loss_and_param_grads(m: &NeuralModel, x: &Mat, y: &[usize]) -> Result<(f64, Grads)> {
    if x.rows() == 0 {
        return Err(SageError::EmptyInput("empty batch".into()));
    }
    if y.iter().any(|&c| c >= m.class_count()) {
        return Err(SageError::InvalidArgument("label out of range".into()));
    }
    let targets = one_hot_targets(y, m.class_count());
    let (loss, grads, _) = soft_target_backward(m, x, &targets, 1.0, false)?;
    Ok((loss, grads))
}

/// Soft-target cross-entropy at a softmax temperature, with parameter
/// gradients; optionally also returns per-sample input gradients.
pub fn soft_target_backward(
    m: &NeuralModel,
    x: &Mat,
    targets: &Mat,
    temperature: f64,
    want_input_grads: bool,
) -> Result<(f64, Grads, Option<Mat>)> {
    if x.rows() == 0 {
        return Err(SageError::EmptyInput("empty batch".into()));
    }
    if x.cols() != m.input_dim() {
        return Err(SageError::DimMismatch {
            expected: m.input_dim(),
            got: x.cols(),
            context: "soft-target batch".into(),
        });
    }
    let n = x.rows();
    let cache = forward_cache(m, x);
    let logits = cache.activations.last().unwrap();
    let mut probs = Mat::zeros(n, m.class_count());
    for i in 0..n {
        probs
            .row_mut(i)
            .copy_from_slice(&softmax_row(logits.row(i), temperature));
    }
    let loss = ce_from_probs(&probs, targets);
    let mut delta = Mat::zeros(n, m.class_count());
    let scale = 1.0 / (n as f64 * temperature);
    for i in 0..n {
        let drow = delta.row_mut(i);
        for (c, d) in drow.iter_mut().enumerate() {
            *d = (probs.get(i, c) - targets.get(i, c)) * scale;
        }
    }
    let (grads, input_grads) = backward(m, &cache, delta, want_input_grads);
    Ok((loss, grads, input_grads))
}

/// Per-sample gradient of the cross-entropy loss with respect to the input.
pub fn input_gradient(m: &NeuralModel, x: &[f64], y: usize) -> Vec<f64> {
    let xm = Mat::from_rows(&[x.to_vec()]);
    input_gradient_batch(m, &xm, &[y]).row(0).to_vec()
}

/// Row `i` holds the gradient of sample `i`'s own cross-entropy (not scaled
/// by the batch size).
pub fn input_gradient_batch(m: &NeuralModel, x: &Mat, y: &[usize]) -> Mat {
    let targets = one_hot_targets(y, m.class_count());
    input_gradient_batch_soft(m, x, &targets)
}

/// Per-sample input gradients of soft-target cross-entropy.
pub fn input_gradient_batch_soft(m: &NeuralModel, x: &Mat, targets: &Mat) -> Mat {
    let n = x.rows();
    let cache = forward_cache(m, x);
    let logits = cache.activations.last().unwrap();
    let mut delta = Mat::zeros(n, m.class_count());
    for i in 0..n {
        let p = softmax_row(logits.row(i), 1.0);
        let drow = delta.row_mut(i);
        for (c, d) in drow.iter_mut().enumerate() {
            *d = p[c] - targets.get(i, c);
        }
    }
    let (_, input_grads) = backward(m, &cache, delta, true);
    input_grads.unwrap()
}

/// Gradient of one output logit with respect to the input.
pub fn logit_input_gradient(m: &NeuralModel, x: &[f64], class: usize) -> Vec<f64> {
    let xm = Mat::from_rows(&[x.to_vec()]);
    let cache = forward_cache(m, &xm);
    let mut delta = Mat::zeros(1, m.class_count());
    delta.set(0, class, 1.0);
    let (_, input_grads) = backward(m, &cache, delta, true);
    input_grads.unwrap().row(0).to_vec()
}

/// Loss, parameter gradients, and per-sample input gradients in one pass.
/// The input gradients are per-sample (unscaled), as the free adversarial
/// training replay needs them.
pub fn param_and_input_grads(
    m: &NeuralModel,
    x: &Mat,
    y: &[usize],
) -> Result<(f64, Grads, Mat)> {
    let targets = one_hot_targets(y, m.class_count());
    let (loss, grads, _) = soft_target_backward(m, x, &targets, 1.0, false)?;
    // Input gradients are per-sample; recompute the deltas without the 1/n.
    let ig = input_gradient_batch(m, x, y);
    Ok((loss, grads, ig))
}

/// Per-batch gradient callback used by defense training recipes.
pub type BatchHook<'a> =
    &'a mut dyn FnMut(&NeuralModel, &Mat, &[usize], &mut ChaCha8Rng) -> Result<(f64, Grads)>;

/// Plain cross-entropy training.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut plain =
        |m: &NeuralModel, x: &Mat, y: &[usize], _rng: &mut ChaCha8Rng| loss_and_param_grads(m, x, y);
    train_with_hook(ds, cfg, &mut plain)
}

/// Seeded minibatch Adam over an arbitrary per-batch loss.
pub fn train_with_hook(ds: &Dataset, cfg: &TrainConfig, hook: BatchHook) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(SageError::InvalidArgument("epochs must be >= 1".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(SageError::InvalidArgument(
            "learning_rate must be positive".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(SageError::InvalidArgument("batch_size must be >= 1".into()));
    }

    let mut arch = vec![ds.n_features()];
    arch.extend_from_slice(&cfg.hidden);
    arch.push(ds.class_count);
    let mut init_rng = seed::rng(seed::derive(cfg.seed, "nnet-init"));
    let mut model = NeuralModel::init(&arch, &mut init_rng);

    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, "nnet-shuffle"));
    let mut hook_rng = seed::rng(seed::derive(cfg.seed, "nnet-hook"));

    let mut adam = AdamState::new(model.param_count());
    let mut last_loss = f64::NAN;

    let n = ds.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = ds.x.select_rows(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| ds.y[i]).collect();
            let (loss, grads) = hook(&model, &bx, &by, &mut hook_rng)?;
            if !loss.is_finite() {
                return Err(SageError::Diverged { epoch });
            }
            last_loss = loss;
            adam.apply(&mut model, &grads, cfg);
        }
    }

    let preds = model.predict_batch(&ds.x);
    let correct = preds.iter().zip(&ds.y).filter(|(p, t)| p == t).count();
    Ok(TrainOutcome {
        model,
        final_train_accuracy: correct as f64 / n as f64,
        final_loss: last_loss,
    })
}

/// Versioned textual serialization; decimal formatting keeps 18 significant
/// digits so parse→write round-trips are byte-identical.
pub fn serialize_model(m: &NeuralModel) -> String {
    let mut out = String::new();
    out.push_str("sage-nnet 1\n");
    out.push_str("arch");
    for w in &m.arch {
        out.push_str(&format!(" {w}"));
    }
    out.push('\n');
    for (i, layer) in m.layers.iter().enumerate() {
        out.push_str(&format!("layer {i} {} {}\n", layer.w.rows(), layer.w.cols()));
        for r in 0..layer.w.rows() {
            let row: Vec<String> = layer.w.row(r).iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        let bias: Vec<String> = layer.b.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str("bias ");
        out.push_str(&bias.join(" "));
        out.push('\n');
    }
    out
}

pub fn deserialize_model(text: &str) -> Result<NeuralModel> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != "sage-nnet 1" {
        return Err(SageError::ModelFormat(format!(
            "unexpected header '{header}'"
        )));
    }
    let arch_line = lines
        .next()
        .ok_or_else(|| SageError::ModelFormat("missing arch line".into()))?;
    let arch: Vec<usize> = arch_line
        .strip_prefix("arch")
        .ok_or_else(|| SageError::ModelFormat("missing arch prefix".into()))?
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| SageError::ModelFormat(format!("bad arch token '{t}'")))
        })
        .collect::<Result<_>>()?;
    if arch.len() < 2 {
        return Err(SageError::ModelFormat("arch too short".into()));
    }

    let parse_f64s = |line: &str| -> Result<Vec<f64>> {
        line.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| SageError::ModelFormat(format!("bad float '{t}'")))
            })
            .collect()
    };

    let mut layers = Vec::new();
    for l in 1..arch.len() {
        let head = lines
            .next()
            .ok_or_else(|| SageError::ModelFormat(format!("missing layer {} header", l - 1)))?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "layer" {
            return Err(SageError::ModelFormat(format!("bad layer header '{head}'")));
        }
        let rows: usize = toks[2]
            .parse()
            .map_err(|_| SageError::ModelFormat("bad layer rows".into()))?;
        let cols: usize = toks[3]
            .parse()
            .map_err(|_| SageError::ModelFormat("bad layer cols".into()))?;
        if rows != arch[l] || cols != arch[l - 1] {
            return Err(SageError::ModelFormat("layer shape disagrees with arch".into()));
        }
        let mut w = Mat::zeros(rows, cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| SageError::ModelFormat("missing weight row".into()))?;
            let vals = parse_f64s(line)?;
            if vals.len() != cols {
                return Err(SageError::ModelFormat("weight row length mismatch".into()));
            }
            w.row_mut(r).copy_from_slice(&vals);
        }
        let bias_line = lines
            .next()
            .ok_or_else(|| SageError::ModelFormat("missing bias line".into()))?;
        let bias_body = bias_line
            .strip_prefix("bias ")
            .ok_or_else(|| SageError::ModelFormat("missing bias prefix".into()))?;
        let b = parse_f64s(bias_body)?;
        if b.len() != rows {
            return Err(SageError::ModelFormat("bias length mismatch".into()));
        }
        layers.push(Layer { w, b });
    }
    Ok(NeuralModel { layers, arch })
}
