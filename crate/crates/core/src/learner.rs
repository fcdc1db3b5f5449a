//! Seeded trainers for logistic regression and ReLU multilayer perceptrons.
//!
//! `train` is a pure function of `(spec, data, labeled, modelsel, config, xi)`:
//! xi keys the initialization, minibatch shuffling and dropout streams, and
//! the labeled set is sorted before use so only its membership matters.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Architecture family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LearnerSpec {
    Logistic,
    Mlp { hidden_sizes: Vec<usize>, dropout_rate: f64 },
}

impl LearnerSpec {
    pub fn mlp(hidden: &[usize], dropout_rate: f64) -> Self {
        LearnerSpec::Mlp { hidden_sizes: hidden.to_vec(), dropout_rate }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            LearnerSpec::Logistic => 0.0,
            LearnerSpec::Mlp { dropout_rate, .. } => *dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LearnerSpec::Mlp { hidden_sizes, dropout_rate } = self {
            if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
                return Err(Error::InvalidLearner("mlp hidden sizes must be non-empty and positive".into()));
            }
            if !(0.0..1.0).contains(dropout_rate) {
                return Err(Error::InvalidLearner(format!("dropout rate {dropout_rate} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `mlp-32x16`.
    pub fn label(&self) -> String {
        match self {
            LearnerSpec::Logistic => "logistic".into(),
            LearnerSpec::Mlp { hidden_sizes, .. } => {
                let dims: Vec<String> = hidden_sizes.iter().map(|h| h.to_string()).collect();
                format!("mlp-{}", dims.join("x"))
            }
        }
    }
}

/// Evaluation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    WeightedF1,
}

fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    20
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

/// Optimizer and early-stopping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Minibatch size; experiments set this to the acquisition batch size.
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Score used on the model-selection set.
    #[serde(default)]
    pub metric: Metric,
}

impl TrainConfig {
    pub fn with_batch_size(batch_size: usize) -> Self {
        Self {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            learning_rate: default_lr(),
            batch_size,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            metric: Metric::Accuracy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidLearner("batch_size must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidLearner(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidLearner("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Layer widths and flat parameter layout of a network.
///
/// Each layer stores its `out x in` weight matrix row-major followed by its
/// `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    widths: Vec<usize>,
    dropout_rate: f64,
}

impl Architecture {
    pub fn new(spec: &LearnerSpec, feature_dim: usize, num_classes: usize) -> Self {
        let mut widths = vec![feature_dim];
        if let LearnerSpec::Mlp { hidden_sizes, .. } = spec {
            widths.extend_from_slice(hidden_sizes);
        }
        widths.push(num_classes);
        Self { widths, dropout_rate: spec.dropout_rate() }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// fan-in `n` is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.num_params());
        for w in self.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * (w[0] + 1) {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        params
    }

    /// Logits for one input. `masks` holds one keep-scale per hidden unit
    /// (0 or 1/(1-p)); `None` disables dropout.
    fn forward(&self, params: &[f64], x: &[f64], masks: Option<&[f64]>, acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(x.to_vec());
        let mut offset = 0;
        let mut mask_offset = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_out * n_in];
            let biases = &params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            offset += n_out * (n_in + 1);
            let input = &acts[l];
            let mut out: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(biases)
                .map(|(row, &b)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b)
                .collect();
            if l < last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
                if let Some(m) = masks {
                    for (v, &s) in out.iter_mut().zip(&m[mask_offset..mask_offset + n_out]) {
                        *v *= s;
                    }
                }
                mask_offset += n_out;
            }
            acts.push(out);
        }
    }

    fn hidden_units(&self) -> usize {
        self.widths[1..self.widths.len() - 1].iter().sum()
    }

    fn sample_masks(&self, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        if self.dropout_rate <= 0.0 || self.hidden_layers() == 0 {
            return None;
        }
        let keep = 1.0 - self.dropout_rate;
        Some(
            (0..self.hidden_units())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }

    /// Adds the gradient of the cross-entropy loss for one example to `grad`
    /// and returns that loss.
    fn accumulate(
        &self,
        params: &[f64],
        x: &[f64],
        y: usize,
        masks: Option<&[f64]>,
        acts: &mut Vec<Vec<f64>>,
        grad: &mut [f64],
    ) -> f64 {
        self.forward(params, x, masks, acts);
        let probs = softmax(acts.last().unwrap());
        let loss = -probs[y].max(f64::MIN_POSITIVE).ln();
        let mut delta: Vec<f64> = probs;
        delta[y] -= 1.0;

        // layer offsets
        let offsets: Vec<usize> = self
            .widths
            .windows(2)
            .scan(0, |o, w| {
                let start = *o;
                *o += w[1] * (w[0] + 1);
                Some(start)
            })
            .collect();
        let mask_offsets: Vec<usize> = self.widths[1..self.widths.len() - 1]
            .iter()
            .scan(0, |o, &h| {
                let start = *o;
                *o += h;
                Some(start)
            })
            .collect();

        for l in (0..self.widths.len() - 1).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[off + n_out * n_in + o] += d;
            }
            if l == 0 {
                break;
            }
            // back through the weights, then ReLU and dropout of layer l
            let weights = &params[off..off + n_out * n_in];
            let mut prev = vec![0.0; n_in];
            for (o, row) in weights.chunks_exact(n_in).enumerate() {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            let h = &acts[l];
            for (i, p) in prev.iter_mut().enumerate() {
                // post-activation (and post-mask) value is zero exactly when
                // the unit was inactive or dropped
                if h[i] <= 0.0 {
                    *p = 0.0;
                } else if let Some(m) = masks {
                    *p *= m[mask_offsets[l - 1] + i];
                }
            }
            delta = prev;
        }
        loss
    }

    /// Mean cross-entropy and its gradient over `idx`, without dropout.
    pub fn loss_and_gradient(&self, params: &[f64], data: &Dataset, idx: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let mut acts = Vec::new();
        let mut loss = 0.0;
        for &i in idx {
            loss += self.accumulate(params, data.features(i), data.label(i), None, &mut acts, &mut grad);
        }
        let n = idx.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    /// Mean cross-entropy over `idx`, without dropout.
    pub fn loss(&self, params: &[f64], data: &Dataset, idx: &[usize]) -> f64 {
        let mut acts = Vec::new();
        let total: f64 = idx
            .iter()
            .map(|&i| {
                self.forward(params, data.features(i), None, &mut acts);
                let p = softmax(acts.last().unwrap());
                -p[data.label(i)].max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        total / idx.len().max(1) as f64
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trained parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: LearnerSpec,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: Vec<f64>,
    /// Hash of (spec, config, xi, sorted labeled indices, model-selection
    /// indices, dataset).
    pub train_fingerprint: String,
}

/// On-disk model layout: architecture header followed by the flat parameters.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    #[serde(flatten)]
    model: Model,
}

const MODEL_FORMAT: &str = "oracle-al-model/1";

impl Model {
    pub fn architecture(&self) -> Architecture {
        Architecture::new(&self.spec, self.feature_dim, self.num_classes)
    }

    /// A model with all parameters zero (uniform predictions).
    pub fn zeros(spec: LearnerSpec, feature_dim: usize, num_classes: usize) -> Self {
        let n = Architecture::new(&spec, feature_dim, num_classes).num_params();
        Self { spec, feature_dim, num_classes, params: vec![0.0; n], train_fingerprint: String::new() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile { format: MODEL_FORMAT.into(), model: self.clone() })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::InvalidLearner(format!("unknown model format {}", file.format)));
        }
        let m = file.model;
        if m.params.len() != m.architecture().num_params() {
            return Err(Error::InvalidLearner("parameter count does not match architecture".into()));
        }
        Ok(m)
    }
}

/// Result of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: Model,
    /// Model-selection score after every completed epoch.
    pub scores: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

/// Patience-based early stopping on a maximized score. Only strict
/// improvements reset the counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    /// Records the score of `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience && !improved)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

pub fn train_fingerprint(
    spec: &LearnerSpec,
    config: &TrainConfig,
    xi: u64,
    labeled: &[usize],
    modelsel: &[usize],
    dataset_fingerprint: &str,
) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).unwrap_or_default());
    h.update(serde_json::to_vec(config).unwrap_or_default());
    h.update(xi.to_le_bytes());
    for set in [labeled, modelsel] {
        h.update((set.len() as u64).to_le_bytes());
        for &i in set {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.update(dataset_fingerprint.as_bytes());
    hex::encode(h.finalize())
}

/// Adam with minibatches, per-epoch model selection and early stopping.
pub fn train(
    spec: &LearnerSpec,
    data: &Dataset,
    labeled: &[usize],
    modelsel: &[usize],
    config: &TrainConfig,
    xi: u64,
) -> Result<Trained> {
    train_with_fingerprint(spec, data, labeled, modelsel, config, xi, None)
}

/// As [`train`], reusing a precomputed dataset fingerprint for the model's
/// train fingerprint.
pub fn train_with_fingerprint(
    spec: &LearnerSpec,
    data: &Dataset,
    labeled: &[usize],
    modelsel: &[usize],
    config: &TrainConfig,
    xi: u64,
    dataset_fingerprint: Option<&str>,
) -> Result<Trained> {
    spec.validate()?;
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptySet("labeled"));
    }
    if modelsel.is_empty() {
        return Err(Error::EmptySet("model-selection"));
    }
    let mut labeled = labeled.to_vec();
    labeled.sort_unstable();

    let arch = Architecture::new(spec, data.feature_dim(), data.num_classes());
    let mut params = arch.init(&mut rng_for(xi, Stream::Init));
    let mut shuffle_rng = rng_for(xi, Stream::Shuffle);
    let mut dropout_rng = rng_for(xi, Stream::Dropout);

    let n_params = params.len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut acts = Vec::new();
    let mut step: i32 = 0;

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = params.clone();
    let mut scores = Vec::with_capacity(config.max_epochs);
    let mut order = labeled.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let masks = arch.sample_masks(&mut dropout_rng);
                arch.accumulate(&params, data.features(i), data.label(i), masks.as_deref(), &mut acts, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - config.beta1.powi(step);
            let bc2 = 1.0 - config.beta2.powi(step);
            for j in 0..n_params {
                let g = grad[j] * scale;
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                params[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        let score = score_params(&arch, &params, data, modelsel, config.metric);
        scores.push(score);
        let (improved, stop) = stopper.observe(epoch, score);
        if improved {
            best_params.copy_from_slice(&params);
        }
        if stop {
            break;
        }
    }

    let dataset_fp;
    let fp = match dataset_fingerprint {
        Some(fp) => fp,
        None => {
            dataset_fp = data.fingerprint();
            &dataset_fp
        }
    };
    let best_epoch = stopper.best().map_or(0, |(e, _)| e);
    Ok(Trained {
        model: Model {
            spec: spec.clone(),
            feature_dim: data.feature_dim(),
            num_classes: data.num_classes(),
            params: best_params,
            train_fingerprint: train_fingerprint(spec, config, xi, &labeled, modelsel, fp),
        },
        scores,
        best_epoch,
    })
}

fn score_params(arch: &Architecture, params: &[f64], data: &Dataset, idx: &[usize], metric: Metric) -> f64 {
    let mut acts = Vec::new();
    let (truth, pred): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .map(|&i| {
            arch.forward(params, data.features(i), None, &mut acts);
            (data.label(i), argmax(acts.last().unwrap()))
        })
        .unzip();
    score_predictions(&truth, &pred, arch.num_classes(), metric)
}

impl Model {
    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch { expected: self.feature_dim, got: x.len() });
        }
        Ok(())
    }

    /// Deterministic class probabilities (dropout off).
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut acts = Vec::new();
        self.architecture().forward(&self.params, x, None, &mut acts);
        Ok(softmax(acts.last().unwrap()))
    }

    /// Predicted class (dropout off, lowest index on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.check_dim(x)?;
        let mut acts = Vec::new();
        self.architecture().forward(&self.params, x, None, &mut acts);
        Ok(argmax(acts.last().unwrap()))
    }

    /// `mc_samples` softmax outputs under dropout masks drawn from `rng`.
    /// Without dropout every sample is the deterministic output.
    pub fn sample_probabilities(&self, x: &[f64], mc_samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        self.check_dim(x)?;
        let arch = self.architecture();
        let mut acts = Vec::new();
        Ok((0..mc_samples)
            .map(|_| {
                let masks = arch.sample_masks(rng);
                arch.forward(&self.params, x, masks.as_deref(), &mut acts);
                softmax(acts.last().unwrap())
            })
            .collect())
    }
}

/// Class-probability vectors for `x`: a single deterministic output when
/// `mc_samples == 1`, otherwise `mc_samples` outputs under zeta-seeded
/// dropout masks.
pub fn predict_proba(model: &Model, x: &[f64], mc_samples: usize, zeta: u64) -> Result<Vec<Vec<f64>>> {
    if mc_samples == 0 {
        return Err(Error::InvalidAcquisition("mc_samples must be at least 1".into()));
    }
    if mc_samples == 1 {
        return Ok(vec![model.probabilities(x)?]);
    }
    model.sample_probabilities(x, mc_samples, &mut rng_for(zeta, Stream::Acquisition))
}

/// Scores `model` on the examples in `idx`.
pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize], metric: Metric) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::EmptySet("evaluation"));
    }
    if model.feature_dim != data.feature_dim() {
        return Err(Error::DimensionMismatch { expected: model.feature_dim, got: data.feature_dim() });
    }
    Ok(score_params(&model.architecture(), &model.params, data, idx, metric))
}

/// Accuracy, or support-weighted F1 with F1 = 0 for classes whose precision
/// and recall are both zero.
pub fn score_predictions(truth: &[usize], pred: &[usize], num_classes: usize, metric: Metric) -> f64 {
    let n = truth.len();
    if n == 0 {
        return 0.0;
    }
    match metric {
        Metric::Accuracy => truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n as f64,
        Metric::WeightedF1 => {
            let mut tp = vec![0usize; num_classes];
            let mut support = vec![0usize; num_classes];
            let mut predicted = vec![0usize; num_classes];
            for (&t, &p) in truth.iter().zip(pred) {
                support[t] += 1;
                predicted[p] += 1;
                if t == p {
                    tp[t] += 1;
                }
            }
            (0..num_classes)
                .filter(|&c| support[c] > 0)
                .map(|c| {
                    // F1 = 2tp / (support + predicted); zero when tp = 0
                    let f1 = 2.0 * tp[c] as f64 / (support[c] + predicted[c]) as f64;
                    support[c] as f64 / n as f64 * f1
                })
                .sum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Example, SyntheticSpec};
    use rand::SeedableRng;

    fn random_dataset(seed: u64, n: usize, d: usize, c: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| Example {
                features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: i % c,
            })
            .collect();
        Dataset::new(examples, c, d, "random").unwrap()
    }

    fn numeric_gradient(arch: &Architecture, params: &[f64], data: &Dataset, idx: &[usize]) -> Vec<f64> {
        let h = 1e-6;
        let mut p = params.to_vec();
        (0..params.len())
            .map(|j| {
                let orig = p[j];
                p[j] = orig + h;
                let up = arch.loss(&p, data, idx);
                p[j] = orig - h;
                let down = arch.loss(&p, data, idx);
                p[j] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let d = 1 + (seed as usize % 5);
            let c = 2 + (seed as usize % 2);
            let n = 1 + (seed as usize % 8);
            let data = random_dataset(seed, n, d, c);
            let idx: Vec<usize> = (0..n).collect();
            for spec in [LearnerSpec::Logistic, LearnerSpec::mlp(&[4, 3], 0.0)] {
                let arch = Architecture::new(&spec, d, c);
                let params = arch.init(&mut rng_for(seed, Stream::Init));
                let (_, analytic) = arch.loss_and_gradient(&params, &data, &idx);
                let numeric = numeric_gradient(&arch, &params, &data, &idx);
                let err = relative_error(&analytic, &numeric);
                assert!(err <= 1e-5, "seed {seed} {spec:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn early_stopping_arithmetic() {
        let mut es = EarlyStopping::new(20);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let score = if epoch <= 5 { epoch as f64 / 10.0 } else { 0.5 };
            let (_, stop) = es.observe(epoch, score);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(25));
        assert_eq!(es.best(), Some((5, 0.5)));
    }

    #[test]
    fn ties_do_not_reset_patience() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 0.5), (true, false));
        assert_eq!(es.observe(2, 0.5), (false, false));
        assert_eq!(es.observe(3, 0.5), (false, true));
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_synthetic(&SyntheticSpec::balanced(3, 4, 2.0, 1.0, 60), 0).unwrap();
        let labeled: Vec<usize> = (0..30).collect();
        let ms: Vec<usize> = (30..45).collect();
        let spec = LearnerSpec::mlp(&[8], 0.2);
        let cfg = TrainConfig::with_batch_size(5);
        let a = train(&spec, &data, &labeled, &ms, &cfg, 11).unwrap();
        let b = train(&spec, &data, &labeled, &ms, &cfg, 11).unwrap();
        assert_eq!(a, b);
        let mut shuffled = labeled.clone();
        shuffled.reverse();
        let c = train(&spec, &data, &shuffled, &ms, &cfg, 11).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let mut spec = SyntheticSpec::balanced(2, 2, 10.0, 0.3, 80);
        spec.cluster_means = vec![vec![-5.0, -5.0], vec![5.0, 5.0]];
        let data = generate_synthetic(&spec, 2).unwrap();
        let labeled: Vec<usize> = (0..40).collect();
        let ms: Vec<usize> = (40..80).collect();
        let t = train(&LearnerSpec::Logistic, &data, &labeled, &ms, &TrainConfig::with_batch_size(5), 0).unwrap();
        assert_eq!(t.scores[t.best_epoch - 1], 1.0);
        assert_eq!(evaluate(&t.model, &data, &ms, Metric::Accuracy).unwrap(), 1.0);
    }

    #[test]
    fn xi_changes_mlp_parameters() {
        let data = random_dataset(3, 20, 3, 2);
        let labeled: Vec<usize> = (0..14).collect();
        let ms: Vec<usize> = (14..20).collect();
        let spec = LearnerSpec::mlp(&[6], 0.1);
        let cfg = TrainConfig::with_batch_size(4);
        let thetas: Vec<Vec<f64>> = (0..5).map(|xi| train(&spec, &data, &labeled, &ms, &cfg, xi).unwrap().model.params).collect();
        let distinct = thetas.iter().enumerate().filter(|(i, t)| thetas[..*i].iter().all(|u| u != *t)).count();
        assert!(distinct >= 2);
    }

    #[test]
    fn first_epoch_decreases_loss() {
        let data = random_dataset(9, 8, 4, 3);
        let idx: Vec<usize> = (0..8).collect();
        for spec in [LearnerSpec::Logistic, LearnerSpec::mlp(&[5], 0.0)] {
            let arch = Architecture::new(&spec, 4, 3);
            let mut params = arch.init(&mut rng_for(1, Stream::Init));
            let before = arch.loss(&params, &data, &idx);
            // plain gradient steps over a fixed minibatch ordering
            for batch in idx.chunks(2) {
                let (_, g) = arch.loss_and_gradient(&params, &data, batch);
                for (p, gj) in params.iter_mut().zip(&g) {
                    *p -= 1e-4 * gj;
                }
            }
            assert!(arch.loss(&params, &data, &idx) < before);
        }
    }

    #[test]
    fn empty_sets_rejected() {
        let data = random_dataset(0, 4, 2, 2);
        let cfg = TrainConfig::with_batch_size(2);
        assert!(matches!(train(&LearnerSpec::Logistic, &data, &[], &[0], &cfg, 0), Err(Error::EmptySet(_))));
        assert!(matches!(train(&LearnerSpec::Logistic, &data, &[0], &[], &cfg, 0), Err(Error::EmptySet(_))));
        let m = Model::zeros(LearnerSpec::Logistic, 2, 2);
        assert!(matches!(evaluate(&m, &data, &[], Metric::Accuracy), Err(Error::EmptySet(_))));
    }

    #[test]
    fn probabilities_are_normalized() {
        let data = random_dataset(4, 10, 3, 3);
        let t = train(&LearnerSpec::mlp(&[5], 0.3), &data, &[0, 1, 2, 3, 4], &[5, 6, 7], &TrainConfig::with_batch_size(2), 3).unwrap();
        for i in 0..10 {
            for p in predict_proba(&t.model, data.features(i), 4, 9).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn no_dropout_means_identical_samples() {
        let m = Model { params: (0..Architecture::new(&LearnerSpec::mlp(&[4], 0.0), 3, 2).num_params()).map(|i| (i as f64 * 0.37).sin()).collect(), ..Model::zeros(LearnerSpec::mlp(&[4], 0.0), 3, 2) };
        let out = predict_proba(&m, &[0.1, 0.2, 0.3], 5, 1).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|p| p == &out[0]));
    }

    #[test]
    fn zero_logistic_is_uniform() {
        let m = Model::zeros(LearnerSpec::Logistic, 3, 4);
        assert_eq!(predict_proba(&m, &[1.0, -2.0, 3.0], 1, 0).unwrap(), vec![vec![0.25; 4]]);
        assert!(matches!(predict_proba(&m, &[1.0], 1, 0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn metric_cases() {
        assert_eq!(score_predictions(&[0, 1, 2], &[0, 1, 2], 3, Metric::Accuracy), 1.0);
        assert_eq!(score_predictions(&[0, 1, 2], &[0, 1, 2], 3, Metric::WeightedF1), 1.0);
        // class 0: p=1, r=1/2 → 2/3; class 1: p=1/2, r=1 → 2/3
        let f1 = score_predictions(&[0, 0, 1], &[0, 1, 1], 2, Metric::WeightedF1);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        let truth = [0, 0, 0, 1, 2];
        assert!((score_predictions(&truth, &[0; 5], 3, Metric::Accuracy) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn model_json_roundtrip() {
        let data = random_dataset(5, 10, 3, 2);
        let t = train(&LearnerSpec::mlp(&[3], 0.0), &data, &[0, 1, 2, 3], &[4, 5], &TrainConfig::with_batch_size(2), 1).unwrap();
        let back = Model::from_json(&t.model.to_json().unwrap()).unwrap();
        assert_eq!(back, t.model);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn evaluate_is_permutation_invariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
                let data = random_dataset(seed, 12, 2, 3);
                let m = Model { params: (0..9).map(|i| ((i as u64 ^ seed) % 7) as f64 - 3.0).collect(), ..Model::zeros(LearnerSpec::Logistic, 2, 3) };
                let idx: Vec<usize> = (0..12).collect();
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
                for metric in [Metric::Accuracy, Metric::WeightedF1] {
                    let a = evaluate(&m, &data, &idx, metric).unwrap();
                    let b = evaluate(&m, &data, &shuffled, metric).unwrap();
                    prop_assert!((a - b).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&a));
                }
            }
        }
    }
}
