//! Open-set diagnosis networks.
//!
//! A 2-layer MLP (`ReLU`, no bias on the logit layer) trained under one of
//! three regimes:
//!
//! - `CE`: plain cross-entropy over the selected diseases; unknowns are
//!   rejected by thresholding the top softmax probability.
//! - `BG`: cross-entropy with one extra background output trained on the
//!   extra diseases; a background argmax is a rejection.
//! - `EOS`: entropic open-set loss. Selected cases use cross-entropy, extra
//!   cases are pushed toward the uniform distribution over the selected
//!   classes via `-(1/C) * sum_c log P(c|x)`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::casesim::{ClinicalCase, Dataset};
use crate::error::{Error, Result};
use crate::kbmodel::sha256_hex;
use crate::numerics::{softmax, Matrix};
use crate::seed;

/// Probability floor inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "BG")]
    Bg,
    #[serde(rename = "EOS")]
    Eos,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Ce, LossMode::Bg, LossMode::Eos];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "CE",
            LossMode::Bg => "BG",
            LossMode::Eos => "EOS",
        }
    }

    /// Whether training data may include extra (out-of-scope) cases.
    pub fn uses_extras(self) -> bool {
        !matches!(self, LossMode::Ce)
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(LossMode::Ce),
            "BG" => Ok(LossMode::Bg),
            "EOS" => Ok(LossMode::Eos),
            other => Err(Error::config("loss_mode", format!("unknown loss mode `{other}`"))),
        }
    }
}

/// One network output. Serialized as the disease id, or `null` for the
/// background (none-of-the-above) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputClass {
    Disease(u32),
    Background,
}

/// Where a training example comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// A case of an in-scope class, by output index.
    Select(usize),
    /// A case of an out-of-scope extra disease.
    Extra,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `D x H`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `H x C`; the logit layer has no bias.
    pub w2: Matrix,
    pub loss_mode: LossMode,
    pub class_ids: Vec<OutputClass>,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

impl MlpModel {
    /// Xavier-uniform weights, zero hidden bias. BG models get a trailing
    /// background output.
    pub fn init(vocab_size: usize, hidden: usize, classes: &[u32], loss_mode: LossMode, seed: u64) -> Result<Self> {
        if vocab_size == 0 || hidden == 0 || classes.is_empty() {
            return Err(Error::config(
                "hidden_units",
                "vocabulary, hidden width and class list must be non-empty",
            ));
        }
        let mut class_ids: Vec<OutputClass> = classes.iter().map(|&d| OutputClass::Disease(d)).collect();
        if loss_mode == LossMode::Bg {
            class_ids.push(OutputClass::Background);
        }
        let mut rng = seed::derived_rng(seed, &[seed::tag::TRAIN, 0x1417]);
        let w1 = xavier(vocab_size, hidden, &mut rng);
        let w2 = xavier(hidden, class_ids.len(), &mut rng);
        Ok(MlpModel {
            w1,
            b1: vec![0.0; hidden],
            w2,
            loss_mode,
            class_ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.class_ids.len()
    }

    pub fn background_index(&self) -> Option<usize> {
        self.class_ids.iter().position(|c| *c == OutputClass::Background)
    }

    /// Disease ids of the foreground outputs, in output order.
    pub fn foreground_ids(&self) -> Vec<u32> {
        self.class_ids
            .iter()
            .filter_map(|c| match c {
                OutputClass::Disease(d) => Some(*d),
                OutputClass::Background => None,
            })
            .collect()
    }

    pub fn class_index(&self) -> HashMap<u32, usize> {
        self.class_ids
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                OutputClass::Disease(d) => Some((*d, i)),
                OutputClass::Background => None,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite() && self.b1.iter().all(|v| v.is_finite())
    }

    /// Hash over the raw parameter bytes and output layout.
    pub fn parameter_hash(&self) -> String {
        let mut bytes = Vec::new();
        for p in [self.w1.as_slice(), &self.b1, self.w2.as_slice()] {
            bytes.extend(p.iter().flat_map(|v| v.to_le_bytes()));
        }
        bytes.extend(serde_json::to_vec(&self.class_ids).unwrap_or_default());
        bytes.extend(self.loss_mode.as_str().as_bytes());
        sha256_hex(&bytes)
    }

    fn check_invariants(&self) -> Result<()> {
        let (d, h) = self.w1.shape();
        if self.b1.len() != h || self.w2.rows() != h || self.w2.cols() != self.class_ids.len() || d == 0 {
            return Err(Error::Dimension {
                op: "MlpModel",
                expected: format!("b1 {h}, w2 {h}x{}", self.class_ids.len()),
                got: format!("b1 {}, w2 {}x{}", self.b1.len(), self.w2.rows(), self.w2.cols()),
            });
        }
        let n_bg = self.class_ids.iter().filter(|c| **c == OutputClass::Background).count();
        let expected_bg = usize::from(self.loss_mode == LossMode::Bg);
        if n_bg != expected_bg || (n_bg == 1 && self.background_index() != Some(self.n_outputs() - 1)) {
            return Err(Error::Format(format!(
                "{} model must have {expected_bg} trailing background output(s)",
                self.loss_mode
            )));
        }
        if !self.is_finite() {
            return Err(Error::Format("model parameters are not finite".into()));
        }
        Ok(())
    }
}

/// Dense binary encoding of a case over a `vocab_size` vocabulary.
pub fn encode(case: &ClinicalCase, vocab_size: usize) -> Result<Vec<f64>> {
    let mut x = vec![0.0; vocab_size];
    for &f in &case.present_findings {
        *x.get_mut(f as usize).ok_or_else(|| {
            Error::Domain(format!("finding {f} is outside the vocabulary of {vocab_size}"))
        })? = 1.0;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn finish_forward(model: &MlpModel, pre_activation: Vec<f64>) -> ForwardPass {
    let hidden: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
    let mut logits = vec![0.0; model.n_outputs()];
    for (j, &h) in hidden.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for (l, &w) in logits.iter_mut().zip(model.w2.row(j)) {
            *l += h * w;
        }
    }
    let probs = softmax(&logits);
    ForwardPass {
        pre_activation,
        hidden,
        logits,
        probs,
    }
}

/// `h = relu(x^T w1 + b1)`, `logits = h^T w2`, `probs = softmax(logits)`.
pub fn forward(model: &MlpModel, x: &[f64]) -> Result<ForwardPass> {
    if x.len() != model.vocab_size() {
        return Err(Error::Dimension {
            op: "forward",
            expected: format!("input of length {}", model.vocab_size()),
            got: format!("length {}", x.len()),
        });
    }
    let mut pre = model.b1.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (p, &w) in pre.iter_mut().zip(model.w1.row(i)) {
            *p += xi * w;
        }
    }
    Ok(finish_forward(model, pre))
}

/// Forward pass for a binary input given by its active feature ids.
pub fn forward_sparse(model: &MlpModel, features: &[u32]) -> ForwardPass {
    let mut pre = model.b1.clone();
    for &f in features {
        for (p, &w) in pre.iter_mut().zip(model.w1.row(f as usize)) {
            *p += w;
        }
    }
    finish_forward(model, pre)
}

/// `-log P(label | x)` with the probability floored at [`LOG_EPS`].
pub fn loss_ce(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(LOG_EPS).ln()
}

/// Entropic open-set loss over `C = probs.len()` selected classes.
pub fn loss_eos(probs: &[f64], origin: Origin) -> f64 {
    match origin {
        Origin::Select(c) => loss_ce(probs, c),
        Origin::Extra => {
            let c = probs.len() as f64;
            -probs.iter().map(|p| p.max(LOG_EPS).ln()).sum::<f64>() / c
        }
    }
}

fn background_or_error(n_outputs: usize, mode: LossMode) -> Result<usize> {
    match mode {
        LossMode::Bg => Ok(n_outputs - 1),
        _ => Err(Error::Domain(format!("{mode} training does not accept extra cases"))),
    }
}

/// Per-example loss under `mode`. CE rejects extra examples.
pub fn example_loss(mode: LossMode, probs: &[f64], origin: Origin) -> Result<f64> {
    match (mode, origin) {
        (LossMode::Eos, o) => Ok(loss_eos(probs, o)),
        (_, Origin::Select(c)) => Ok(loss_ce(probs, c)),
        (_, Origin::Extra) => Ok(loss_ce(probs, background_or_error(probs.len(), mode)?)),
    }
}

/// Gradient of [`example_loss`] with respect to the logits.
pub fn logit_gradient(mode: LossMode, probs: &[f64], origin: Origin) -> Result<Vec<f64>> {
    let mut g = probs.to_vec();
    match (mode, origin) {
        (LossMode::Eos, Origin::Extra) => {
            let u = 1.0 / probs.len() as f64;
            g.iter_mut().for_each(|v| *v -= u);
        }
        (_, Origin::Select(c)) => g[c] -= 1.0,
        (_, Origin::Extra) => g[background_or_error(probs.len(), mode)?] -= 1.0,
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
}

/// Analytic gradients of the per-example loss for a dense input.
pub fn backward(model: &MlpModel, x: &[f64], origin: Origin) -> Result<Gradients> {
    let fwd = forward(model, x)?;
    let dlogits = logit_gradient(model.loss_mode, &fwd.probs, origin)?;
    let (d, h) = model.w1.shape();
    let mut w2 = Matrix::zeros(h, model.n_outputs());
    let mut dh = vec![0.0; h];
    for j in 0..h {
        let wrow = model.w2.row(j);
        dh[j] = if fwd.pre_activation[j] > 0.0 {
            crate::numerics::dot(wrow, &dlogits)
        } else {
            0.0
        };
        let hj = fwd.hidden[j];
        for (g, &dl) in w2.row_mut(j).iter_mut().zip(&dlogits) {
            *g = hj * dl;
        }
    }
    let mut w1 = Matrix::zeros(d, h);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (g, &v) in w1.row_mut(i).iter_mut().zip(&dh) {
            *g = xi * v;
        }
    }
    Ok(Gradients { w1, b1: dh, w2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            hidden_units: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("patience", "must not exceed max_epochs"));
        }
        if self.hidden_units == 0 {
            return Err(Error::config("hidden_units", "must be at least 1"));
        }
        Ok(())
    }
}

/// Adam moments for a list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(lengths: &[usize]) -> Self {
        OptState {
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over matching parameter and gradient groups.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut OptState, config: &TrainConfig) {
    let mut grads = grads.to_vec();
    adam_step_scaled(params, &mut grads, 1.0, state, config);
}

/// Adam on `scale * grads`; leaves every gradient at zero.
fn adam_step_scaled(
    params: &mut [&mut [f64]],
    grads: &mut [Vec<f64>],
    scale: f64,
    state: &mut OptState,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.len(), g.len(), "parameter and gradient shapes differ");
        for i in 0..p.len() {
            let gi = g[i] * scale;
            g[i] = 0.0;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// A model that can be fitted by [`fit`].
pub trait Trainable: Clone {
    type Example;

    fn param_lengths(&self) -> Vec<usize>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    /// Adds the example's loss gradient into `grads` and returns its loss.
    fn accumulate_gradient(&self, example: &Self::Example, grads: &mut [Vec<f64>]) -> f64;

    fn example_loss(&self, example: &Self::Example) -> f64;

    fn mean_loss(&self, examples: &[Self::Example]) -> f64 {
        examples.iter().map(|e| self.example_loss(e)).sum::<f64>() / examples.len() as f64
    }
}

/// A sparse binary input with its training origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub features: Vec<u32>,
    pub origin: Origin,
}

impl Trainable for MlpModel {
    type Example = Example;

    fn param_lengths(&self) -> Vec<usize> {
        vec![self.w1.as_slice().len(), self.b1.len(), self.w2.as_slice().len()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice()]
    }

    fn accumulate_gradient(&self, ex: &Example, grads: &mut [Vec<f64>]) -> f64 {
        let fwd = forward_sparse(self, &ex.features);
        let dlogits = logit_gradient(self.loss_mode, &fwd.probs, ex.origin)
            .expect("examples are validated against the loss mode");
        let loss = example_loss(self.loss_mode, &fwd.probs, ex.origin).expect("validated");
        let h = self.hidden();
        let c = self.n_outputs();
        let mut dh = vec![0.0; h];
        let (gw1, rest) = grads.split_at_mut(1);
        let (gb1, gw2) = rest.split_at_mut(1);
        for j in 0..h {
            if fwd.pre_activation[j] <= 0.0 {
                continue;
            }
            let hj = fwd.hidden[j];
            let wrow = self.w2.row(j);
            let grow = &mut gw2[0][j * c..(j + 1) * c];
            let mut acc = 0.0;
            for k in 0..c {
                grow[k] += hj * dlogits[k];
                acc += wrow[k] * dlogits[k];
            }
            dh[j] = acc;
        }
        for (g, d) in gb1[0].iter_mut().zip(&dh) {
            *g += d;
        }
        for &f in &ex.features {
            let row = &mut gw1[0][f as usize * h..(f as usize + 1) * h];
            for (g, d) in row.iter_mut().zip(&dh) {
                *g += d;
            }
        }
        loss
    }

    fn example_loss(&self, ex: &Example) -> f64 {
        let fwd = forward_sparse(self, &ex.features);
        example_loss(self.loss_mode, &fwd.probs, ex.origin).expect("validated")
    }
}

/// Converts cases into training examples for `model`. Cases of diseases
/// outside the model's classes become extra examples for BG/EOS and are an
/// error for CE.
pub fn prepare_examples(model: &MlpModel, dataset: &Dataset) -> Result<Vec<Example>> {
    let index = model.class_index();
    dataset
        .cases
        .iter()
        .map(|c| {
            if let Some(&f) = c.present_findings.iter().find(|&&f| f as usize >= model.vocab_size()) {
                return Err(Error::Domain(format!("finding {f} outside the model vocabulary")));
            }
            let origin = match index.get(&c.disease_id) {
                Some(&i) => Origin::Select(i),
                None if model.loss_mode.uses_extras() => Origin::Extra,
                None => return Err(Error::UnknownLabel(c.disease_id)),
            };
            Ok(Example {
                features: c.present_findings.clone(),
                origin,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.10},{:.10}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// Mini-batch Adam with early stopping on validation loss.
///
/// Batches are reshuffled each epoch from a stream seeded by `config.seed`.
/// Training stops once `patience` consecutive epochs fail to improve the best
/// validation loss, or after `max_epochs`; the best snapshot is returned.
pub fn fit<T: Trainable>(
    init: T,
    train: &[T::Example],
    val: &[T::Example],
    config: &TrainConfig,
) -> Result<(T, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Domain("validation set is empty".into()));
    }
    let mut model = init;
    let lengths = model.param_lengths();
    let mut state = OptState::new(&lengths);
    let mut grads: Vec<Vec<f64>> = lengths.iter().map(|&n| vec![0.0; n]).collect();
    let mut rng = seed::derived_rng(config.seed, &[seed::tag::TRAIN]);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &i in batch {
                total += model.accumulate_gradient(&train[i], &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            adam_step_scaled(&mut model.params_mut(), &mut grads, scale, &mut state, config);
        }
        let val_loss = model.mean_loss(val);
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= config.patience {
            break;
        }
    }
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_loss: best_val,
        },
    ))
}

/// Trains an MLP on case datasets. `train` may contain extra cases for BG/EOS.
pub fn train(
    model_init: MlpModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    model_init.check_invariants()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Domain("training and validation datasets must be non-empty".into()));
    }
    for ds in [train_set, val_set] {
        if ds.vocab_size != model_init.vocab_size() {
            return Err(Error::Dimension {
                op: "train",
                expected: format!("vocabulary {}", model_init.vocab_size()),
                got: format!("vocabulary {}", ds.vocab_size),
            });
        }
    }
    let train_ex = prepare_examples(&model_init, train_set)?;
    let val_ex = prepare_examples(&model_init, val_set)?;
    fit(model_init, &train_ex, &val_ex, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Class { disease: u32, confidence: f64 },
    Nota,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub outcome: Outcome,
    pub probs: Vec<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Best foreground class and its probability, or `None` when the background
/// output wins the argmax.
pub fn foreground_decision(probs: &[f64], background: Option<usize>) -> Option<(usize, f64)> {
    let top = argmax(probs);
    if Some(top) == background {
        None
    } else {
        Some((top, probs[top]))
    }
}

/// Open-set decision for probabilities laid out as `class_ids`.
pub fn decide(class_ids: &[OutputClass], probs: Vec<f64>, theta: f64) -> Prediction {
    let background = class_ids.iter().position(|c| *c == OutputClass::Background);
    let outcome = match foreground_decision(&probs, background) {
        Some((i, confidence)) if confidence >= theta => match class_ids[i] {
            OutputClass::Disease(disease) => Outcome::Class { disease, confidence },
            OutputClass::Background => Outcome::Nota,
        },
        _ => Outcome::Nota,
    };
    Prediction { outcome, probs }
}

/// Argmax class when its probability reaches `theta`, otherwise NOTA. For
/// BG models a background argmax is NOTA regardless of `theta`.
pub fn predict_open_set(model: &MlpModel, x: &[f64], theta: f64) -> Result<Prediction> {
    let fwd = forward(model, x)?;
    Ok(decide(&model.class_ids, fwd.probs, theta))
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

pub fn decode_f64s(text: &str, expected_len: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::Format(format!("{what}: invalid base64: {e}")))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Format(format!(
            "{what}: expected {expected_len} floats, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Provenance recorded alongside saved models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub train_config: Option<TrainConfig>,
    /// Content hashes of the datasets the model was fitted on.
    pub data_hashes: Vec<String>,
    pub kb_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    loss_mode: LossMode,
    class_ids: Vec<OutputClass>,
    hidden: usize,
    vocab_size: usize,
    w1: String,
    b1: String,
    w2: String,
    provenance: ModelProvenance,
}

pub fn model_to_json(model: &MlpModel, provenance: &ModelProvenance) -> Vec<u8> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        loss_mode: model.loss_mode,
        class_ids: model.class_ids.clone(),
        hidden: model.hidden(),
        vocab_size: model.vocab_size(),
        w1: encode_f64s(model.w1.as_slice()),
        b1: encode_f64s(&model.b1),
        w2: encode_f64s(model.w2.as_slice()),
        provenance: provenance.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("model serialization cannot fail");
    bytes.push(b'\n');
    bytes
}

pub fn model_from_json(bytes: &[u8]) -> Result<(MlpModel, ModelProvenance)> {
    let file: ModelFile = serde_json::from_slice(bytes)?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            what: "model",
            found: file.schema_version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let (d, h, c) = (file.vocab_size, file.hidden, file.class_ids.len());
    let model = MlpModel {
        w1: Matrix::from_vec(d, h, decode_f64s(&file.w1, d * h, "w1")?)?,
        b1: decode_f64s(&file.b1, h, "b1")?,
        w2: Matrix::from_vec(h, c, decode_f64s(&file.w2, h * c, "w2")?)?,
        loss_mode: file.loss_mode,
        class_ids: file.class_ids,
    };
    model.check_invariants()?;
    Ok((model, file.provenance))
}

/// Writes the model file and returns the hash of the written bytes.
pub fn save_model(model: &MlpModel, provenance: &ModelProvenance, path: &Path) -> Result<String> {
    let bytes = model_to_json(model, provenance);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a model file; also returns the hash of its bytes.
pub fn load_model(path: &Path) -> Result<(MlpModel, ModelProvenance, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (m, p) = model_from_json(&bytes)?;
    Ok((m, p, sha256_hex(&bytes)))
}
