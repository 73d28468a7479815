//! Ensembles of site-local experts.
//!
//! The naive ensemble takes, per selected class, the highest probability any
//! expert assigns to it; background experts vote for rejection through their
//! mean background probability. The mixture of experts gates the concatenated
//! expert logits with a per-dimension sigmoid of the input and maps them
//! through a linear head trained on a small pooled heldout set. Experts are
//! only ever borrowed immutably.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::casesim::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    entropy_histogram, oscr_curve, recall_at_k, EntropyHistogram, OscrCurve, ScoreOrigin, ScoredExample,
};
use crate::numerics::{sigmoid, softmax, Matrix};
use crate::openset::{
    argmax, decode_f64s, encode_f64s, fit, foreground_decision, forward, forward_sparse, logit_gradient, load_model,
    LossMode, MlpModel, Origin, Outcome, OutputClass, Prediction, TrainConfig, TrainHistory, Trainable,
};

/// Frozen experts sharing one vocabulary, plus the ensemble's class list.
#[derive(Debug, Clone)]
pub struct ExpertSet {
    pub experts: Vec<MlpModel>,
    /// Sorted ensemble classes.
    pub l_select: Vec<u32>,
    /// For each `l_select` index, the (expert, output) pairs that carry it.
    coverage: Vec<Vec<(usize, usize)>>,
}

impl ExpertSet {
    pub fn new(experts: Vec<MlpModel>, l_select: &[u32]) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Domain("an ensemble needs at least one expert".into()))?;
        let d = first.vocab_size();
        if let Some(e) = experts.iter().find(|e| e.vocab_size() != d) {
            return Err(Error::Dimension {
                op: "ExpertSet",
                expected: format!("shared vocabulary {d}"),
                got: format!("{}", e.vocab_size()),
            });
        }
        let mut l_select = l_select.to_vec();
        l_select.sort_unstable();
        l_select.dedup();
        let position: HashMap<u32, usize> = l_select.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        let mut coverage = vec![Vec::new(); l_select.len()];
        for (i, e) in experts.iter().enumerate() {
            for (k, c) in e.class_ids.iter().enumerate() {
                if let OutputClass::Disease(d) = c {
                    if let Some(&p) = position.get(d) {
                        coverage[p].push((i, k));
                    }
                }
            }
        }
        if let Some(p) = coverage.iter().position(Vec::is_empty) {
            return Err(Error::Domain(format!(
                "class {} is not covered by any expert",
                l_select[p]
            )));
        }
        Ok(ExpertSet {
            experts,
            l_select,
            coverage,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.experts[0].vocab_size()
    }

    /// Width of the concatenated expert logits.
    pub fn logit_width(&self) -> usize {
        self.experts.iter().map(MlpModel::n_outputs).sum()
    }

    pub fn parameter_hashes(&self) -> Vec<String> {
        self.experts.iter().map(MlpModel::parameter_hash).collect()
    }

    /// Concatenated expert logits for a binary input.
    pub fn concat_logits(&self, features: &[u32]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.logit_width());
        for e in &self.experts {
            z.extend(forward_sparse(e, features).logits);
        }
        z
    }

    fn fuse(&self, expert_probs: &[Vec<f64>]) -> FusedScore {
        let confidences = self
            .coverage
            .iter()
            .map(|carriers| {
                carriers
                    .iter()
                    .map(|&(i, k)| expert_probs[i][k])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let bg: Vec<f64> = self
            .experts
            .iter()
            .zip(expert_probs)
            .filter_map(|(e, p)| e.background_index().map(|b| p[b]))
            .collect();
        let nota_score = if bg.is_empty() {
            0.0
        } else {
            bg.iter().sum::<f64>() / bg.len() as f64
        };
        FusedScore {
            confidences,
            nota_score,
        }
    }
}

/// Naive-ensemble scores over `l_select`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScore {
    pub confidences: Vec<f64>,
    pub nota_score: f64,
}

impl FusedScore {
    /// Best class index and confidence, or `None` when the background vote
    /// beats every class.
    pub fn top(&self) -> Option<(usize, f64)> {
        let i = argmax(&self.confidences);
        let c = self.confidences[i];
        (self.nota_score <= c).then_some((i, c))
    }

    pub fn decide(&self, l_select: &[u32], theta: f64) -> Outcome {
        match self.top() {
            Some((i, confidence)) if confidence >= theta => Outcome::Class {
                disease: l_select[i],
                confidence,
            },
            _ => Outcome::Nota,
        }
    }
}

pub fn naive_predict(set: &ExpertSet, x: &[f64]) -> Result<FusedScore> {
    let probs = set
        .experts
        .iter()
        .map(|e| forward(e, x).map(|f| f.probs))
        .collect::<Result<Vec<_>>>()?;
    Ok(set.fuse(&probs))
}

pub fn naive_predict_sparse(set: &ExpertSet, features: &[u32]) -> FusedScore {
    let probs: Vec<Vec<f64>> = set.experts.iter().map(|e| forward_sparse(e, features).probs).collect();
    set.fuse(&probs)
}

/// Open-set decision of the naive ensemble at threshold `theta`.
pub fn naive_prediction(set: &ExpertSet, x: &[f64], theta: f64) -> Result<Prediction> {
    let score = naive_predict(set, x)?;
    Ok(Prediction {
        outcome: score.decide(&set.l_select, theta),
        probs: score.confidences,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    /// `D x E`
    pub gate_w: Matrix,
    pub gate_b: Vec<f64>,
    /// `E x C_out`
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
    pub loss_mode: LossMode,
    pub class_ids: Vec<OutputClass>,
    /// Parameter hashes of the experts this head was fitted on, in order.
    pub expert_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeForward {
    pub gate: Vec<f64>,
    pub expert_logits: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl MoeModel {
    /// Zero gate (every gate starts at 1/2) and an output layer that averages
    /// each class over the experts carrying it, so the untrained head already
    /// reproduces the mean expert logits. Background experts feed a BG head's
    /// background output the same way.
    pub fn init(set: &ExpertSet, head: LossMode) -> Self {
        let mut class_ids: Vec<OutputClass> = set.l_select.iter().map(|&d| OutputClass::Disease(d)).collect();
        if head == LossMode::Bg {
            class_ids.push(OutputClass::Background);
        }
        let e_width = set.logit_width();
        let c_out = class_ids.len();
        let mut out_w = Matrix::zeros(e_width, c_out);
        let offsets = expert_offsets(set);
        for (c, carriers) in set.coverage.iter().enumerate() {
            for &(i, k) in carriers {
                out_w[(offsets[i] + k, c)] = 2.0 / carriers.len() as f64;
            }
        }
        if head == LossMode::Bg {
            let bg: Vec<usize> = set
                .experts
                .iter()
                .enumerate()
                .filter_map(|(i, e)| e.background_index().map(|b| offsets[i] + b))
                .collect();
            for &row in &bg {
                out_w[(row, c_out - 1)] = 2.0 / bg.len() as f64;
            }
        }
        MoeModel {
            gate_w: Matrix::zeros(set.vocab_size(), e_width),
            gate_b: vec![0.0; e_width],
            out_w,
            out_b: vec![0.0; c_out],
            loss_mode: head,
            class_ids,
            expert_hashes: set.parameter_hashes(),
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.class_ids.len()
    }

    /// Forward pass from active input features and precomputed expert logits.
    pub fn forward_parts(&self, features: &[u32], expert_logits: Vec<f64>) -> MoeForward {
        let mut pre = self.gate_b.clone();
        for &f in features {
            for (p, &w) in pre.iter_mut().zip(self.gate_w.row(f as usize)) {
                *p += w;
            }
        }
        self.finish(pre, expert_logits)
    }

    fn finish(&self, gate_pre: Vec<f64>, expert_logits: Vec<f64>) -> MoeForward {
        let gate: Vec<f64> = gate_pre.into_iter().map(sigmoid).collect();
        let mut logits = self.out_b.clone();
        for (e, (&g, &z)) in gate.iter().zip(&expert_logits).enumerate() {
            let u = g * z;
            if u == 0.0 {
                continue;
            }
            for (l, &w) in logits.iter_mut().zip(self.out_w.row(e)) {
                *l += u * w;
            }
        }
        let probs = softmax(&logits);
        MoeForward {
            gate,
            expert_logits,
            logits,
            probs,
        }
    }

    fn check_against(&self, set: &ExpertSet) -> Result<()> {
        let e = set.logit_width();
        if self.gate_w.shape() != (set.vocab_size(), e) || self.out_w.rows() != e {
            return Err(Error::Dimension {
                op: "moe_forward",
                expected: format!("gate {}x{e}", set.vocab_size()),
                got: format!("gate {}x{}", self.gate_w.rows(), self.gate_w.cols()),
            });
        }
        Ok(())
    }
}

fn expert_offsets(set: &ExpertSet) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(set.experts.len());
    let mut acc = 0;
    for e in &set.experts {
        offsets.push(acc);
        acc += e.n_outputs();
    }
    offsets
}

/// `g = sigmoid(x^T gate_w + gate_b)`, `logits = (g * z)^T out_w + out_b`.
pub fn moe_forward(moe: &MoeModel, set: &ExpertSet, x: &[f64]) -> Result<MoeForward> {
    moe.check_against(set)?;
    if x.len() != set.vocab_size() {
        return Err(Error::Dimension {
            op: "moe_forward",
            expected: format!("input of length {}", set.vocab_size()),
            got: format!("{}", x.len()),
        });
    }
    let mut z = Vec::with_capacity(set.logit_width());
    for e in &set.experts {
        z.extend(forward(e, x)?.logits);
    }
    let mut pre = moe.gate_b.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (p, &w) in pre.iter_mut().zip(moe.gate_w.row(i)) {
            *p += xi * w;
        }
    }
    Ok(moe.finish(pre, z))
}

/// Heldout example with its frozen expert logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeExample {
    pub features: Vec<u32>,
    pub expert_logits: Vec<f64>,
    pub origin: Origin,
}

impl Trainable for MoeModel {
    type Example = MoeExample;

    fn param_lengths(&self) -> Vec<usize> {
        vec![
            self.gate_w.as_slice().len(),
            self.gate_b.len(),
            self.out_w.as_slice().len(),
            self.out_b.len(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.gate_w.as_mut_slice(),
            &mut self.gate_b,
            self.out_w.as_mut_slice(),
            &mut self.out_b,
        ]
    }

    fn accumulate_gradient(&self, ex: &MoeExample, grads: &mut [Vec<f64>]) -> f64 {
        let f = self.forward_parts(&ex.features, ex.expert_logits.clone());
        let dlogits = logit_gradient(self.loss_mode, &f.probs, ex.origin).expect("validated origins");
        let loss = crate::openset::example_loss(self.loss_mode, &f.probs, ex.origin).expect("validated");
        let e_width = f.gate.len();
        let c = self.n_outputs();
        let mut da = vec![0.0; e_width];
        {
            let (head, tail) = grads.split_at_mut(2);
            let (gw_out, gb_out) = tail.split_at_mut(1);
            for e in 0..e_width {
                let g = f.gate[e];
                let z = f.expert_logits[e];
                let u = g * z;
                let wrow = self.out_w.row(e);
                let grow = &mut gw_out[0][e * c..(e + 1) * c];
                let mut du = 0.0;
                for k in 0..c {
                    grow[k] += u * dlogits[k];
                    du += wrow[k] * dlogits[k];
                }
                da[e] = du * z * g * (1.0 - g);
            }
            for (g, d) in gb_out[0].iter_mut().zip(&dlogits) {
                *g += d;
            }
            for (g, d) in head[1].iter_mut().zip(&da) {
                *g += d;
            }
            for &feat in &ex.features {
                let row = &mut head[0][feat as usize * e_width..(feat as usize + 1) * e_width];
                for (g, d) in row.iter_mut().zip(&da) {
                    *g += d;
                }
            }
        }
        loss
    }

    fn example_loss(&self, ex: &MoeExample) -> f64 {
        let f = self.forward_parts(&ex.features, ex.expert_logits.clone());
        crate::openset::example_loss(self.loss_mode, &f.probs, ex.origin).expect("validated")
    }
}

/// Every `MOE_VAL_STRIDE`-th heldout case of each disease is kept for early
/// stopping; the rest fit the head.
pub const MOE_VAL_STRIDE: usize = 5;

fn moe_examples(set: &ExpertSet, moe: &MoeModel, cases: &Dataset) -> Result<(Vec<MoeExample>, Vec<MoeExample>)> {
    let position: HashMap<u32, usize> = set.l_select.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for case in &cases.cases {
        if let Some(&f) = case.present_findings.iter().find(|&&f| f as usize >= set.vocab_size()) {
            return Err(Error::Domain(format!("finding {f} outside the shared vocabulary")));
        }
        let origin = match position.get(&case.disease_id) {
            Some(&i) => Origin::Select(i),
            None if moe.loss_mode.uses_extras() => Origin::Extra,
            None => continue,
        };
        let ordinal = seen.entry(case.disease_id).or_insert(0);
        let ex = MoeExample {
            features: case.present_findings.clone(),
            expert_logits: set.concat_logits(&case.present_findings),
            origin,
        };
        if *ordinal % MOE_VAL_STRIDE == MOE_VAL_STRIDE - 1 {
            val.push(ex);
        } else {
            train.push(ex);
        }
        *ordinal += 1;
    }
    Ok((train, val))
}

/// Fits a mixture-of-experts head on pooled heldout cases. CE heads ignore
/// extra cases; BG and EOS heads require them.
pub fn train_moe(
    set: &ExpertSet,
    pooled_heldout: &Dataset,
    head: LossMode,
    config: &TrainConfig,
) -> Result<(MoeModel, TrainHistory)> {
    config.validate()?;
    if pooled_heldout.vocab_size != set.vocab_size() {
        return Err(Error::Dimension {
            op: "train_moe",
            expected: format!("vocabulary {}", set.vocab_size()),
            got: format!("{}", pooled_heldout.vocab_size),
        });
    }
    let init = MoeModel::init(set, head);
    let (train, val) = moe_examples(set, &init, pooled_heldout)?;
    if head.uses_extras() && !train.iter().chain(&val).any(|e| e.origin == Origin::Extra) {
        return Err(Error::Domain(format!("{head} head needs extra cases in the pooled heldout set")));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Domain(format!(
            "pooled heldout set too small: {} train / {} validation examples",
            train.len(),
            val.len()
        )));
    }
    let (moe, history) = fit(init, &train, &val, config)?;
    if set.parameter_hashes() != moe.expert_hashes {
        return Err(Error::HashMismatch {
            what: "expert parameters".into(),
            expected: moe.expert_hashes.join(","),
            found: set.parameter_hashes().join(","),
        });
    }
    Ok((moe, history))
}

/// Anything that can score a case for open-set evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Model(&'a MlpModel),
    Naive(&'a ExpertSet),
    Moe { moe: &'a MoeModel, experts: &'a ExpertSet },
}

/// Scores of one case in a form shared by all scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    /// Probability per selected class, in `l_select` order.
    pub select_probs: Vec<f64>,
    /// Full output distribution; for naive ensembles the renormalised fused
    /// confidences.
    pub distribution: Vec<f64>,
    /// `None` when the scorer rejects the case outright.
    pub predicted: Option<u32>,
    pub confidence: f64,
}

fn score_from_probs(class_ids: &[OutputClass], probs: Vec<f64>) -> ScoreVector {
    let background = class_ids.iter().position(|c| *c == OutputClass::Background);
    let top = foreground_decision(&probs, background);
    let select_probs = probs
        .iter()
        .zip(class_ids)
        .filter(|(_, c)| **c != OutputClass::Background)
        .map(|(p, _)| *p)
        .collect();
    let (predicted, confidence) = match top {
        Some((i, c)) => match class_ids[i] {
            OutputClass::Disease(d) => (Some(d), c),
            OutputClass::Background => (None, 0.0),
        },
        None => (None, background.map_or(0.0, |b| probs[b])),
    };
    ScoreVector {
        select_probs,
        distribution: probs,
        predicted,
        confidence,
    }
}

impl Scorer<'_> {
    pub fn l_select(&self) -> Vec<u32> {
        match self {
            Scorer::Model(m) => m.foreground_ids(),
            Scorer::Naive(s) | Scorer::Moe { experts: s, .. } => s.l_select.clone(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Scorer::Model(m) => m.vocab_size(),
            Scorer::Naive(s) | Scorer::Moe { experts: s, .. } => s.vocab_size(),
        }
    }

    pub fn score(&self, features: &[u32]) -> ScoreVector {
        match self {
            Scorer::Model(m) => score_from_probs(&m.class_ids, forward_sparse(m, features).probs),
            Scorer::Moe { moe, experts } => {
                let f = moe.forward_parts(features, experts.concat_logits(features));
                score_from_probs(&moe.class_ids, f.probs)
            }
            Scorer::Naive(set) => {
                let fused = naive_predict_sparse(set, features);
                let total: f64 = fused.confidences.iter().sum();
                let distribution = fused.confidences.iter().map(|c| c / total).collect();
                let (predicted, confidence) = match fused.top() {
                    Some((i, c)) => (Some(set.l_select[i]), c),
                    None => (None, fused.nota_score),
                };
                ScoreVector {
                    select_probs: fused.confidences,
                    distribution,
                    predicted,
                    confidence,
                }
            }
        }
    }
}

/// Per-case `(confidence, predicted class, correct)` triples. Rejected cases
/// carry confidence 0 and no class.
pub fn ensemble_scores_for_eval(scorer: Scorer<'_>, dataset: &Dataset) -> Vec<(f64, Option<u32>, bool)> {
    dataset
        .cases
        .iter()
        .map(|c| {
            let s = scorer.score(&c.present_findings);
            match s.predicted {
                Some(p) => (s.confidence, Some(p), p == c.disease_id),
                None => (0.0, None, false),
            }
        })
        .collect()
}

/// Scored known and unknown test cases for one scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scored: Vec<ScoredExample>,
    /// `l_select`-ordered probabilities of known cases.
    pub known_probs: Vec<Vec<f64>>,
    pub known_labels: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
    pub is_known: Vec<bool>,
}

impl Evaluation {
    pub fn oscr(&self) -> Result<OscrCurve> {
        oscr_curve(&self.scored)
    }

    pub fn recall_at_k(&self, k: usize) -> Result<f64> {
        recall_at_k(&self.known_probs, &self.known_labels, k)
    }

    pub fn entropy_histogram(&self, n_bins: usize) -> Result<EntropyHistogram> {
        entropy_histogram(&self.distributions, &self.is_known, n_bins)
    }
}

pub fn evaluate(scorer: Scorer<'_>, known: &Dataset, unknown: &Dataset) -> Result<Evaluation> {
    let position: HashMap<u32, usize> = scorer.l_select().iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let mut out = Evaluation {
        scored: Vec::with_capacity(known.len() + unknown.len()),
        known_probs: Vec::with_capacity(known.len()),
        known_labels: Vec::with_capacity(known.len()),
        distributions: Vec::with_capacity(known.len() + unknown.len()),
        is_known: Vec::with_capacity(known.len() + unknown.len()),
    };
    for (ds, is_known) in [(known, true), (unknown, false)] {
        if ds.vocab_size != scorer.vocab_size() {
            return Err(Error::Dimension {
                op: "evaluate",
                expected: format!("vocabulary {}", scorer.vocab_size()),
                got: format!("{}", ds.vocab_size),
            });
        }
        for c in &ds.cases {
            let s = scorer.score(&c.present_findings);
            let origin = if is_known {
                let &label = position.get(&c.disease_id).ok_or(Error::UnknownLabel(c.disease_id))?;
                out.known_labels.push(label);
                out.known_probs.push(s.select_probs.clone());
                ScoreOrigin::Known(c.disease_id)
            } else {
                ScoreOrigin::Unknown
            };
            out.scored.push(ScoredExample {
                origin,
                predicted: s.predicted,
                confidence: s.confidence,
            });
            out.distributions.push(s.distribution);
            out.is_known.push(is_known);
        }
    }
    Ok(out)
}

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Naive,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRef {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MoeBlob {
    loss_mode: LossMode,
    class_ids: Vec<OutputClass>,
    vocab_size: usize,
    logit_width: usize,
    gate_w: String,
    gate_b: String,
    out_w: String,
    out_b: String,
    expert_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub schema_version: u32,
    pub kind: EnsembleKind,
    /// Table label such as `naive BG` or `EOS+BG`.
    pub combination: String,
    pub l_select: Vec<u32>,
    pub experts: Vec<ExpertRef>,
    moe: Option<MoeBlob>,
}

impl EnsembleManifest {
    pub fn new(combination: &str, l_select: &[u32], experts: Vec<ExpertRef>, moe: Option<&MoeModel>) -> Self {
        let blob = moe.map(|m| MoeBlob {
            loss_mode: m.loss_mode,
            class_ids: m.class_ids.clone(),
            vocab_size: m.gate_w.rows(),
            logit_width: m.gate_w.cols(),
            gate_w: encode_f64s(m.gate_w.as_slice()),
            gate_b: encode_f64s(&m.gate_b),
            out_w: encode_f64s(m.out_w.as_slice()),
            out_b: encode_f64s(&m.out_b),
            expert_hashes: m.expert_hashes.clone(),
        });
        EnsembleManifest {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            kind: if blob.is_some() { EnsembleKind::Moe } else { EnsembleKind::Naive },
            combination: combination.to_string(),
            l_select: l_select.to_vec(),
            experts,
            moe: blob,
        }
    }

    pub fn moe(&self) -> Result<Option<MoeModel>> {
        let Some(b) = &self.moe else { return Ok(None) };
        let (d, e, c) = (b.vocab_size, b.logit_width, b.class_ids.len());
        Ok(Some(MoeModel {
            gate_w: Matrix::from_vec(d, e, decode_f64s(&b.gate_w, d * e, "gate_w")?)?,
            gate_b: decode_f64s(&b.gate_b, e, "gate_b")?,
            out_w: Matrix::from_vec(e, c, decode_f64s(&b.out_w, e * c, "out_w")?)?,
            out_b: decode_f64s(&b.out_b, c, "out_b")?,
            loss_mode: b.loss_mode,
            class_ids: b.class_ids.clone(),
            expert_hashes: b.expert_hashes.clone(),
        }))
    }
}

pub fn save_ensemble(manifest: &EnsembleManifest, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct LoadedEnsemble {
    pub manifest: EnsembleManifest,
    pub experts: ExpertSet,
    pub moe: Option<MoeModel>,
}

impl LoadedEnsemble {
    pub fn scorer(&self) -> Scorer<'_> {
        match &self.moe {
            Some(moe) => Scorer::Moe {
                moe,
                experts: &self.experts,
            },
            None => Scorer::Naive(&self.experts),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest and its experts, checking every expert file hash.
pub fn load_ensemble(path: &Path) -> Result<LoadedEnsemble> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: EnsembleManifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != ENSEMBLE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            what: "ensemble",
            found: manifest.schema_version,
            expected: ENSEMBLE_SCHEMA_VERSION,
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut experts = Vec::with_capacity(manifest.experts.len());
    for r in &manifest.experts {
        let (model, _, hash) = load_model(&resolve(base, &r.path))?;
        if hash != r.sha256 {
            return Err(Error::HashMismatch {
                what: format!("expert {}", r.path),
                expected: r.sha256.clone(),
                found: hash,
            });
        }
        experts.push(model);
    }
    let experts = ExpertSet::new(experts, &manifest.l_select)?;
    let moe = manifest.moe()?;
    if let Some(m) = &moe {
        m.check_against(&experts)?;
        if m.expert_hashes != experts.parameter_hashes() {
            return Err(Error::HashMismatch {
                what: "ensemble expert parameters".into(),
                expected: m.expert_hashes.join(","),
                found: experts.parameter_hashes().join(","),
            });
        }
    }
    Ok(LoadedEnsemble {
        manifest,
        experts,
        moe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casesim::ClinicalCase;
    use crate::openset::{encode, predict_open_set};
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn expert(d: usize, classes: &[u32], mode: LossMode, s: u64) -> MlpModel {
        let mut m = MlpModel::init(d, 5, classes, mode, s).unwrap();
        let mut rng = seed::rng(s ^ 0x77);
        m.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.5));
        m.w2.as_mut_slice().iter_mut().for_each(|w| *w *= 3.0);
        m
    }

    fn random_x(d: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        (0..d).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn single_expert_naive_is_the_expert() {
        for mode in LossMode::ALL {
            for s in 0..30 {
                let e = expert(8, &[3, 5, 9], mode, s);
                let set = ExpertSet::new(vec![e.clone()], &[3, 5, 9]).unwrap();
                for t in 0..20 {
                    let x = random_x(8, s * 100 + t);
                    for theta in [0.0, 0.3, 0.5, 0.8, 1.0] {
                        assert_eq!(
                            naive_prediction(&set, &x, theta).unwrap().outcome,
                            predict_open_set(&e, &x, theta).unwrap().outcome
                        );
                    }
                    if mode != LossMode::Bg {
                        assert_eq!(naive_predict(&set, &x).unwrap().confidences, forward(&e, &x).unwrap().probs);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_confidence_is_max_over_carriers() {
        let a = expert(6, &[1, 2], LossMode::Ce, 1);
        let b = expert(6, &[2, 3], LossMode::Bg, 2);
        let c = expert(6, &[3, 1], LossMode::Bg, 3);
        let set = ExpertSet::new(vec![a.clone(), b.clone(), c.clone()], &[1, 2, 3]).unwrap();
        let x = random_x(6, 9);
        let pa = forward(&a, &x).unwrap().probs;
        let pb = forward(&b, &x).unwrap().probs;
        let pc = forward(&c, &x).unwrap().probs;
        let f = naive_predict(&set, &x).unwrap();
        assert_eq!(f.confidences, vec![pa[0].max(pc[1]), pa[1].max(pb[0]), pb[1].max(pc[0])]);
        assert_eq!(f.nota_score, (pb[2] + pc[2]) / 2.0);
        assert!(ExpertSet::new(vec![a.clone()], &[1, 2, 3]).is_err());
        assert!(ExpertSet::new(vec![a, expert(7, &[3], LossMode::Ce, 4)], &[1, 2, 3]).is_err());
    }

    #[test]
    fn naive_decision_examples() {
        let fused = FusedScore { confidences: vec![0.8, 0.1], nota_score: 0.0 };
        assert_eq!(fused.decide(&[4, 7], 0.5), Outcome::Class { disease: 4, confidence: 0.8 });
        assert_eq!(fused.decide(&[4, 7], 0.9), Outcome::Nota);
        let bg = FusedScore { confidences: vec![0.3, 0.1], nota_score: (0.6 + 0.2) / 2.0 };
        assert!((bg.nota_score - 0.4).abs() < 1e-15);
        assert_eq!(bg.decide(&[4, 7], 0.0), Outcome::Nota);
    }

    fn naive_moe_logits(moe: &MoeModel, set: &ExpertSet, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = set.experts.iter().flat_map(|e| forward(e, x).unwrap().logits).collect();
        let e_width = z.len();
        let mut logits = moe.out_b.clone();
        for e in 0..e_width {
            let mut a = moe.gate_b[e];
            for (i, &xi) in x.iter().enumerate() {
                a += xi * moe.gate_w[(i, e)];
            }
            let g = 1.0 / (1.0 + (-a).exp());
            for c in 0..logits.len() {
                logits[c] += g * z[e] * moe.out_w[(e, c)];
            }
        }
        logits
    }

    fn random_moe(set: &ExpertSet, head: LossMode, s: u64) -> MoeModel {
        let mut m = MoeModel::init(set, head);
        let mut rng = seed::rng(s);
        for p in m.params_mut() {
            p.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn moe_forward_examples() {
        let e = expert(6, &[1, 2, 3], LossMode::Ce, 5);
        let set = ExpertSet::new(vec![e.clone()], &[1, 2, 3]).unwrap();
        let x = random_x(6, 2);

        let mut open = MoeModel::init(&set, LossMode::Ce);
        open.gate_b.iter_mut().for_each(|b| *b = 40.0);
        open.out_w = Matrix::identity(3);
        let f = moe_forward(&open, &set, &x).unwrap();
        let expert_logits = forward(&e, &x).unwrap().logits;
        for (a, b) in f.logits.iter().zip(&expert_logits) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut closed = random_moe(&set, LossMode::Ce, 3);
        closed.gate_w.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        closed.gate_b.iter_mut().for_each(|b| *b = -1e4);
        assert_eq!(moe_forward(&closed, &set, &x).unwrap().logits, closed.out_b);

        let set2 = ExpertSet::new(vec![e, expert(6, &[2, 3, 4], LossMode::Bg, 8)], &[1, 2, 3, 4]).unwrap();
        for head in LossMode::ALL {
            let m = random_moe(&set2, head, 11);
            let got = moe_forward(&m, &set2, &x).unwrap().logits;
            let want = naive_moe_logits(&m, &set2, &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert_eq!(got.len(), if head == LossMode::Bg { 5 } else { 4 });
        }
    }

    #[test]
    fn init_head_averages_expert_logits() {
        let a = expert(6, &[1, 2], LossMode::Eos, 1);
        let b = expert(6, &[2, 3], LossMode::Eos, 2);
        let set = ExpertSet::new(vec![a.clone(), b.clone()], &[1, 2, 3]).unwrap();
        let x = random_x(6, 4);
        let m = MoeModel::init(&set, LossMode::Ce);
        let za = forward(&a, &x).unwrap().logits;
        let zb = forward(&b, &x).unwrap().logits;
        let want = [za[0], (za[1] + zb[0]) / 2.0, zb[1]];
        let got = moe_forward(&m, &set, &x).unwrap().logits;
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_gradients_match_finite_differences() {
        let set = ExpertSet::new(
            vec![expert(5, &[1, 2], LossMode::Bg, 1), expert(5, &[2, 3], LossMode::Eos, 2)],
            &[1, 2, 3],
        )
        .unwrap();
        for head in LossMode::ALL {
            for s in 0..10 {
                let m = random_moe(&set, head, s);
                let mut rng = seed::rng(s + 50);
                let features: Vec<u32> = (0..5).filter(|_| rng.gen_bool(0.5)).collect();
                let origin = if head != LossMode::Ce && s % 2 == 0 { Origin::Extra } else { Origin::Select((s % 3) as usize) };
                let ex = MoeExample { features: features.clone(), expert_logits: set.concat_logits(&features), origin };
                let mut grads: Vec<Vec<f64>> = m.param_lengths().iter().map(|&n| vec![0.0; n]).collect();
                m.accumulate_gradient(&ex, &mut grads);
                let h = 1e-5;
                for g in 0..grads.len() {
                    for i in 0..grads[g].len() {
                        let (mut p, mut q) = (m.clone(), m.clone());
                        p.params_mut()[g][i] += h;
                        q.params_mut()[g][i] -= h;
                        let num = (p.example_loss(&ex) - q.example_loss(&ex)) / (2.0 * h);
                        let a = grads[g][i];
                        assert!((a - num).abs() <= 1e-6 + 1e-4 * a.abs().max(num.abs()), "{head} {g}/{i}: {a} vs {num}");
                    }
                }
            }
        }
    }

    fn toy_cases(classes: &[u32], per: usize, d: usize, s: u64) -> Dataset {
        let mut rng = seed::rng(s);
        let mut cases = Vec::new();
        for &c in classes {
            for _ in 0..per {
                let base = (c as usize * 2) % d;
                let mut x = vec![base as u32, ((base + 1) % d) as u32, rng.gen_range(0..d as u32)];
                x.sort_unstable();
                x.dedup();
                cases.push(ClinicalCase { disease_id: c, present_findings: x });
            }
        }
        Dataset { cases, vocab_size: d, label_space: classes.iter().copied().collect() }
    }

    #[test]
    fn train_moe_freezes_experts_and_respects_head_contracts() {
        let set = ExpertSet::new(
            vec![expert(12, &[0, 1, 2], LossMode::Eos, 1), expert(12, &[1, 2, 3], LossMode::Eos, 2)],
            &[0, 1, 2, 3],
        )
        .unwrap();
        let before = set.parameter_hashes();
        let heldout = toy_cases(&[0, 1, 2, 3, 4, 5], 10, 12, 3);
        let config = TrainConfig { max_epochs: 5, patience: 0, batch_size: 8, ..TrainConfig::default() };
        let (m, h) = train_moe(&set, &heldout, LossMode::Bg, &config).unwrap();
        assert_eq!(h.epochs.len(), 1);
        assert_eq!(m.n_outputs(), 5);
        assert_eq!(set.parameter_hashes(), before);

        let no_extras = toy_cases(&[0, 1, 2, 3], 10, 12, 3);
        assert!(train_moe(&set, &no_extras, LossMode::Eos, &config).is_err());
        assert!(train_moe(&set, &no_extras, LossMode::Ce, &config).is_ok());
    }

    #[test]
    fn hand_built_triples() {
        // One CE expert with a decisive logit layer: class = finding parity.
        let mut m = MlpModel::init(2, 1, &[10, 20], LossMode::Ce, 0).unwrap();
        m.w1 = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        m.b1 = vec![0.0];
        m.w2 = Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let inputs: [(&[u32], u32); 10] = [
            (&[], 10),
            (&[0], 10),
            (&[1], 20),
            (&[0, 1], 20),
            (&[0], 20),
            (&[1], 10),
            (&[], 20),
            (&[0, 1], 10),
            (&[1], 20),
            (&[0], 10),
        ];
        let cases = inputs
            .iter()
            .map(|(f, d)| ClinicalCase { disease_id: *d, present_findings: f.to_vec() })
            .collect();
        let ds = Dataset { cases, vocab_size: 2, label_space: [10, 20].into() };
        let triples = ensemble_scores_for_eval(Scorer::Model(&m), &ds);
        let s = |l: f64| 1.0 / (1.0 + (-l).exp());
        // logit difference (class 20 minus class 10) is 2h with h = x0 + 2 x1.
        let expected: [(f64, u32, bool); 10] = [
            (0.5, 10, true),
            (s(2.0), 20, false),
            (s(4.0), 20, true),
            (s(6.0), 20, true),
            (s(2.0), 20, true),
            (s(4.0), 20, false),
            (0.5, 10, false),
            (s(6.0), 20, false),
            (s(4.0), 20, true),
            (s(2.0), 20, false),
        ];
        for (got, want) in triples.iter().zip(expected) {
            assert!((got.0 - want.0).abs() < 1e-15);
            assert_eq!((got.1, got.2), (Some(want.1), want.2));
        }
    }

    #[test]
    fn evaluation_extremes() {
        let d = 8;
        let mut m = MlpModel::init(d, 4, &[0, 1], LossMode::Bg, 0).unwrap();
        // All-NOTA scorer: background logit dominates.
        m.w1.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        m.b1 = vec![1.0; 4];
        m.w2 = Matrix::from_rows(&vec![vec![0.0, 0.0, 5.0]; 4]).unwrap();
        let known = Dataset {
            cases: [(0, vec![0, 1]), (1, vec![2, 3]), (0, vec![0, 5]), (1, vec![2, 6])]
                .into_iter()
                .map(|(disease_id, present_findings)| ClinicalCase { disease_id, present_findings })
                .collect(),
            vocab_size: d,
            label_space: [0, 1].into(),
        };
        let unknown = toy_cases(&[2], 5, d, 2);
        let ev = evaluate(Scorer::Model(&m), &known, &unknown).unwrap();
        let c = ev.oscr().unwrap();
        assert!(c.points.iter().all(|p| p.ccr == 0.0 && p.fpr == 0.0));

        // Perfect classifier on known data: class from finding 0 vs 2.
        let mut p = MlpModel::init(d, 2, &[0, 1], LossMode::Ce, 0).unwrap();
        p.w1 = Matrix::zeros(d, 2);
        p.w1[(0, 0)] = 10.0;
        p.w1[(2, 1)] = 10.0;
        p.b1 = vec![0.0; 2];
        p.w2 = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let ev = evaluate(Scorer::Model(&p), &known, &unknown).unwrap();
        assert_eq!(ev.oscr().unwrap().points[0].ccr, 1.0);
        assert_eq!(ev.recall_at_k(1).unwrap(), 1.0);
    }

    #[test]
    fn manifest_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let a = expert(6, &[1, 2], LossMode::Eos, 1);
        let b = expert(6, &[2, 3], LossMode::Eos, 2);
        let mut refs = Vec::new();
        for (i, m) in [&a, &b].iter().enumerate() {
            let name = format!("site{i}.json");
            let hash = crate::openset::save_model(m, &Default::default(), &dir.path().join(&name)).unwrap();
            refs.push(ExpertRef { path: name, sha256: hash });
        }
        let set = ExpertSet::new(vec![a, b], &[1, 2, 3]).unwrap();
        let moe = random_moe(&set, LossMode::Bg, 4);
        let moe = MoeModel { expert_hashes: set.parameter_hashes(), ..moe };
        let manifest = EnsembleManifest::new("EOS+BG", &set.l_select, refs, Some(&moe));
        let path = dir.path().join("ensemble.json");
        save_ensemble(&manifest, &path).unwrap();
        let loaded = load_ensemble(&path).unwrap();
        assert_eq!(loaded.moe.as_ref(), Some(&moe));
        assert_eq!(loaded.manifest.kind, EnsembleKind::Moe);

        let other = expert(6, &[1, 2], LossMode::Eos, 9);
        crate::openset::save_model(&other, &Default::default(), &dir.path().join("site0.json")).unwrap();
        assert!(matches!(load_ensemble(&path), Err(Error::HashMismatch { .. })));
    }

    proptest! {
        #[test]
        fn moe_output_width_is_fixed(n_experts in 1usize..5, head_idx in 0usize..3, s in any::<u64>()) {
            let head = LossMode::ALL[head_idx];
            let experts: Vec<MlpModel> = (0..n_experts)
                .map(|i| {
                    let classes: &[u32] = if i == 0 { &[0, 1, 2] } else { &[1, 2] };
                    expert(6, classes, LossMode::ALL[i % 3], s.wrapping_add(i as u64))
                })
                .collect();
            let set = ExpertSet::new(experts, &[0, 1, 2]).unwrap();
            let m = MoeModel::init(&set, head);
            let f = moe_forward(&m, &set, &random_x(6, s)).unwrap();
            prop_assert_eq!(f.probs.len(), if head == LossMode::Bg { 4 } else { 3 });
        }

        #[test]
        fn naive_confidence_equals_two_expert_max(s in any::<u64>()) {
            let a = expert(6, &[0, 1], LossMode::Ce, s);
            let b = expert(6, &[0, 1], LossMode::Eos, s ^ 1);
            let set = ExpertSet::new(vec![a.clone(), b.clone()], &[0, 1]).unwrap();
            let x = random_x(6, s);
            let pa = forward(&a, &x).unwrap().probs;
            let pb = forward(&b, &x).unwrap().probs;
            let f = naive_predict(&set, &x).unwrap();
            prop_assert_eq!(f.confidences, vec![pa[0].max(pb[0]), pa[1].max(pb[1])]);
        }
    }

    #[test]
    fn encode_round_trip_matches_sparse_scoring() {
        let e = expert(7, &[0, 1, 2], LossMode::Bg, 3);
        let set = ExpertSet::new(vec![e], &[0, 1, 2]).unwrap();
        let case = ClinicalCase { disease_id: 0, present_findings: vec![1, 4, 6] };
        let dense = naive_predict(&set, &encode(&case, 7).unwrap()).unwrap();
        assert_eq!(dense, naive_predict_sparse(&set, &case.present_findings));
    }
}
