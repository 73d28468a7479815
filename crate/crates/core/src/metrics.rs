//! Open-set evaluation: OSCR curves, CCR at a target FPR, closed-set
//! recall@k, softmax-entropy histograms and replicate summaries.
//!
//! All threshold comparisons are strict (`confidence > theta`), so an example
//! whose confidence equals the threshold counts as rejected.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreOrigin {
    Known(u32),
    Unknown,
}

/// One test example as seen by the OSCR sweep. `predicted = None` means the
/// classifier rejected it outright (e.g. a background argmax); such examples
/// are never accepted at any threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub origin: ScoreOrigin,
    pub predicted: Option<u32>,
    pub confidence: f64,
}

impl ScoredExample {
    /// Confidence used by the sweep; 0 for outright rejections.
    pub fn effective_confidence(&self) -> f64 {
        if self.predicted.is_some() {
            self.confidence
        } else {
            0.0
        }
    }

    pub fn is_correct(&self) -> bool {
        matches!((self.origin, self.predicted), (ScoreOrigin::Known(t), Some(p)) if t == p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscrPoint {
    pub theta: f64,
    pub fpr: f64,
    pub ccr: f64,
    /// Examples (known and unknown) with confidence above `theta`.
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscrCurve {
    /// Sorted by `theta` ascending.
    pub points: Vec<OscrPoint>,
    pub n_known: usize,
    pub n_unknown: usize,
}

/// Number of entries in ascending `sorted` strictly greater than `theta`.
fn count_above(sorted: &[f64], theta: f64) -> usize {
    sorted.len() - sorted.partition_point(|&c| c <= theta)
}

/// FPR and CCR at every distinct effective confidence plus 0 and 1.
pub fn oscr_curve(scored: &[ScoredExample]) -> Result<OscrCurve> {
    let mut unknown = Vec::new();
    let mut correct = Vec::new();
    let mut n_known = 0;
    for s in scored {
        let c = s.effective_confidence();
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        match s.origin {
            ScoreOrigin::Unknown => unknown.push(c),
            ScoreOrigin::Known(_) => {
                n_known += 1;
                if s.is_correct() {
                    correct.push(c);
                }
            }
        }
    }
    if n_known == 0 || unknown.is_empty() {
        return Err(Error::Domain(
            "OSCR needs at least one known and one unknown example".into(),
        ));
    }
    let mut all: Vec<f64> = scored.iter().map(ScoredExample::effective_confidence).collect();
    unknown.sort_by(f64::total_cmp);
    correct.sort_by(f64::total_cmp);
    all.sort_by(f64::total_cmp);

    let mut thetas = all.clone();
    thetas.push(0.0);
    thetas.push(1.0);
    thetas.sort_by(f64::total_cmp);
    thetas.dedup();

    let n_unknown = unknown.len();
    let points = thetas
        .into_iter()
        .map(|theta| OscrPoint {
            theta,
            fpr: count_above(&unknown, theta) as f64 / n_unknown as f64,
            ccr: count_above(&correct, theta) as f64 / n_known as f64,
            accepted: count_above(&all, theta),
        })
        .collect();
    Ok(OscrCurve {
        points,
        n_known,
        n_unknown,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CcrAtFpr {
    Reached { ccr: f64, theta: f64, fpr: f64 },
    Unreachable,
}

impl CcrAtFpr {
    pub fn ccr(&self) -> Option<f64> {
        match self {
            CcrAtFpr::Reached { ccr, .. } => Some(*ccr),
            CcrAtFpr::Unreachable => None,
        }
    }
}

/// CCR at the most permissive operating point whose FPR does not exceed
/// `target`. Only points that accept at least one example are operating
/// points; a curve whose every such point has FPR above `target` is
/// [`CcrAtFpr::Unreachable`].
pub fn ccr_at_fpr(curve: &OscrCurve, target: f64) -> CcrAtFpr {
    curve
        .points
        .iter()
        .find(|p| p.accepted > 0 && p.fpr <= target)
        .map_or(CcrAtFpr::Unreachable, |p| CcrAtFpr::Reached {
            ccr: p.ccr,
            theta: p.theta,
            fpr: p.fpr,
        })
}

/// Fraction of cases whose true class ranks among the `k` most probable.
/// Ties rank the lower class index first.
pub fn recall_at_k(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension {
            op: "recall_at_k",
            expected: format!("{} labels", probs.len()),
            got: format!("{}", labels.len()),
        });
    }
    if probs.is_empty() {
        return Err(Error::Domain("recall@k of an empty set".into()));
    }
    let mut hits = 0;
    for (p, &label) in probs.iter().zip(labels) {
        if k == 0 || k > p.len() {
            return Err(Error::Domain(format!("k = {k} outside 1..={}", p.len())));
        }
        let target = *p
            .get(label)
            .ok_or_else(|| Error::Domain(format!("label {label} outside {} classes", p.len())))?;
        let rank = p
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub known: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub bins: Vec<HistogramBin>,
    pub n_classes: usize,
}

pub const DEFAULT_ENTROPY_BINS: usize = 50;

/// Bin index of entropy `h` among `n_bins` equal bins on `[0, max]`.
pub fn entropy_bin(h: f64, max: f64, n_bins: usize) -> usize {
    if max <= 0.0 {
        return 0;
    }
    (((h / max) * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1)
}

/// Softmax-entropy histogram on `[0, ln C]` split by origin.
pub fn entropy_histogram(probs: &[Vec<f64>], is_known: &[bool], n_bins: usize) -> Result<EntropyHistogram> {
    if probs.len() != is_known.len() {
        return Err(Error::Dimension {
            op: "entropy_histogram",
            expected: format!("{} origin tags", probs.len()),
            got: format!("{}", is_known.len()),
        });
    }
    if n_bins == 0 {
        return Err(Error::config("n_bins", "must be at least 1"));
    }
    let n_classes = probs.first().map_or(1, Vec::len);
    let max = (n_classes as f64).ln();
    let width = max / n_bins as f64;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|b| HistogramBin {
            low: b as f64 * width,
            high: (b + 1) as f64 * width,
            known: 0,
            unknown: 0,
        })
        .collect();
    for (p, &known) in probs.iter().zip(is_known) {
        if p.len() != n_classes {
            return Err(Error::Dimension {
                op: "entropy_histogram",
                expected: format!("{n_classes} classes"),
                got: format!("{}", p.len()),
            });
        }
        let bin = &mut bins[entropy_bin(entropy(p)?, max, n_bins)];
        if known {
            bin.known += 1;
        } else {
            bin.unknown += 1;
        }
    }
    Ok(EntropyHistogram { bins, n_classes })
}

/// Mean and sample (n - 1) standard deviation; std is 0 for one value.
pub fn replicate_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Domain("no replicate values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// One row of a summary table. `None` renders as `---`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl SummaryRow {
    /// Summarises replicate values; any missing replicate makes the row `---`.
    pub fn from_replicates(algorithm: &str, metric: &str, values: &[Option<f64>]) -> Result<Self> {
        let present: Option<Vec<f64>> = values.iter().copied().collect();
        let (mean, std) = match present {
            Some(v) => {
                let (m, s) = replicate_summary(&v)?;
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        Ok(SummaryRow {
            algorithm: algorithm.to_string(),
            metric: metric.to_string(),
            mean,
            std,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "---".to_string(), |x| format!("{x:.4}"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("algorithm,metric,mean,std\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.algorithm, r.metric, cell(r.mean), cell(r.std));
    }
    out
}

pub fn oscr_csv(curve: &OscrCurve) -> String {
    let mut out = String::from("theta,fpr,ccr\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.theta, p.fpr, p.ccr);
    }
    out
}

pub fn histogram_csv(hist: &EntropyHistogram) -> String {
    let mut out = String::from("bin_low,bin_high,known_count,unknown_count\n");
    for b in &hist.bins {
        let _ = writeln!(out, "{},{},{},{}", b.low, b.high, b.known, b.unknown);
    }
    out
}
