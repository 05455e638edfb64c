//! Rouge-L and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of a longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level Rouge-L with β = 1.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_length(&c, &r) as f64;
    let precision = lcs / c.len() as f64;
    let recall = lcs / r.len() as f64;
    RougeScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Confusion counts with label 1 (faithful) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent in regression mode, as are the rates below.
    pub confusion: Option<Confusion>,
    pub accuracy: Option<f64>,
    /// Mean of the two per-class F1 scores; the headline F1.
    pub macro_f1: Option<f64>,
    pub positive_f1: Option<f64>,
    pub positive_recall: Option<f64>,
    pub rmse: Option<f64>,
    pub per_sample_inference_seconds: f64,
    pub n: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{a} predictions against {b} gold values"
        )));
    }
    if a == 0 {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    Ok(())
}

pub fn confusion(predictions: &[u8], golds: &[u8]) -> Result<Confusion> {
    check_lengths(predictions.len(), golds.len())?;
    let mut c = Confusion::default();
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::invalid(format!(
                    "labels must be 0 or 1, got prediction {p} / gold {g}"
                )))
            }
        }
    }
    Ok(c)
}

/// F1 of one class given its true positives, false positives and false
/// negatives; a class with no support and no predictions scores 0.
fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn classification_report(
    predictions: &[u8],
    golds: &[u8],
    timing_seconds: f64,
) -> Result<EvalReport> {
    let c = confusion(predictions, golds)?;
    let n = c.total();
    let positive_f1 = class_f1(c.tp, c.fp, c.fn_);
    let negative_f1 = class_f1(c.tn, c.fn_, c.fp);
    let positive_recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    Ok(EvalReport {
        confusion: Some(c),
        accuracy: Some((c.tp + c.tn) as f64 / n as f64),
        macro_f1: Some((positive_f1 + negative_f1) / 2.0),
        positive_f1: Some(positive_f1),
        positive_recall: Some(positive_recall),
        rmse: None,
        per_sample_inference_seconds: timing_seconds / n as f64,
        n,
    })
}

pub fn rmse(predictions: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    let sq: f64 = predictions
        .iter()
        .zip(golds)
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

pub fn regression_report(
    predictions: &[f64],
    golds: &[f64],
    timing_seconds: f64,
) -> Result<EvalReport> {
    let r = rmse(predictions, golds)?;
    let n = predictions.len();
    Ok(EvalReport {
        confusion: None,
        accuracy: None,
        macro_f1: None,
        positive_f1: None,
        positive_recall: None,
        rmse: Some(r),
        per_sample_inference_seconds: timing_seconds / n as f64,
        n,
    })
}
