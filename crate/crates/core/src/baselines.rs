//! Query-only baselines: a perplexity threshold and yes/no prompt verdicts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// `ppl <= threshold` predicts faithful (1).
    LowPplMeansFaithful,
    /// `ppl >= threshold` predicts faithful (1).
    HighPplMeansFaithful,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    pub polarity: Polarity,
    pub train_accuracy: f64,
    /// The single class seen in training, when there was only one. Such a
    /// model predicts that class for every input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate_class: Option<u8>,
}

impl ThresholdModel {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_class.is_some()
    }

    pub fn predict(&self, ppl: f64) -> u8 {
        if let Some(c) = self.degenerate_class {
            return c;
        }
        let faithful = match self.polarity {
            Polarity::LowPplMeansFaithful => ppl <= self.threshold,
            Polarity::HighPplMeansFaithful => ppl >= self.threshold,
        };
        u8::from(faithful)
    }
}

/// Searches every midpoint between consecutive distinct training values,
/// plus one cut below and one above all of them, under both polarities, and
/// keeps the most accurate. Ties go to the lower threshold, then to
/// [`Polarity::LowPplMeansFaithful`].
///
/// The outer cuts sit at half the smallest and twice the largest value so the
/// threshold stays finite and positive and scales with the data.
pub fn fit_ppl_threshold(ppl: &[f64], labels: &[u8]) -> Result<ThresholdModel> {
    if ppl.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} ppl values against {} labels",
            ppl.len(),
            labels.len()
        )));
    }
    if ppl.len() < 2 {
        return Err(Error::invalid("a ppl threshold needs at least two training samples"));
    }
    if let Some(p) = ppl.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::invalid(format!("ppl values must be positive, got {p}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("labels must be 0 or 1, got {l}")));
    }

    let mut order: Vec<usize> = (0..ppl.len()).collect();
    order.sort_by(|&a, &b| ppl[a].total_cmp(&ppl[b]));
    let n = ppl.len();
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    let total_neg = n - total_pos;

    // Sweep cuts in ascending order. `pos_le`/`neg_le` count samples at or
    // below the current cut.
    let mut best: Option<(usize, f64, Polarity)> = None;
    let mut consider = |correct: usize, t: f64, pol: Polarity| {
        if best.is_none_or(|(c, _, _)| correct > c) {
            best = Some((correct, t, pol));
        }
    };
    let (mut pos_le, mut neg_le) = (0usize, 0usize);
    let lowest = ppl[order[0]] / 2.0;
    let low_correct = |p: usize, q: usize| p + (total_neg - q);
    let high_correct = |p: usize, q: usize| (total_pos - p) + q;
    consider(low_correct(0, 0), lowest, Polarity::LowPplMeansFaithful);
    consider(high_correct(0, 0), lowest, Polarity::HighPplMeansFaithful);
    let mut i = 0;
    while i < n {
        let v = ppl[order[i]];
        while i < n && ppl[order[i]] == v {
            if labels[order[i]] == 1 {
                pos_le += 1;
            } else {
                neg_le += 1;
            }
            i += 1;
        }
        let t = if i < n {
            (v + ppl[order[i]]) / 2.0
        } else {
            v * 2.0
        };
        consider(low_correct(pos_le, neg_le), t, Polarity::LowPplMeansFaithful);
        consider(high_correct(pos_le, neg_le), t, Polarity::HighPplMeansFaithful);
    }
    let (correct, threshold, polarity) = best.expect("at least one candidate");
    Ok(ThresholdModel {
        threshold,
        polarity,
        train_accuracy: correct as f64 / n as f64,
        degenerate_class: match (total_pos, total_neg) {
            (_, 0) => Some(1),
            (0, _) => Some(0),
            _ => None,
        },
    })
}

pub fn apply_threshold(model: &ThresholdModel, ppl: &[f64]) -> Vec<u8> {
    ppl.iter().map(|&p| model.predict(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVerdicts {
    pub predictions: Vec<u8>,
    pub unparseable: usize,
}

/// Reads the first alphabetic token of each reply: "yes" → 1, "no" → 0.
/// Anything else counts as unparseable and defaults to 1, the overconfident
/// answer such prompts tend to produce.
pub fn parse_prompt_verdicts<S: AsRef<str>>(replies: &[S]) -> PromptVerdicts {
    let mut unparseable = 0;
    let predictions = replies
        .iter()
        .map(|r| {
            let token = r
                .as_ref()
                .split(|c: char| !c.is_alphabetic())
                .find(|t| !t.is_empty())
                .map(str::to_lowercase);
            match token.as_deref() {
                Some("yes") => 1,
                Some("no") => 0,
                _ => {
                    unparseable += 1;
                    1
                }
            }
        })
        .collect();
    PromptVerdicts {
        predictions,
        unparseable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separable_fit() {
        let m = fit_ppl_threshold(&[1.0, 2.0, 10.0, 11.0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(m.threshold, 6.0);
        assert_eq!(m.polarity, Polarity::LowPplMeansFaithful);
        assert_eq!(m.train_accuracy, 1.0);
        assert!(!m.is_degenerate());
        assert_eq!(apply_threshold(&m, &[2.0, 100.0]), vec![1, 0]);
        assert!(apply_threshold(&m, &[]).is_empty());
    }

    #[test]
    fn all_faithful_is_degenerate() {
        let m = fit_ppl_threshold(&[3.0, 1.0, 2.0], &[1, 1, 1]).unwrap();
        assert_eq!(m.degenerate_class, Some(1));
        assert_eq!(m.train_accuracy, 1.0);
        assert_eq!(apply_threshold(&m, &[0.1, 2.5, 1e9]), vec![1, 1, 1]);
    }

    #[test]
    fn reversed_polarity_is_found() {
        let m = fit_ppl_threshold(&[1.0, 2.0, 10.0, 11.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.polarity, Polarity::HighPplMeansFaithful);
        assert_eq!(m.threshold, 6.0);
        assert_eq!(m.train_accuracy, 1.0);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_ppl_threshold(&[1.0], &[1]).is_err());
        assert!(fit_ppl_threshold(&[1.0, -2.0], &[1, 0]).is_err());
        assert!(fit_ppl_threshold(&[1.0, 2.0], &[1]).is_err());
    }

    #[test]
    fn json_shape() {
        let m = fit_ppl_threshold(&[1.0, 2.0, 10.0, 11.0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"threshold":6.0,"polarity":"low_ppl_means_faithful","train_accuracy":1.0}"#
        );
    }

    #[test]
    fn verdict_examples() {
        let v = parse_prompt_verdicts(&["Yes", "no, I cannot.", "As an AI model...", "  NO.", "yes!"]);
        assert_eq!(v.predictions, vec![1, 0, 1, 0, 1]);
        assert_eq!(v.unparseable, 1);
        assert_eq!(parse_prompt_verdicts(&[""]).unparseable, 1);
        assert_eq!(parse_prompt_verdicts(&["1. yes"]).predictions, vec![1]);
        assert_eq!(parse_prompt_verdicts(&["nope"]).unparseable, 1);
    }

    proptest! {
        #[test]
        fn accuracy_at_least_class_prior(
            data in prop::collection::vec((1u32..40, 0u8..2), 2..40)
        ) {
            let (ppl, labels): (Vec<f64>, Vec<u8>) =
                data.into_iter().map(|(p, l)| (f64::from(p), l)).unzip();
            let m = fit_ppl_threshold(&ppl, &labels).unwrap();
            let pos = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
            prop_assert!(m.train_accuracy >= pos.max(1.0 - pos) - 1e-12);
            let preds = apply_threshold(&m, &ppl);
            let acc = preds.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
            prop_assert_eq!(acc, m.train_accuracy);
        }

        #[test]
        fn scaling_ppl_keeps_predictions(
            data in prop::collection::vec((1u32..40, 0u8..2), 2..40),
            scale in 0.01f64..100.0,
        ) {
            let (ppl, labels): (Vec<f64>, Vec<u8>) =
                data.into_iter().map(|(p, l)| (f64::from(p), l)).unzip();
            let scaled: Vec<f64> = ppl.iter().map(|p| p * scale).collect();
            let a = fit_ppl_threshold(&ppl, &labels).unwrap();
            let b = fit_ppl_threshold(&scaled, &labels).unwrap();
            prop_assert_eq!(apply_threshold(&a, &ppl), apply_threshold(&b, &scaled));
            prop_assert_eq!(a.polarity, b.polarity);
        }
    }
}
