//! Turning metric scores into hallucination labels and regression targets.
//!
//! A response is labeled faithful (1) when NLI's verdict is entailment and
//! both Rouge-L and QuestEval lie strictly above their medians; hallucinated
//! (0) when the verdict is neutral or contradiction and both lie strictly
//! below. Everything else, ties with a median included, is discarded.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ManifestEntry;

/// Group key used when medians are pooled over all tasks.
pub const GLOBAL_GROUP: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerTask,
    Global,
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_task" => Ok(Grouping::PerTask),
            "global" => Ok(Grouping::Global),
            _ => Err(Error::invalid(format!(
                "grouping must be per_task or global, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMedians {
    pub rouge_l: f64,
    pub questeval: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianTable {
    pub grouping: Grouping,
    pub groups: BTreeMap<String, GroupMedians>,
}

impl MedianTable {
    fn key<'a>(&self, entry: &'a ManifestEntry) -> &'a str {
        match self.grouping {
            Grouping::PerTask => &entry.task,
            Grouping::Global => GLOBAL_GROUP,
        }
    }

    pub fn for_entry(&self, entry: &ManifestEntry) -> Result<&GroupMedians> {
        let key = self.key(entry);
        self.groups
            .get(key)
            .ok_or_else(|| Error::invalid(format!("no medians for group {key:?}")))
    }
}

/// Exact median; even counts average the two central order statistics.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

fn require(entry: &ManifestEntry, field: &'static str, v: Option<f64>) -> Result<f64> {
    v.ok_or(Error::MissingField {
        record_id: entry.record_id,
        field,
    })
}

pub fn compute_medians(entries: &[ManifestEntry], grouping: Grouping) -> Result<MedianTable> {
    let mut pools: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in entries {
        let r = require(e, "rouge_l", e.rouge_l)?;
        let q = require(e, "questeval", e.questeval)?;
        let key = match grouping {
            Grouping::PerTask => e.task.clone(),
            Grouping::Global => GLOBAL_GROUP.to_string(),
        };
        let pool = pools.entry(key).or_default();
        pool.0.push(r);
        pool.1.push(q);
    }
    let groups = pools
        .into_iter()
        .map(|(k, (mut r, mut q))| {
            let count = r.len();
            let m = GroupMedians {
                rouge_l: median(&mut r).expect("non-empty pool"),
                questeval: median(&mut q).expect("non-empty pool"),
                count,
            };
            (k, m)
        })
        .collect();
    Ok(MedianTable { grouping, groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NliVerdict {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliVerdict {
    /// Entailment only when its probability is strictly the largest.
    pub fn from_probs(entail: f64, neutral: f64, contra: f64) -> Self {
        if entail > neutral && entail > contra {
            NliVerdict::Entailment
        } else if contra > neutral {
            NliVerdict::Contradiction
        } else {
            NliVerdict::Neutral
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutcome {
    Faithful,
    Hallucinated,
    Discarded,
}

impl LabelOutcome {
    pub fn label(&self) -> Option<u8> {
        match self {
            LabelOutcome::Faithful => Some(1),
            LabelOutcome::Hallucinated => Some(0),
            LabelOutcome::Discarded => None,
        }
    }
}

pub fn label_rule(verdict: NliVerdict, rouge_l: f64, questeval: f64, med: &GroupMedians) -> LabelOutcome {
    let above = rouge_l > med.rouge_l && questeval > med.questeval;
    let below = rouge_l < med.rouge_l && questeval < med.questeval;
    match verdict {
        NliVerdict::Entailment if above => LabelOutcome::Faithful,
        NliVerdict::Neutral | NliVerdict::Contradiction if below => LabelOutcome::Hallucinated,
        _ => LabelOutcome::Discarded,
    }
}

pub fn label_entry(entry: &ManifestEntry, medians: &MedianTable) -> Result<LabelOutcome> {
    let e = require(entry, "nli_entail", entry.nli_entail)?;
    let n = require(entry, "nli_neutral", entry.nli_neutral)?;
    let c = require(entry, "nli_contra", entry.nli_contra)?;
    let r = require(entry, "rouge_l", entry.rouge_l)?;
    let q = require(entry, "questeval", entry.questeval)?;
    Ok(label_rule(
        NliVerdict::from_probs(e, n, c),
        r,
        q,
        medians.for_entry(entry)?,
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabelCounts {
    pub labeled_1: usize,
    pub labeled_0: usize,
    pub discarded: usize,
}

/// Per-task label/discard counts, serialized as `{task: {labeled_1, labeled_0, discarded}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscardReport(pub BTreeMap<String, TaskLabelCounts>);

impl DiscardReport {
    pub fn totals(&self) -> TaskLabelCounts {
        self.0.values().fold(TaskLabelCounts::default(), |a, c| TaskLabelCounts {
            labeled_1: a.labeled_1 + c.labeled_1,
            labeled_0: a.labeled_0 + c.labeled_0,
            discarded: a.discarded + c.discarded,
        })
    }
}

/// Returns a copy of `entries` with `label` set by the rule; discarded
/// entries come back with `label` cleared.
pub fn assign_binary_labels(
    entries: &[ManifestEntry],
    medians: &MedianTable,
) -> Result<(Vec<ManifestEntry>, DiscardReport)> {
    let mut report = DiscardReport::default();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let outcome = label_entry(e, medians)?;
        let counts = report.0.entry(e.task.clone()).or_default();
        match outcome {
            LabelOutcome::Faithful => counts.labeled_1 += 1,
            LabelOutcome::Hallucinated => counts.labeled_0 += 1,
            LabelOutcome::Discarded => counts.discarded += 1,
        }
        let mut e = e.clone();
        e.label = outcome.label();
        out.push(e);
    }
    Ok((out, report))
}

/// Fraction of label-0 entries among labeled entries, per task. Tasks with
/// nothing labeled are left out.
pub fn hallucination_rate(entries: &[ManifestEntry]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for e in entries {
        let c = counts.entry(&e.task).or_default();
        match e.label {
            Some(0) => c.0 += 1,
            Some(_) => c.1 += 1,
            None => c.2 += 1,
        }
    }
    let mut rates = BTreeMap::new();
    for (task, (zeros, ones, _)) in counts {
        let n = zeros + ones;
        if n == 0 {
            log::warn!("task {task:?} has no labeled records; omitted from rates");
            continue;
        }
        rates.insert(task.to_string(), zeros as f64 / n as f64);
    }
    rates
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    RougeL,
    NliEntail,
    Questeval,
}

impl TargetMetric {
    pub fn name(&self) -> &'static str {
        match self {
            TargetMetric::RougeL => "rouge_l",
            TargetMetric::NliEntail => "nli_entail",
            TargetMetric::Questeval => "questeval",
        }
    }

    pub fn value(&self, entry: &ManifestEntry) -> Result<f64> {
        let v = match self {
            TargetMetric::RougeL => entry.rouge_l,
            TargetMetric::NliEntail => entry.nli_entail,
            TargetMetric::Questeval => entry.questeval,
        };
        require(entry, self.name(), v)
    }
}

impl FromStr for TargetMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rouge_l" => Ok(TargetMetric::RougeL),
            "nli_entail" | "nli" => Ok(TargetMetric::NliEntail),
            "questeval" => Ok(TargetMetric::Questeval),
            _ => Err(Error::invalid(format!(
                "target metric must be rouge_l, nli_entail or questeval, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Absolute,
    MinmaxNormalized,
    Rank,
}

impl FromStr for FormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(FormKind::Absolute),
            "minmax" | "minmax_normalized" => Ok(FormKind::MinmaxNormalized),
            "rank" => Ok(FormKind::Rank),
            _ => Err(Error::invalid(format!(
                "target form must be absolute, minmax_normalized or rank, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for FormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FormKind::Absolute => "absolute",
            FormKind::MinmaxNormalized => "minmax_normalized",
            FormKind::Rank => "rank",
        })
    }
}

/// A fitted golden-score transform.
#[derive(Debug, Clone, PartialEq)]
pub enum GoldenScoreForm {
    Absolute,
    MinmaxNormalized { min: f64, max: f64 },
    /// Sorted training scores.
    Rank { train: Vec<f64> },
}

impl GoldenScoreForm {
    /// Fits the transform on training-split scores. `group` names the
    /// population in error messages.
    pub fn fit(kind: FormKind, train_values: &[f64], group: &str) -> Result<Self> {
        match kind {
            FormKind::Absolute => Ok(GoldenScoreForm::Absolute),
            FormKind::MinmaxNormalized => {
                let min = train_values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = train_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
                    return Err(Error::invalid(format!(
                        "min-max form is degenerate for group {group:?}: min {min}, max {max}"
                    )));
                }
                Ok(GoldenScoreForm::MinmaxNormalized { min, max })
            }
            FormKind::Rank => {
                if train_values.is_empty() {
                    return Err(Error::invalid(format!(
                        "rank form for group {group:?} has no training scores"
                    )));
                }
                let mut train = train_values.to_vec();
                train.sort_by(f64::total_cmp);
                Ok(GoldenScoreForm::Rank { train })
            }
        }
    }

    pub fn transform(&self, x: f64) -> f64 {
        match self {
            GoldenScoreForm::Absolute => x,
            GoldenScoreForm::MinmaxNormalized { min, max } => ((x - min) / (max - min)).clamp(0.0, 1.0),
            GoldenScoreForm::Rank { train } => {
                let below = train.partition_point(|&v| v < x);
                let not_above = train.partition_point(|&v| v <= x);
                let ties = not_above - below;
                (below as f64 + 0.5 * ties as f64) / train.len() as f64
            }
        }
    }
}

pub fn make_regression_targets(
    entries: &[ManifestEntry],
    metric: TargetMetric,
    form: &GoldenScoreForm,
) -> Result<Vec<f64>> {
    entries
        .iter()
        .map(|e| metric.value(e).map(|v| form.transform(v)))
        .collect()
}
