use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use super::actv::ActivationRecord;
use super::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One activation record paired with its manifest entry.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: Arc<ActivationRecord>,
    pub entry: Arc<ManifestEntry>,
}

/// Read-only, record-id-joined pairs of activations and metadata.
#[derive(Debug, Clone)]
pub struct DatasetView {
    samples: Vec<Sample>,
    hidden_dim: usize,
    provenance: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct JoinReport {
    pub matched: usize,
    /// Activation records without a manifest entry.
    pub unmatched_records: usize,
    /// Manifest entries without any activation record.
    pub unmatched_entries: usize,
}

impl fmt::Display for JoinReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} matched, {} unmatched records, {} unmatched entries",
            self.matched, self.unmatched_records, self.unmatched_entries
        )
    }
}

/// Pairs records with manifest entries on `record_id`.
///
/// A manifest entry may pair with several records of the same query, one per
/// layer. The output is ordered by (record_id, layer), so the result does not
/// depend on the input order of either side.
pub fn join(
    records: Vec<ActivationRecord>,
    hidden_dim: usize,
    manifest: &Manifest,
) -> Result<(DatasetView, JoinReport)> {
    let mut by_id: HashMap<u64, Arc<ManifestEntry>> = HashMap::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if by_id.insert(e.record_id, Arc::new(e.clone())).is_some() {
            return Err(Error::DuplicateId(format!("{} in manifest", e.record_id)));
        }
    }
    let mut keys = HashSet::with_capacity(records.len());
    let mut used = HashSet::new();
    let mut samples = Vec::with_capacity(records.len());
    let mut unmatched_records = 0;
    for r in records {
        if r.hidden.len() != hidden_dim {
            return Err(Error::Shape(format!(
                "record {} has {} hidden values, view expects {hidden_dim}",
                r.record_id,
                r.hidden.len()
            )));
        }
        if !keys.insert(r.key()) {
            return Err(Error::DuplicateId(format!(
                "{} at layer {} in activations",
                r.record_id, r.layer_index
            )));
        }
        let Some(entry) = by_id.get(&r.record_id) else {
            unmatched_records += 1;
            continue;
        };
        if let Some(name) = manifest.model_name(r.model_tag) {
            if name != entry.model {
                return Err(Error::invalid(format!(
                    "record {}: model_tag {} names {name:?} but the manifest says {:?}",
                    r.record_id, r.model_tag, entry.model
                )));
            }
        } else if manifest.preamble.is_some() {
            return Err(Error::invalid(format!(
                "record {}: model_tag {} not declared in the manifest preamble",
                r.record_id, r.model_tag
            )));
        }
        if let Some(count) = manifest.layer_count(r.model_tag) {
            if u32::from(r.layer_index) >= count {
                return Err(Error::invalid(format!(
                    "record {}: layer {} out of range for a {count}-layer model",
                    r.record_id, r.layer_index
                )));
            }
        }
        used.insert(r.record_id);
        samples.push(Sample {
            record: Arc::new(r),
            entry: Arc::clone(entry),
        });
    }
    samples.sort_by_key(|s| s.record.key());
    let report = JoinReport {
        matched: samples.len(),
        unmatched_records,
        unmatched_entries: manifest.entries.len() - used.len(),
    };
    if report.unmatched_records > 0 || report.unmatched_entries > 0 {
        log::warn!("join: {report}");
    }
    let view = DatasetView {
        samples,
        hidden_dim,
        provenance: vec![format!("join: {report}")],
    };
    Ok((view, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterField {
    Task,
    Dataset,
    Model,
    Layer,
    Split,
    Label,
}

/// An equality predicate `field=value` over a view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filter {
    pub field: FilterField,
    pub value: String,
}

impl Filter {
    pub fn new(field: FilterField, value: impl Into<String>) -> Self {
        Filter {
            field,
            value: value.into(),
        }
    }

    fn matches(&self, s: &Sample) -> Result<bool> {
        if self.field == FilterField::Layer {
            return Ok(s.record.layer_index == self.layer()?);
        }
        self.matches_entry(&s.entry)
    }

    fn layer(&self) -> Result<u16> {
        self.value
            .parse()
            .map_err(|_| Error::invalid(format!("layer filter {:?} is not a layer index", self.value)))
    }

    /// Applies the filter to a manifest entry alone. Layer filters need an
    /// activation record and are rejected.
    pub fn matches_entry(&self, e: &ManifestEntry) -> Result<bool> {
        Ok(match self.field {
            FilterField::Task => e.task == self.value,
            FilterField::Dataset => e.dataset == self.value,
            FilterField::Model => e.model == self.value,
            FilterField::Layer => {
                return Err(Error::invalid(format!(
                    "filter {self} needs activation records"
                )))
            }
            FilterField::Split => {
                let split: Split = self.value.parse()?;
                e.split == Some(split)
            }
            FilterField::Label => {
                let label: u8 = self
                    .value
                    .parse()
                    .map_err(|_| Error::invalid(format!("label filter {:?} is not 0 or 1", self.value)))?;
                e.label == Some(label)
            }
        })
    }
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("filter {s:?} is not of the form field=value")))?;
        let field = match k.trim() {
            "task" => FilterField::Task,
            "dataset" => FilterField::Dataset,
            "model" => FilterField::Model,
            "layer" => FilterField::Layer,
            "split" => FilterField::Split,
            "label" => FilterField::Label,
            other => return Err(Error::invalid(format!("unknown filter field {other:?}"))),
        };
        Ok(Filter::new(field, v.trim()))
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.field {
            FilterField::Task => "task",
            FilterField::Dataset => "dataset",
            FilterField::Model => "model",
            FilterField::Layer => "layer",
            FilterField::Split => "split",
            FilterField::Label => "label",
        };
        write!(f, "{k}={}", self.value)
    }
}

impl DatasetView {
    pub fn from_samples(samples: Vec<Sample>, hidden_dim: usize, note: impl Into<String>) -> Self {
        DatasetView {
            samples,
            hidden_dim,
            provenance: vec![note.into()],
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn layers(&self) -> BTreeSet<u16> {
        self.samples.iter().map(|s| s.record.layer_index).collect()
    }

    /// Subset satisfying every filter (AND). An empty result is not an error.
    pub fn filter(&self, filters: &[Filter]) -> Result<DatasetView> {
        let mut samples = Vec::new();
        'outer: for s in &self.samples {
            for f in filters {
                if !f.matches(s)? {
                    continue 'outer;
                }
            }
            samples.push(s.clone());
        }
        let mut provenance = self.provenance.clone();
        if !filters.is_empty() {
            let desc: Vec<String> = filters.iter().map(ToString::to_string).collect();
            provenance.push(format!("filter: {}", desc.join(" AND ")));
        }
        Ok(DatasetView {
            samples,
            hidden_dim: self.hidden_dim,
            provenance,
        })
    }

    /// Subset by an arbitrary predicate, recorded under `note`.
    pub fn retain(&self, note: &str, mut keep: impl FnMut(&Sample) -> bool) -> DatasetView {
        let mut provenance = self.provenance.clone();
        provenance.push(note.to_string());
        DatasetView {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            hidden_dim: self.hidden_dim,
            provenance,
        }
    }

    /// Hidden vectors as an n×d `f64` matrix.
    pub fn features(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.samples.len() * self.hidden_dim);
        for s in &self.samples {
            data.extend(s.record.hidden.iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(self.samples.len(), self.hidden_dim, data)
            .expect("join guarantees uniform hidden_dim")
    }

    /// Binary labels; every entry must carry one.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.samples
            .iter()
            .map(|s| {
                s.entry.label.ok_or(Error::MissingField {
                    record_id: s.entry.record_id,
                    field: "label",
                })
            })
            .collect()
    }

    pub fn record_ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.record.record_id).collect()
    }
}
