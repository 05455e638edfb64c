//! JSON Lines manifest describing each activation record.
//!
//! The first line may be a preamble (`"record_id": -1`) declaring the ordered
//! model-name list that `model_tag` indexes into, and optionally the layer
//! count of each model. Every other line is one [`ManifestEntry`]. Keys the
//! toolkit does not know are carried through unchanged.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const PREAMBLE_ID: i64 = -1;
const NLI_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: u64,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub task: String,
    pub dataset: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli_entail: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli_neutral: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli_contra: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questeval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ManifestEntry {
    /// Entry with only the required fields set.
    pub fn new(
        record_id: u64,
        query: impl Into<String>,
        task: impl Into<String>,
        dataset: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        ManifestEntry {
            record_id,
            query: query.into(),
            response: None,
            reference: None,
            source: None,
            task: task.into(),
            dataset: dataset.into(),
            model: model.into(),
            rouge_l: None,
            nli_entail: None,
            nli_neutral: None,
            nli_contra: None,
            questeval: None,
            ppl: None,
            label: None,
            split: None,
            extra: Map::new(),
        }
    }

    /// The (entailment, neutral, contradiction) triple, if present.
    pub fn nli(&self) -> Option<(f64, f64, f64)> {
        Some((self.nli_entail?, self.nli_neutral?, self.nli_contra?))
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.record_id;
        let unit = |name: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(0.0..=1.0).contains(&x) => Err(Error::invalid(format!(
                    "record {id}: {name} = {x} outside [0, 1]"
                ))),
                _ => Ok(()),
            }
        };
        unit("rouge_l", self.rouge_l)?;
        unit("nli_entail", self.nli_entail)?;
        unit("nli_neutral", self.nli_neutral)?;
        unit("nli_contra", self.nli_contra)?;
        unit("questeval", self.questeval)?;
        let present = [self.nli_entail, self.nli_neutral, self.nli_contra]
            .iter()
            .filter(|v| v.is_some())
            .count();
        if present != 0 && present != 3 {
            return Err(Error::invalid(format!(
                "record {id}: NLI fields must be given all together ({present} of 3 present)"
            )));
        }
        if let Some((e, n, c)) = self.nli() {
            if ((e + n + c) - 1.0).abs() > NLI_SUM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "record {id}: NLI probabilities sum to {}",
                    e + n + c
                )));
            }
        }
        if let Some(p) = self.ppl {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::invalid(format!("record {id}: ppl = {p} is not positive")));
            }
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::invalid(format!("record {id}: label {l} not in {{0, 1}}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Preamble {
    pub models: Vec<String>,
    /// Declared layer count per model, parallel to `models`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_counts: Option<Vec<u32>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub preamble: Option<Preamble>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(preamble: Option<Preamble>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest { preamble, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            e.validate()?;
            if !seen.insert(e.record_id) {
                return Err(Error::DuplicateId(format!("{} in manifest", e.record_id)));
            }
        }
        if let Some(p) = &self.preamble {
            if let Some(lc) = &p.layer_counts {
                if lc.len() != p.models.len() {
                    return Err(Error::invalid(format!(
                        "preamble declares {} models but {} layer counts",
                        p.models.len(),
                        lc.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn model_name(&self, tag: u16) -> Option<&str> {
        self.preamble
            .as_ref()
            .and_then(|p| p.models.get(tag as usize))
            .map(String::as_str)
    }

    pub fn layer_count(&self, tag: u16) -> Option<u32> {
        self.preamble
            .as_ref()
            .and_then(|p| p.layer_counts.as_ref())
            .and_then(|lc| lc.get(tag as usize).copied())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut preamble = None;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in source.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if value.get("record_id").and_then(Value::as_i64) == Some(PREAMBLE_ID) {
                if preamble.is_some() || !entries.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "preamble must be the first line and appear once".into(),
                    });
                }
                let mut obj = value;
                if let Some(o) = obj.as_object_mut() {
                    o.remove("record_id");
                }
                preamble = Some(serde_json::from_value::<Preamble>(obj).map_err(|e| {
                    Error::Parse {
                        line: line_no,
                        message: format!("bad preamble: {e}"),
                    }
                })?);
                continue;
            }
            let entry: ManifestEntry = serde_json::from_value(value).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            entry.validate().map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if !seen.insert(entry.record_id) {
                return Err(Error::DuplicateId(format!(
                    "{} in manifest (line {line_no})",
                    entry.record_id
                )));
            }
            entries.push(entry);
        }
        let m = Manifest { preamble, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        let mut sink = BufWriter::new(sink);
        if let Some(p) = &self.preamble {
            let mut v = serde_json::to_value(p).map_err(|e| Error::invalid(e.to_string()))?;
            if let Value::Object(o) = &mut v {
                let mut with_id = Map::new();
                with_id.insert("record_id".into(), Value::from(PREAMBLE_ID));
                with_id.extend(std::mem::take(o));
                *o = with_id;
            }
            serde_json::to_writer(&mut sink, &v).map_err(|e| Error::invalid(e.to_string()))?;
            sink.write_all(b"\n")?;
        }
        for e in &self.entries {
            serde_json::to_writer(&mut sink, e).map_err(|e| Error::invalid(e.to_string()))?;
            sink.write_all(b"\n")?;
        }
        sink.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(File::create(path)?)
    }
}
