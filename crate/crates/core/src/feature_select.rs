//! Mutual information between single activation dimensions and the binary
//! label, and export of the most informative neurons.
//!
//! The estimator is the nearest-neighbour form for a continuous variable
//! against a discrete one:
//!
//! ```text
//! I = ψ(n) − ⟨ψ(n_y)⟩ + ψ(k) − ⟨ψ(m)⟩
//! ```
//!
//! where `n_y` is the size of a point's class and `m` counts all points
//! within the distance to its k-th same-class neighbour. Features are
//! jittered to break ties and replaced by normal scores of their ranks, so
//! estimates depend only on the ordering of the values.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::DatasetView;

pub const DEFAULT_NEIGHBORS: usize = 3;
pub const DEFAULT_JITTER_SEED: u64 = 0;
const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats, clamped at zero.
    pub value: f64,
    /// The feature took a single value; `value` is 0.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    /// Estimate per dimension, in dimension order.
    pub mi: Vec<f64>,
    /// Dimensions by decreasing MI; ties go to the lower index.
    pub ranking: Vec<usize>,
    pub constant_dims: Vec<usize>,
    pub k_neighbors: usize,
}

impl MiResult {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// Precomputed pieces shared by every dimension of one label vector.
struct Estimator<'a> {
    labels: &'a [u8],
    k: usize,
    scores: Vec<f64>,
    class_term: f64,
}

impl<'a> Estimator<'a> {
    fn new(labels: &'a [u8], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let n = labels.len();
        let mut counts = [0usize; 2];
        for &l in labels {
            match l {
                0 | 1 => counts[l as usize] += 1,
                _ => return Err(Error::invalid(format!("labels must be 0 or 1, got {l}"))),
            }
        }
        for (class, &c) in counts.iter().enumerate() {
            if c < k + 1 {
                return Err(Error::invalid(format!(
                    "class {class} has {c} members; at least k+1 = {} are needed",
                    k + 1
                )));
            }
        }
        let normal = Normal::standard();
        let scores = (0..n)
            .map(|r| normal.inverse_cdf((r as f64 + 0.5) / n as f64))
            .collect();
        let class_term = labels.iter().map(|&l| digamma(counts[l as usize] as f64)).sum::<f64>() / n as f64;
        Ok(Estimator {
            labels,
            k,
            scores,
            class_term,
        })
    }

    fn estimate(&self, feature: &[f64], seed: u64, stream: u64) -> Result<MiEstimate> {
        let n = self.labels.len();
        if feature.len() != n {
            return Err(Error::Shape(format!("{} feature values against {n} labels", feature.len())));
        }
        if let Some(v) = feature.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {v}")));
        }
        if feature.iter().all(|&v| v == feature[0]) {
            return Ok(MiEstimate {
                value: 0.0,
                constant: true,
            });
        }

        let scale = feature.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let jittered: Vec<f64> = feature
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + JITTER * scale * z
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| jittered[a].total_cmp(&jittered[b]).then(a.cmp(&b)));

        // After the rank transform, sorted position p holds value scores[p].
        let x = &self.scores;
        let y: Vec<u8> = order.iter().map(|&i| self.labels[i]).collect();
        // Terms are summed in sorted-position order, which does not depend
        // on which class is called 0.
        let mut terms = vec![0.0; n];
        for class in 0..2u8 {
            let members: Vec<usize> = (0..n).filter(|&p| y[p] == class).collect();
            for (q, &p) in members.iter().enumerate() {
                let r = kth_distance(x, &members, q, self.k);
                let right = x[p + 1..].partition_point(|&v| v - x[p] <= r);
                let left = p - x[..p].partition_point(|&v| x[p] - v > r);
                terms[p] = digamma((left + right) as f64);
            }
        }
        let neighbor_term: f64 = terms.iter().sum();
        let value = digamma(n as f64) - self.class_term + digamma(self.k as f64) - neighbor_term / n as f64;
        Ok(MiEstimate {
            value: value.max(0.0),
            constant: false,
        })
    }
}

/// Distance from `members[q]` to its k-th nearest neighbour among
/// `members`, all positions into the sorted value array `x`.
fn kth_distance(x: &[f64], members: &[usize], q: usize, k: usize) -> f64 {
    let c = x[members[q]];
    let (mut lo, mut hi) = (q, q + 1);
    let mut r = 0.0;
    for _ in 0..k {
        let dl = (lo > 0).then(|| c - x[members[lo - 1]]);
        let dr = (hi < members.len()).then(|| x[members[hi]] - c);
        match (dl, dr) {
            (Some(a), Some(b)) if a <= b => {
                r = a;
                lo -= 1;
            }
            (_, Some(b)) => {
                r = b;
                hi += 1;
            }
            (Some(a), None) => {
                r = a;
                lo -= 1;
            }
            (None, None) => unreachable!("class size checked against k"),
        }
    }
    r
}

/// MI between one feature and binary labels, in nats.
pub fn mi_knn(feature: &[f64], labels: &[u8], k: usize, seed: u64) -> Result<MiEstimate> {
    Estimator::new(labels, k)?.estimate(feature, seed, 0)
}

/// Scores every column of `x`. Column `j` jitters from stream `j` of
/// `seed`, so results do not depend on scheduling.
pub fn rank_features(x: &Matrix, labels: &[u8], k: usize, seed: u64) -> Result<MiResult> {
    if x.cols() == 0 {
        return Err(Error::Shape("no feature dimensions".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows against {} labels", x.rows(), labels.len())));
    }
    let est = Estimator::new(labels, k)?;
    let xt = x.transpose();
    let estimates: Vec<MiEstimate> = (0..x.cols())
        .into_par_iter()
        .map(|j| est.estimate(xt.row(j), seed, j as u64))
        .collect::<Result<_>>()?;
    let mi: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let mut ranking: Vec<usize> = (0..mi.len()).collect();
    ranking.sort_by(|&a, &b| mi[b].total_cmp(&mi[a]).then(a.cmp(&b)));
    Ok(MiResult {
        mi,
        ranking,
        constant_dims: estimates
            .iter()
            .enumerate()
            .filter(|(_, e)| e.constant)
            .map(|(j, _)| j)
            .collect(),
        k_neighbors: k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub record_id: u64,
    pub label: Option<u8>,
    pub values: Vec<f32>,
}

/// Per-record values of the selected dimensions, ready for scatter plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronTable {
    pub dims: Vec<usize>,
    pub mi: Vec<f64>,
    pub rows: Vec<NeuronRow>,
}

impl NeuronTable {
    pub fn header(&self) -> Vec<String> {
        ["record_id".to_string(), "label".to_string()]
            .into_iter()
            .chain(self.dims.iter().map(|d| format!("dim_{d}")))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(self.header()).map_err(csv_err)?;
        for row in &self.rows {
            let mut fields = vec![
                row.record_id.to_string(),
                row.label.map(|l| l.to_string()).unwrap_or_default(),
            ];
            fields.extend(row.values.iter().map(|v| v.to_string()));
            w.write_record(&fields).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `{"dims": [...], "mi": [...], "rows": [{"record_id", "label", "dim_<i>"...}]}`.
    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut o = Map::new();
                o.insert("record_id".into(), json!(r.record_id));
                o.insert("label".into(), json!(r.label));
                for (d, v) in self.dims.iter().zip(&r.values) {
                    o.insert(format!("dim_{d}"), json!(v));
                }
                Value::Object(o)
            })
            .collect();
        json!({ "dims": self.dims, "mi": self.mi, "rows": rows })
    }
}

/// The `k` highest-ranked dimensions of every record in `view`.
pub fn export_top_neurons(view: &DatasetView, mi: &MiResult, k: usize) -> Result<NeuronTable> {
    let d = view.hidden_dim();
    if mi.ranking.len() != d {
        return Err(Error::Shape(format!(
            "ranking covers {} dims but the view has d={d}",
            mi.ranking.len()
        )));
    }
    if k > d {
        return Err(Error::invalid(format!("cannot export {k} neurons from d={d}")));
    }
    let dims = mi.ranking[..k].to_vec();
    let rows = view
        .samples()
        .iter()
        .map(|s| NeuronRow {
            record_id: s.record.record_id,
            label: s.entry.label,
            values: dims.iter().map(|&j| s.record.hidden[j]).collect(),
        })
        .collect();
    Ok(NeuronTable {
        mi: dims.iter().map(|&j| mi.mi[j]).collect(),
        dims,
        rows,
    })
}
