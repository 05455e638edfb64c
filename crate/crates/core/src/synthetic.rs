//! Planted two-class fixtures for tests, demos and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::{ActivationRecord, Manifest, ManifestEntry, Preamble};

/// Balanced labels in shuffled order; `n` odd gives one extra `1`.
pub fn balanced_labels(n: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut y: Vec<u8> = (0..n).map(|i| u8::from(i < n.div_ceil(2))).collect();
    y.shuffle(rng);
    y
}

/// Unit-variance Gaussian features whose first `signal_dims` coordinates
/// have mean `+shift` for label 1 and `-shift` for label 0.
pub fn planted_gaussians(
    n: usize,
    d: usize,
    signal_dims: usize,
    shift: f64,
    seed: u64,
) -> Result<(Matrix, Vec<u8>)> {
    if signal_dims > d {
        return Err(Error::invalid(format!("{signal_dims} signal dims exceed d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = balanced_labels(n, &mut rng);
    let data = planted_rows(&y, d, signal_dims, shift, &mut rng);
    Ok((Matrix::from_vec(n, d, data)?, y))
}

fn planted_rows(y: &[u8], d: usize, signal_dims: usize, shift: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut data = Vec::with_capacity(y.len() * d);
    for &label in y {
        let sign = 2.0 * f64::from(label) - 1.0;
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data.push(if j < signal_dims { z + sign * shift } else { z });
        }
    }
    data
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub records: usize,
    pub hidden_dim: usize,
    pub signal_dims: usize,
    pub shift: f64,
    /// Layers to emit, each flagged with whether it carries the signal.
    pub layers: Vec<(u16, bool)>,
    /// Write labels directly instead of leaving them to the labeling rule.
    pub with_labels: bool,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            records: 400,
            hidden_dim: 64,
            signal_dims: 8,
            shift: 1.0,
            layers: vec![(0, true)],
            with_labels: false,
            seed: 0,
        }
    }
}

/// Activation records and a manifest whose metric scores make the labeling
/// rule recover the planted classes.
pub fn planted_fixture(spec: &FixtureSpec) -> Result<(Vec<ActivationRecord>, Manifest)> {
    if spec.signal_dims > spec.hidden_dim {
        return Err(Error::invalid("more signal dims than hidden dims"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let y = balanced_labels(spec.records, &mut rng);
    let mut records = Vec::with_capacity(spec.records * spec.layers.len());
    for &(layer, signal) in &spec.layers {
        let dims = if signal { spec.signal_dims } else { 0 };
        let rows = planted_rows(&y, spec.hidden_dim, dims, spec.shift, &mut rng);
        for (i, row) in rows.chunks(spec.hidden_dim).enumerate() {
            records.push(ActivationRecord::new(
                i as u64,
                layer,
                0,
                row.iter().map(|&v| v as f32).collect(),
            ));
        }
    }
    let round = |x: f64| (x * 1e4).round() / 1e4;
    // Tasks alternate within each class so per-task medians also separate.
    let mut seen = [0usize; 2];
    let entries = y
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let tasks = ["qa", "summarization"];
            let task = tasks[seen[label as usize] % 2];
            seen[label as usize] += 1;
            let mut e = ManifestEntry::new(
                i as u64,
                format!("synthetic query {i}"),
                task,
                "synthetic",
                "planted",
            );
            let (lo, hi) = if label == 1 { (0.6, 1.0) } else { (0.0, 0.4) };
            e.rouge_l = Some(round(rng.random_range(lo..hi)));
            e.questeval = Some(round(rng.random_range(lo..hi)));
            let (ent, neu, con) = if label == 1 { (0.8, 0.15, 0.05) } else { (0.1, 0.2, 0.7) };
            e.nli_entail = Some(ent);
            e.nli_neutral = Some(neu);
            e.nli_contra = Some(con);
            e.ppl = Some(round(rng.random_range(2.0..40.0)));
            e.response = Some(format!("response {i}"));
            e.reference = Some(format!("reference {i}"));
            if spec.with_labels {
                e.label = Some(label);
            }
            e
        })
        .collect();
    let max_layer = spec.layers.iter().map(|l| l.0).max().unwrap_or(0);
    let preamble = Preamble {
        models: vec!["planted".into()],
        layer_counts: Some(vec![u32::from(max_layer) + 1]),
        extra: Default::default(),
    };
    Ok((records, Manifest::new(Some(preamble), entries)?))
}
