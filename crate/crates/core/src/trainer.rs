//! Splitting, AdamW with a linear schedule, the training loop and timed
//! evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{FormKind, GoldenScoreForm, TargetMetric};
use crate::matrix::Matrix;
use crate::metrics::{classification_report, regression_report, EvalReport};
use crate::probe::{self, Backbone, Gradients, Mode, Prediction, ProbeParams, Targets, Weight};
use crate::store::{DatasetView, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Shuffle from `seed + epoch`. When false each epoch draws its order
    /// from OS entropy instead.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            base_lr: 1e-5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            mode: Mode::Classification,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 42,
            stratify: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("split ratios must be non-negative"));
        }
        if self.train <= 0.0 {
            return Err(Error::invalid("the train ratio must be positive"));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn parts(&self) -> usize {
        [self.train, self.val, self.test].iter().filter(|&&r| r > 0.0).count()
    }
}

/// Largest-remainder apportionment of `n` items over the three ratios.
fn apportion(n: usize, spec: &SplitSpec) -> [usize; 3] {
    let ratios = [spec.train, spec.val, spec.test];
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Assigns each distinct record id to a split. `items` pairs ids with their
/// labels; labels are only consulted when stratifying.
pub fn assign_splits(items: &[(u64, Option<u8>)], spec: &SplitSpec) -> Result<BTreeMap<u64, Split>> {
    spec.validate()?;
    let mut label_of: BTreeMap<u64, Option<u8>> = BTreeMap::new();
    for &(id, label) in items {
        if let Some(prev) = label_of.insert(id, label) {
            if prev != label {
                return Err(Error::invalid(format!("record {id} carries two different labels")));
            }
        }
    }
    let groups: Vec<Vec<u64>> = if spec.stratify {
        let mut by_class: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
        for (&id, &label) in &label_of {
            match label {
                Some(l @ 0..=1) => by_class[l as usize].push(id),
                Some(l) => return Err(Error::invalid(format!("record {id}: label {l} is not binary"))),
                None => {
                    return Err(Error::MissingField {
                        record_id: id,
                        field: "label",
                    })
                }
            }
        }
        for (class, ids) in by_class.iter().enumerate() {
            if ids.len() < spec.parts() {
                return Err(Error::invalid(format!(
                    "class {class} has {} records, fewer than the {} split parts",
                    ids.len(),
                    spec.parts()
                )));
            }
        }
        by_class.into()
    } else {
        vec![label_of.keys().copied().collect()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = BTreeMap::new();
    for mut ids in groups {
        ids.shuffle(&mut rng);
        let [a, b, _] = apportion(ids.len(), spec);
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < a {
                Split::Train
            } else if i < a + b {
                Split::Val
            } else {
                Split::Test
            };
            out.insert(id, s);
        }
    }
    Ok(out)
}

/// The split recorded in the manifest, when every entry carries one.
pub fn manifest_assignment(view: &DatasetView) -> Option<BTreeMap<u64, Split>> {
    view.samples()
        .iter()
        .map(|s| s.entry.split.map(|sp| (s.entry.record_id, sp)))
        .collect()
}

/// Splits by an existing assignment. Records missing from it are dropped.
pub fn partition(view: &DatasetView, assignment: &BTreeMap<u64, Split>) -> [DatasetView; 3] {
    [Split::Train, Split::Val, Split::Test].map(|want| {
        view.retain(&format!("split={want}"), |s| assignment.get(&s.record.record_id) == Some(&want))
    })
}

/// Train/val/test views. Every layer of a record lands in the same split.
pub fn split(view: &DatasetView, spec: &SplitSpec) -> Result<[DatasetView; 3]> {
    let items: Vec<(u64, Option<u8>)> = view
        .samples()
        .iter()
        .map(|s| (s.record.record_id, s.entry.label))
        .collect();
    let assignment = assign_splits(&items, spec)?;
    Ok(partition(view, &assignment))
}

pub fn linear_lr(base_lr: f64, t: usize, total: usize) -> f64 {
    debug_assert!(total >= 1 && t <= total);
    base_lr * (1.0 - t as f64 / total as f64)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    moments: Vec<(Weight, Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl OptimizerState {
    pub fn new(params: &ProbeParams) -> Self {
        OptimizerState {
            moments: params
                .matrices()
                .map(|(w, m)| (w, vec![0.0; m.as_slice().len()], vec![0.0; m.as_slice().len()]))
                .collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(
    params: &mut ProbeParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (w, g) in grads.iter() {
        let p = params
            .matrix(w)
            .ok_or_else(|| Error::Shape(format!("gradient for absent {} matrix", w.name())))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{} gradient is {}x{}, weights are {}x{}",
                w.name(),
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("{} gradient", w.name())));
        }
    }
    if grads.iter().count() != state.moments.len() {
        return Err(Error::Shape("gradient set does not match the optimizer state".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps, wd) = (config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((w, g), (sw, m, v)) in grads.iter().zip(state.moments.iter_mut()) {
        debug_assert_eq!(w, *sw);
        let p = params.matrix_mut(w).expect("checked above");
        p.as_mut_slice()
            .par_iter_mut()
            .zip(m.par_iter_mut())
            .zip(v.par_iter_mut())
            .zip(g.as_slice().par_iter())
            .for_each(|(((x, m), v), &g)| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= lr * (mh / (vh.sqrt() + eps) + wd * *x);
            });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetValues {
    Classes(Vec<u8>),
    Values(Vec<f64>),
}

impl TargetValues {
    pub fn len(&self) -> usize {
        match self {
            TargetValues::Classes(v) => v.len(),
            TargetValues::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> Mode {
        match self {
            TargetValues::Classes(_) => Mode::Classification,
            TargetValues::Values(_) => Mode::Regression,
        }
    }

    fn as_targets(&self) -> Targets<'_> {
        match self {
            TargetValues::Classes(v) => Targets::Classes(v),
            TargetValues::Values(v) => Targets::Values(v),
        }
    }

    fn select(&self, idx: &[usize]) -> TargetValues {
        match self {
            TargetValues::Classes(v) => TargetValues::Classes(idx.iter().map(|&i| v[i]).collect()),
            TargetValues::Values(v) => TargetValues::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Features paired with training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    features: Matrix,
    targets: TargetValues,
}

impl LabeledData {
    pub fn new(features: Matrix, targets: TargetValues) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature rows against {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if let TargetValues::Classes(c) = &targets {
            if let Some(l) = c.iter().find(|&&l| l > 1) {
                return Err(Error::invalid(format!("labels must be 0 or 1, got {l}")));
            }
        }
        if let TargetValues::Values(v) = &targets {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("regression targets".into()));
            }
        }
        Ok(LabeledData { features, targets })
    }

    pub fn from_labels(view: &DatasetView) -> Result<Self> {
        LabeledData::new(view.features(), TargetValues::Classes(view.labels()?))
    }

    pub fn from_values(view: &DatasetView, values: Vec<f64>) -> Result<Self> {
        LabeledData::new(view.features(), TargetValues::Values(values))
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &TargetValues {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.targets.mode()
    }
}

/// How targets are derived from manifest entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetSpec {
    Labels,
    Golden { metric: TargetMetric, form: FormKind },
}

impl TargetSpec {
    pub fn mode(&self) -> Mode {
        match self {
            TargetSpec::Labels => Mode::Classification,
            TargetSpec::Golden { .. } => Mode::Regression,
        }
    }

    /// Fits any golden-score form on `train` only, then builds data for
    /// `train` and each of `others`.
    pub fn build(
        &self,
        train: &DatasetView,
        others: &[&DatasetView],
    ) -> Result<(LabeledData, Vec<LabeledData>, Option<GoldenScoreForm>)> {
        match *self {
            TargetSpec::Labels => Ok((
                LabeledData::from_labels(train)?,
                others.iter().map(|v| LabeledData::from_labels(v)).collect::<Result<_>>()?,
                None,
            )),
            TargetSpec::Golden { metric, form } => {
                let raw = |v: &DatasetView| -> Result<Vec<f64>> {
                    v.samples().iter().map(|s| metric.value(&s.entry)).collect()
                };
                let fitted = GoldenScoreForm::fit(form, &raw(train)?, "train split")?;
                let make = |v: &DatasetView| -> Result<LabeledData> {
                    let values = raw(v)?.into_iter().map(|x| fitted.transform(x)).collect();
                    LabeledData::from_values(v, values)
                };
                let others = others.iter().map(|v| make(v)).collect::<Result<_>>()?;
                Ok((make(train)?, others, Some(fitted)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_report: Option<EvalReport>,
}

fn check_compatible(params: &ProbeParams, data: &LabeledData, mode: Mode) -> Result<()> {
    if params.input_dim() != data.features.cols() {
        return Err(Error::Shape(format!(
            "probe expects d={} but activations have d={}",
            params.input_dim(),
            data.features.cols()
        )));
    }
    if data.mode() != mode {
        return Err(Error::invalid(format!(
            "{mode:?} mode needs {} targets",
            match mode {
                Mode::Classification => "binary label",
                Mode::Regression => "real-valued",
            }
        )));
    }
    if params.output_dim() != mode.output_dim() {
        return Err(Error::invalid(format!(
            "a probe with {} outputs cannot run in {mode:?} mode",
            params.output_dim()
        )));
    }
    Ok(())
}

/// Runs `epochs × ⌈n/batch⌉` AdamW steps and returns the final-epoch
/// parameters with the per-epoch history.
pub fn train(
    config: &TrainConfig,
    train_data: &LabeledData,
    val_data: Option<&LabeledData>,
    mut params: ProbeParams,
) -> Result<(ProbeParams, Vec<EpochRecord>)> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::invalid("the training view is empty"));
    }
    check_compatible(&params, train_data, config.mode)?;
    if let Some(v) = val_data {
        check_compatible(&params, v, config.mode)?;
    }
    let n = train_data.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut state = OptimizerState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        if config.deterministic {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        } else {
            order.shuffle(&mut rand::rng());
        }
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let x = train_data.features.select_rows(idx);
            let y = train_data.targets.select(idx);
            let (logits, cache) = probe::forward(&params, &x)?;
            let (l, dlogits) = probe::loss(&logits, y.as_targets())?;
            let grads = probe::backward(&params, &cache, &dlogits)?;
            adamw_step(&mut params, &grads, &mut state, config, linear_lr(config.base_lr, step, total))?;
            loss_sum += l * idx.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
        }
        let val_report = match val_data {
            Some(v) if !v.is_empty() => Some(evaluate(&params, v, config.mode)?),
            _ => None,
        };
        log::info!("epoch {epoch}: train loss {train_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_report,
        });
    }
    Ok((params, history))
}

const EVAL_BATCH: usize = 128;

/// Logits for every row, computed in bounded batches.
pub fn infer(params: &ProbeParams, features: &Matrix) -> Result<Matrix> {
    let c = params.output_dim();
    let mut out = Vec::with_capacity(features.rows() * c);
    let idx: Vec<usize> = (0..features.rows()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (logits, _) = probe::forward(params, &features.select_rows(chunk))?;
        out.extend_from_slice(logits.as_slice());
    }
    Matrix::from_vec(features.rows(), c, out)
}

/// Scores `params` on `data`. The timing covers probe forward and
/// prediction only.
pub fn evaluate(params: &ProbeParams, data: &LabeledData, mode: Mode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty view"));
    }
    check_compatible(params, data, mode)?;
    let start = Instant::now();
    let logits = infer(params, &data.features)?;
    let prediction = probe::predict(&logits, mode)?;
    let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    match (prediction, &data.targets) {
        (Prediction::Classes(p), TargetValues::Classes(g)) => classification_report(&p, g, seconds),
        (Prediction::Scores(p), TargetValues::Values(g)) => regression_report(&p, g, seconds),
        _ => unreachable!("mode checked against targets"),
    }
}

/// Probe architecture for runs that initialize their own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeShape {
    pub backbone: Backbone,
    pub hidden_dim: usize,
}

impl Default for ProbeShape {
    fn default() -> Self {
        ProbeShape {
            backbone: Backbone::Gated,
            hidden_dim: 11008,
        }
    }
}

/// Trains one probe per requested layer and reports each on its test split.
/// The split is drawn once over record ids and reused for every layer.
pub fn sweep_layers(
    config: &TrainConfig,
    shape: ProbeShape,
    targets: TargetSpec,
    view: &DatasetView,
    layers: &[u16],
    split_spec: &SplitSpec,
) -> Result<BTreeMap<u16, EvalReport>> {
    if layers.is_empty() {
        return Err(Error::invalid("no layers requested"));
    }
    if targets.mode() != config.mode {
        return Err(Error::invalid("target kind contradicts the training mode"));
    }
    let all_ids: BTreeSet<u64> = view.samples().iter().map(|s| s.record.record_id).collect();
    for &layer in layers {
        let ids: BTreeSet<u64> = view
            .samples()
            .iter()
            .filter(|s| s.record.layer_index == layer)
            .map(|s| s.record.record_id)
            .collect();
        if ids != all_ids {
            let missing = all_ids.difference(&ids).count();
            return Err(Error::invalid(format!("layer {layer} is missing {missing} records")));
        }
    }
    let assignment = match manifest_assignment(view) {
        Some(a) => a,
        None => {
            let items: Vec<(u64, Option<u8>)> =
                view.samples().iter().map(|s| (s.record.record_id, s.entry.label)).collect();
            let spec = SplitSpec {
                stratify: split_spec.stratify && targets == TargetSpec::Labels,
                ..*split_spec
            };
            assign_splits(&items, &spec)?
        }
    };
    let mut out = BTreeMap::new();
    for &layer in layers {
        let lv = view.retain(&format!("layer={layer}"), |s| s.record.layer_index == layer);
        let [tr, _, te] = partition(&lv, &assignment);
        if te.is_empty() {
            return Err(Error::invalid("the test split is empty"));
        }
        let (train_data, rest, _) = targets.build(&tr, &[&te])?;
        let params = probe::init_params(
            view.hidden_dim(),
            shape.hidden_dim,
            config.mode.output_dim(),
            shape.backbone,
            config.seed,
        )?;
        let (params, _) = train(config, &train_data, None, params)?;
        let report = evaluate(&params, &rest[0], config.mode)?;
        log::info!("layer {layer}: {report:?}");
        out.insert(layer, report);
    }
    Ok(out)
}
