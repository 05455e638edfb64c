use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use halprobe::attribution::{load_token_scores_path, render_heatmap, HeatmapFormat};
use halprobe::baselines::{apply_threshold, fit_ppl_threshold, parse_prompt_verdicts};
use halprobe::feature_select::{export_top_neurons, rank_features};
use halprobe::labeling::{assign_binary_labels, compute_medians, hallucination_rate, TaskLabelCounts};
use halprobe::metrics::{classification_report, EvalReport};
use halprobe::probe::{self, Mode};
use halprobe::store::{
    join, open_activation_path, DatasetView, Filter, FilterField, Manifest, ManifestEntry, Split,
};
use halprobe::trainer::{self, assign_splits, partition, ProbeShape, SplitSpec, TargetSpec, TrainConfig};
use halprobe::Error;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::args::*;
use crate::report::{path_string, strip_timings, to_value, write_json, CliError, CliResult};

pub struct Ctx {
    pub no_timestamps: bool,
}

impl Ctx {
    fn json<T: serde::Serialize>(&self, v: &T) -> Value {
        let mut v = to_value(v);
        if self.no_timestamps {
            strip_timings(&mut v);
        }
        v
    }
}

/// What a subcommand hands back for its run report.
#[derive(Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub reports: Option<Value>,
    pub details: Map<String, Value>,
}

impl Outcome {
    fn detail(&mut self, key: &str, v: Value) {
        self.details.insert(key.to_string(), v);
    }
}

pub fn run(ctx: &Ctx, cmd: &Command) -> CliResult<Outcome> {
    match cmd {
        Command::Label(a) => label(a),
        Command::Train(a) => train(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::SweepLayers(a) => sweep(ctx, a),
        Command::SelectNeurons(a) => select_neurons(a),
        Command::PplBaseline(a) => ppl_baseline(ctx, a),
        Command::PromptBaseline(a) => prompt_baseline(ctx, a),
        Command::Attribute(a) => attribute(a),
        Command::Rates(a) => rates(a),
    }
}

fn parse_filters(raw: &[String]) -> CliResult<Vec<Filter>> {
    Ok(raw.iter().map(|f| f.parse()).collect::<Result<_, Error>>()?)
}

fn load_view(data: &DataArgs, layer: Option<u16>) -> CliResult<DatasetView> {
    let reader = open_activation_path(&data.activations)?;
    let d = reader.header().hidden_dim as usize;
    let records = reader.read_all()?;
    let manifest = Manifest::read_path(&data.manifest)?;
    let (view, _) = join(records, d, &manifest)?;
    let mut filters = parse_filters(&data.filters)?;
    if let Some(l) = layer {
        filters.push(Filter::new(FilterField::Layer, l.to_string()));
    }
    Ok(view.filter(&filters)?)
}

fn filtered_entries(manifest: &Manifest, raw: &[String]) -> CliResult<Vec<ManifestEntry>> {
    let filters = parse_filters(raw)?;
    let mut out = Vec::new();
    for e in &manifest.entries {
        let mut keep = true;
        for f in &filters {
            keep &= f.matches_entry(e)?;
        }
        if keep {
            out.push(e.clone());
        }
    }
    Ok(out)
}

fn target_spec(mode: Mode, metric: Option<MetricArg>, form: Option<FormArg>) -> CliResult<TargetSpec> {
    match (mode, metric) {
        (Mode::Classification, None) if form.is_none() => Ok(TargetSpec::Labels),
        (Mode::Classification, _) => Err(CliError::usage(
            "--target-metric and --target-form only apply to regression (--mode reg)",
        )),
        (Mode::Regression, None) => Err(CliError::usage("--mode reg requires --target-metric")),
        (Mode::Regression, Some(m)) => Ok(TargetSpec::Golden {
            metric: m.into(),
            form: form.unwrap_or(FormArg::Absolute).into(),
        }),
    }
}

/// Classification drops the entries the labeling rule discarded.
fn usable(view: DatasetView, targets: TargetSpec) -> CliResult<DatasetView> {
    if targets != TargetSpec::Labels {
        return Ok(view);
    }
    let labeled = view.retain("labeled", |s| s.entry.label.is_some());
    if labeled.len() < view.len() {
        log::info!("{} unlabeled samples skipped", view.len() - labeled.len());
    }
    if labeled.is_empty() && !view.is_empty() {
        return Err(CliError::usage("no sample carries a label; run `halprobe label` first"));
    }
    Ok(labeled)
}

fn nonempty(view: &DatasetView) -> CliResult<()> {
    if view.is_empty() {
        return Err(CliError::usage("no samples match the given activations, manifest and filters"));
    }
    Ok(())
}

/// The manifest's split when every entry has one, otherwise a fresh default
/// assignment. A manifest that splits only some entries is rejected.
fn assignment<'a>(
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
    stratify: bool,
) -> CliResult<BTreeMap<u64, Split>> {
    let entries: Vec<&ManifestEntry> = entries.into_iter().collect();
    let split = entries.iter().filter(|e| e.split.is_some()).count();
    if split == entries.len() {
        return Ok(entries.iter().filter_map(|e| e.split.map(|s| (e.record_id, s))).collect());
    }
    if split > 0 {
        return Err(CliError::usage(format!(
            "{split} of {} entries carry a split; assign all or none",
            entries.len()
        )));
    }
    let items: Vec<(u64, Option<u8>)> = entries.iter().map(|e| (e.record_id, e.label)).collect();
    let spec = SplitSpec {
        stratify,
        ..SplitSpec::default()
    };
    Ok(assign_splits(&items, &spec)?)
}

fn view_splits(view: &DatasetView, targets: TargetSpec) -> CliResult<[DatasetView; 3]> {
    let a = assignment(view.samples().iter().map(|s| &*s.entry), targets == TargetSpec::Labels)?;
    Ok(partition(view, &a))
}

fn single_layer(view: &DatasetView) -> CliResult<()> {
    let layers = view.layers();
    if layers.len() > 1 {
        return Err(CliError::usage(format!(
            "the view holds layers {layers:?}; pick one with --layer or --filter layer=L"
        )));
    }
    Ok(())
}

fn train_config(fit: &FitArgs, mode: Mode) -> TrainConfig {
    TrainConfig {
        epochs: fit.epochs,
        batch_size: fit.batch,
        base_lr: fit.lr,
        weight_decay: fit.weight_decay,
        seed: fit.seed,
        mode,
        ..TrainConfig::default()
    }
}

fn split_sizes(parts: &[DatasetView; 3]) -> Value {
    json!({"train": parts[0].len(), "val": parts[1].len(), "test": parts[2].len()})
}

fn label(a: &LabelArgs) -> CliResult<Outcome> {
    let manifest = Manifest::read_path(&a.manifest)?;
    let medians = compute_medians(&manifest.entries, a.grouping.into())?;
    let (mut entries, counts) = assign_binary_labels(&manifest.entries, &medians)?;
    let split = entries.iter().filter(|e| e.split.is_some()).count();
    if split == 0 {
        let spec = SplitSpec {
            seed: a.split_seed,
            ..SplitSpec::default()
        };
        let (labeled, discarded): (Vec<_>, Vec<_>) = entries
            .iter()
            .map(|e| (e.record_id, e.label))
            .partition(|(_, l)| l.is_some());
        let mut assigned = assign_splits(&labeled, &spec)?;
        if !discarded.is_empty() {
            let loose = SplitSpec {
                stratify: false,
                ..spec
            };
            assigned.extend(assign_splits(&discarded, &loose)?);
        }
        for e in &mut entries {
            e.split = assigned.get(&e.record_id).copied();
        }
    } else if split < entries.len() {
        return Err(CliError::usage(format!(
            "{split} of {} entries carry a split; assign all or none",
            entries.len()
        )));
    }
    let mut sizes = BTreeMap::new();
    for e in &entries {
        if let Some(s) = e.split {
            *sizes.entry(s.as_str()).or_insert(0usize) += 1;
        }
    }
    Manifest::new(manifest.preamble.clone(), entries)?.write_path(&a.out)?;
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    };
    out.detail("labels", to_value(&counts));
    out.detail("totals", to_value(&counts.totals()));
    out.detail("medians", to_value(&medians));
    out.detail("splits", to_value(&sizes));
    Ok(out)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> CliResult<Outcome> {
    let mode: Mode = a.target.mode.into();
    let targets = target_spec(mode, a.target.target_metric, a.target.target_form)?;
    let view = usable(load_view(&a.data, Some(a.layer))?, targets)?;
    nonempty(&view)?;
    let parts = view_splits(&view, targets)?;
    let [tr, va, _] = &parts;
    let held_out: Vec<&DatasetView> = if va.is_empty() { Vec::new() } else { vec![va] };
    let (train_data, others, _) = targets.build(tr, &held_out)?;
    let config = train_config(&a.fit, mode);
    let params = probe::init_params(view.hidden_dim(), a.fit.hidden, mode.output_dim(), a.fit.backbone.into(), a.fit.seed)?;
    let parameter_count = params.parameter_count();
    let (params, history) = trainer::train(&config, &train_data, others.first(), params)?;
    let bytes = probe::save_params_path(&params, &a.out)?;

    let history = ctx.json(&history);
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    };
    if let Some(p) = &a.history {
        write_json(p, &history)?;
        out.outputs.push(p.clone());
    }
    out.detail("input_dim", json!(view.hidden_dim()));
    out.detail("parameter_count", json!(parameter_count));
    out.detail("probe_bytes", json!(bytes));
    out.detail("samples", split_sizes(&parts));
    out.detail("targets", to_value(&targets));
    out.reports = Some(json!({"history": history}));
    Ok(out)
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> CliResult<Outcome> {
    let params = probe::load_params_path(&a.probe)?;
    let mode = Mode::from_output_dim(params.output_dim())?;
    let targets = match (mode, a.target_metric) {
        (Mode::Regression, None) => {
            return Err(CliError::usage("this regression probe needs --target-metric"));
        }
        _ => target_spec(mode, a.target_metric, a.target_form).map_err(|_| {
            CliError::usage("--target-metric and --target-form only apply to regression probes")
        })?,
    };
    let view = usable(load_view(&a.data, a.layer)?, targets)?;
    nonempty(&view)?;
    single_layer(&view)?;
    let parts = view_splits(&view, targets)?;
    let chosen = match a.split {
        SplitArg::Train => &parts[0],
        SplitArg::Val => &parts[1],
        SplitArg::Test => &parts[2],
        SplitArg::All => &view,
    };
    if chosen.is_empty() {
        return Err(CliError::usage(format!("the {:?} split is empty", a.split)));
    }
    let (_, data, _) = targets.build(&parts[0], &[chosen])?;
    let report = trainer::evaluate(&params, &data[0], mode)?;
    let report = ctx.json(&report);
    write_json(&a.out, &report)?;
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        reports: Some(report),
        ..Outcome::default()
    };
    out.detail("samples", split_sizes(&parts));
    out.detail("mode", to_value(&mode));
    Ok(out)
}

/// `a..b` (exclusive), `a..=b` or a comma list.
pub fn parse_layers(spec: &str) -> CliResult<Vec<u16>> {
    let bad = || CliError::usage(format!("cannot read layer list {spec:?}; use a..b, a..=b or a,b,c"));
    let num = |s: &str| s.trim().parse::<u16>().map_err(|_| bad());
    let layers: Vec<u16> = if let Some((lo, hi)) = spec.split_once("..=") {
        (num(lo)?..=num(hi)?).collect()
    } else if let Some((lo, hi)) = spec.split_once("..") {
        (num(lo)?..num(hi)?).collect()
    } else {
        let mut v = spec.split(',').map(num).collect::<CliResult<Vec<_>>>()?;
        v.sort_unstable();
        v.dedup();
        v
    };
    if layers.is_empty() {
        return Err(CliError::usage(format!("layer list {spec:?} is empty")));
    }
    Ok(layers)
}

fn better(mode: Mode, a: &EvalReport, b: &EvalReport) -> bool {
    match mode {
        Mode::Classification => a.macro_f1 > b.macro_f1,
        Mode::Regression => a.rmse < b.rmse,
    }
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> CliResult<Outcome> {
    let layers = parse_layers(&a.layers)?;
    let mode: Mode = a.target.mode.into();
    let targets = target_spec(mode, a.target.target_metric, a.target.target_form)?;
    let wanted: BTreeSet<u16> = layers.iter().copied().collect();
    let view = load_view(&a.data, None)?.retain("requested layers", |s| wanted.contains(&s.record.layer_index));
    let view = usable(view, targets)?;
    nonempty(&view)?;
    let present = view.layers();
    if let Some(l) = wanted.difference(&present).next() {
        return Err(CliError::usage(format!("layer {l} has no activation records")));
    }
    // Rejects partial manifests the same way train and eval do.
    let first = view.retain("first layer", |s| s.record.layer_index == layers[0]);
    let parts = view_splits(&first, targets)?;
    let shape = ProbeShape {
        backbone: a.fit.backbone.into(),
        hidden_dim: a.fit.hidden,
    };
    let config = train_config(&a.fit, mode);
    let results = trainer::sweep_layers(&config, shape, targets, &view, &layers, &SplitSpec::default())?;
    let mut best: Option<(u16, &EvalReport)> = None;
    for (&l, r) in &results {
        if best.is_none_or(|(_, b)| better(mode, r, b)) {
            best = Some((l, r));
        }
    }
    let per_layer: Map<String, Value> = results.iter().map(|(l, r)| (l.to_string(), ctx.json(r))).collect();
    let doc = json!({"layers": per_layer, "best_layer": best.map(|b| b.0)});
    write_json(&a.out, &doc)?;
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        reports: Some(doc),
        ..Outcome::default()
    };
    out.detail("samples_per_layer", split_sizes(&parts));
    Ok(out)
}

fn select_neurons(a: &SelectArgs) -> CliResult<Outcome> {
    let view = usable(load_view(&a.data, Some(a.layer))?, TargetSpec::Labels)?;
    nonempty(&view)?;
    let labels = view.labels()?;
    let mi = rank_features(&view.features(), &labels, a.neighbors, a.seed)?;
    let table = export_top_neurons(&view, &mi, a.k)?;
    let as_json = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if as_json {
        write_json(&a.out, &table.to_json())?;
    } else {
        let mut w = BufWriter::new(File::create(&a.out)?);
        table.write_csv(&mut w)?;
        w.flush()?;
    }
    let top: Vec<Value> = table.dims.iter().zip(&table.mi).map(|(d, m)| json!({"dim": d, "mi": m})).collect();
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    };
    out.detail("samples", json!(view.len()));
    out.detail("top", Value::Array(top));
    out.detail("constant_dims", json!(mi.constant_dims.len()));
    Ok(out)
}

fn labeled_entries(entries: Vec<ManifestEntry>) -> CliResult<Vec<ManifestEntry>> {
    let labeled: Vec<ManifestEntry> = entries.into_iter().filter(|e| e.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(CliError::usage("no labeled entries; run `halprobe label` first"));
    }
    Ok(labeled)
}

fn entries_in(entries: &[ManifestEntry], split: &BTreeMap<u64, Split>, want: Split) -> Vec<ManifestEntry> {
    entries.iter().filter(|e| split.get(&e.record_id) == Some(&want)).cloned().collect()
}

fn ppl_of(entries: &[ManifestEntry]) -> CliResult<(Vec<f64>, Vec<u8>)> {
    entries
        .iter()
        .map(|e| {
            let ppl = e.ppl.ok_or(Error::MissingField {
                record_id: e.record_id,
                field: "ppl",
            })?;
            Ok((ppl, e.label.expect("labeled entries only")))
        })
        .collect()
}

fn ppl_baseline(ctx: &Ctx, a: &PplArgs) -> CliResult<Outcome> {
    let manifest = Manifest::read_path(&a.manifest)?;
    let entries = labeled_entries(filtered_entries(&manifest, &a.filters)?)?;
    let split = assignment(&entries, true)?;
    let (train_ppl, train_y) = ppl_of(&entries_in(&entries, &split, Split::Train))?;
    let (test_ppl, test_y) = ppl_of(&entries_in(&entries, &split, Split::Test))?;
    let model = fit_ppl_threshold(&train_ppl, &train_y)?;
    let start = Instant::now();
    let preds = apply_threshold(&model, &test_ppl);
    let report = classification_report(&preds, &test_y, start.elapsed().as_secs_f64())?;
    let doc = json!({"model": to_value(&model), "test": ctx.json(&report)});
    write_json(&a.out, &doc)?;
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        reports: Some(doc),
        ..Outcome::default()
    };
    out.detail("samples", json!({"train": train_y.len(), "test": test_y.len()}));
    Ok(out)
}

#[derive(Deserialize)]
struct Reply {
    record_id: u64,
    reply: String,
}

fn read_replies(path: &Path) -> CliResult<HashMap<u64, String>> {
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Reply = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.insert(r.record_id, r.reply).is_some() {
            return Err(Error::DuplicateId(format!("{} in replies", r.record_id)).into());
        }
    }
    Ok(out)
}

fn prompt_baseline(ctx: &Ctx, a: &PromptArgs) -> CliResult<Outcome> {
    let manifest = Manifest::read_path(&a.manifest)?;
    let replies = read_replies(&a.replies)?;
    let mut entries = labeled_entries(filtered_entries(&manifest, &a.filters)?)?;
    let want = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    if let Some(want) = want {
        let split = assignment(&entries, true)?;
        entries = entries_in(&entries, &split, want);
    }
    let (answered, missing): (Vec<&ManifestEntry>, Vec<&ManifestEntry>) =
        entries.iter().partition(|e| replies.contains_key(&e.record_id));
    if !missing.is_empty() {
        log::warn!("{} entries have no reply and are skipped", missing.len());
    }
    if answered.is_empty() {
        return Err(CliError::usage("no reply matches a labeled entry in the chosen split"));
    }
    let texts: Vec<&str> = answered.iter().map(|e| replies[&e.record_id].as_str()).collect();
    let golds: Vec<u8> = answered.iter().map(|e| e.label.expect("labeled entries only")).collect();
    let start = Instant::now();
    let verdicts = parse_prompt_verdicts(&texts);
    let report = classification_report(&verdicts.predictions, &golds, start.elapsed().as_secs_f64())?;
    let doc = json!({"report": ctx.json(&report), "unparseable": verdicts.unparseable, "without_reply": missing.len()});
    write_json(&a.out, &doc)?;
    Ok(Outcome {
        outputs: vec![a.out.clone()],
        reports: Some(doc),
        ..Outcome::default()
    })
}

fn attribute(a: &AttributeArgs) -> CliResult<Outcome> {
    let records = load_token_scores_path(&a.scores)?;
    let format = match a.format {
        FormatArg::Html => HeatmapFormat::Html,
        FormatArg::Ansi => HeatmapFormat::Ansi,
    };
    fs::write(&a.out, render_heatmap(&records, format))?;
    let mut out = Outcome {
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    };
    out.detail("records", json!(records.len()));
    Ok(out)
}

fn rates(a: &RatesArgs) -> CliResult<Outcome> {
    let manifest = Manifest::read_path(&a.manifest)?;
    let entries = filtered_entries(&manifest, &a.filters)?;
    let mut counts: BTreeMap<String, TaskLabelCounts> = BTreeMap::new();
    for e in &entries {
        let c = counts.entry(e.task.clone()).or_default();
        match e.label {
            Some(0) => c.labeled_0 += 1,
            Some(_) => c.labeled_1 += 1,
            None => c.discarded += 1,
        }
    }
    let doc = json!({"rates": to_value(&hallucination_rate(&entries)), "counts": to_value(&counts)});
    write_json(&a.out, &doc)?;
    Ok(Outcome {
        outputs: vec![a.out.clone()],
        reports: Some(doc),
        ..Outcome::default()
    })
}

pub fn output_strings(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| path_string(p)).collect()
}
