use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use halprobe::labeling::{FormKind, Grouping, TargetMetric};
use halprobe::probe::{Backbone, Mode};
use halprobe::store::Filter;
use serde::Serialize;

/// Hallucination-risk probing over LLM internal states.
///
/// Every subcommand prints a JSON run report on stdout. Exit status is 0 on
/// success, 1 on invalid input and 2 on unreadable or malformed files.
#[derive(Debug, Parser)]
#[command(name = "halprobe", version)]
pub struct Cli {
    /// Leave wall-clock timings out of every report so reruns are byte-identical.
    #[arg(long, global = true)]
    pub no_timestamps: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive binary labels from metric scores and assign splits.
    Label(LabelArgs),
    /// Train a probe on one layer.
    Train(TrainArgs),
    /// Score a saved probe.
    Eval(EvalArgs),
    /// Train and score one probe per layer.
    SweepLayers(SweepArgs),
    /// Rank neurons by mutual information with the label and export the top k.
    SelectNeurons(SelectArgs),
    /// Fit and score the perplexity-threshold baseline.
    PplBaseline(PplArgs),
    /// Score yes/no replies from a prompting baseline.
    PromptBaseline(PromptArgs),
    /// Render token-score heatmaps.
    Attribute(AttributeArgs),
    /// Per-task hallucination rates.
    Rates(RatesArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Label(_) => "label",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::SweepLayers(_) => "sweep-layers",
            Command::SelectNeurons(_) => "select-neurons",
            Command::PplBaseline(_) => "ppl-baseline",
            Command::PromptBaseline(_) => "prompt-baseline",
            Command::Attribute(_) => "attribute",
            Command::Rates(_) => "rates",
        }
    }
}

fn parse_filter(s: &str) -> Result<String, String> {
    s.parse::<Filter>().map(|f| f.to_string()).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingArg {
    #[value(name = "per_task")]
    PerTask,
    Global,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Self {
        match g {
            GroupingArg::PerTask => Grouping::PerTask,
            GroupingArg::Global => Grouping::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneArg {
    Gated,
    Standard,
}

impl From<BackboneArg> for Backbone {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Gated => Backbone::Gated,
            BackboneArg::Standard => Backbone::Standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Cls,
    Reg,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cls => Mode::Classification,
            ModeArg::Reg => Mode::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    #[value(name = "rouge_l")]
    RougeL,
    #[value(name = "nli_entail")]
    NliEntail,
    Questeval,
}

impl From<MetricArg> for TargetMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::RougeL => TargetMetric::RougeL,
            MetricArg::NliEntail => TargetMetric::NliEntail,
            MetricArg::Questeval => TargetMetric::Questeval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormArg {
    Absolute,
    #[value(name = "minmax_normalized", alias = "minmax")]
    MinmaxNormalized,
    Rank,
}

impl From<FormArg> for FormKind {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Absolute => FormKind::Absolute,
            FormArg::MinmaxNormalized => FormKind::MinmaxNormalized,
            FormArg::Rank => FormKind::Rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Html,
    Ansi,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Activation file (.actv).
    #[arg(long)]
    pub activations: PathBuf,
    /// Manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Keep only samples with FIELD=VALUE (task, dataset, model, layer,
    /// split, label). Repeat for AND.
    #[arg(long = "filter", value_name = "FIELD=VALUE", value_parser = parse_filter)]
    pub filters: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TargetArgs {
    /// cls trains on binary labels, reg on a golden score.
    #[arg(long, value_enum, default_value = "cls")]
    pub mode: ModeArg,
    /// Metric behind the golden score (reg only).
    #[arg(long, value_enum)]
    pub target_metric: Option<MetricArg>,
    /// Golden-score form, fitted on the train split (reg only; default absolute).
    #[arg(long, value_enum)]
    pub target_form: Option<FormArg>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Peak learning rate, decayed linearly to zero.
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    /// AdamW decoupled weight decay.
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Seeds initialization and batch order.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "gated")]
    pub backbone: BackboneArg,
    /// Probe hidden width.
    #[arg(long, default_value_t = 11008)]
    pub hidden: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pool metric medians per task or over the whole manifest.
    #[arg(long, value_enum, default_value = "per_task")]
    pub grouping: GroupingArg,
    /// Seed for the train/val/test assignment of unsplit manifests.
    #[arg(long, default_value_t = 42)]
    pub split_seed: u64,
    /// Labeled manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub layer: u16,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    /// Probe parameter file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Probe parameter file.
    #[arg(long)]
    pub probe: PathBuf,
    /// Restrict to one layer; same as --filter layer=L.
    #[arg(long)]
    pub layer: Option<u16>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Metric behind the golden score, for regression probes.
    #[arg(long, value_enum)]
    pub target_metric: Option<MetricArg>,
    /// Golden-score form for regression probes (default absolute).
    #[arg(long, value_enum)]
    pub target_form: Option<FormArg>,
    /// Evaluation report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Layers as a..b (exclusive), a..=b or a comma list.
    #[arg(long)]
    pub layers: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    /// Per-layer report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub layer: u16,
    /// Number of top neurons to export.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Neighbors used by the MI estimator.
    #[arg(long, default_value_t = halprobe::feature_select::DEFAULT_NEIGHBORS)]
    pub neighbors: usize,
    /// Seed for the tie-breaking jitter.
    #[arg(long, default_value_t = halprobe::feature_select::DEFAULT_JITTER_SEED)]
    pub seed: u64,
    /// Neuron table; .json writes JSON, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PplArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "filter", value_name = "FIELD=VALUE", value_parser = parse_filter)]
    pub filters: Vec<String>,
    /// Threshold model and test report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PromptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSONL of {record_id, reply}.
    #[arg(long)]
    pub replies: PathBuf,
    #[arg(long = "filter", value_name = "FIELD=VALUE", value_parser = parse_filter)]
    pub filters: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AttributeArgs {
    /// JSONL of {record_id, tokens, scores, reply?, hallucinated_spans?}.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_enum, default_value = "html")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RatesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "filter", value_name = "FIELD=VALUE", value_parser = parse_filter)]
    pub filters: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}
