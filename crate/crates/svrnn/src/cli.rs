//! The `svrnn` command line.
//!
//! Settings can also come from a `key = value` file passed with
//! `--config`; keys are the long flag names. Precedence, lowest first:
//! built-in defaults, the config file, flags on the command line. Every
//! command writes the fully resolved settings to `run_config.txt` in its
//! output directory, in the same format, so `--config run_config.txt`
//! repeats the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use svrnn_core::data::{
    oracle_filter, preprocess, synth_generate, MaskLevel, MaskMode, OracleRecord, PreprocessOptions, RootCentering,
    Sequence, SynthSpec,
};
use svrnn_core::gradcheck::{check_model, run_suite, tiny_sequence, CheckResult, GradReport};
use svrnn_core::model::{GroupSpec, Route};
use svrnn_core::optim::OptimizerKind;
use svrnn_core::tasks::{
    accumulated_sq_error, detect_entity, detect_segments, forecast, segments_from_labels, ForecastOptions,
};
use svrnn_core::trainer::{EvalOptions, MaskPolicy, Task, TrainConfig};
use svrnn_core::{Mode, ModelSpec};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_key_values, render_key_values};
use crate::error::{Error, Result};
use crate::folds::FoldManifest;
use crate::format::{load_sequences, save_sequences, to_lines, write_json, write_text};
use crate::report::{forecast_csv, report_csv, report_text, timeline_header, timeline_rows};
use crate::run::{self, RunOptions};

pub const RUN_CONFIG: &str = "run_config.txt";

#[derive(Parser, Debug)]
#[command(name = "svrnn", version, about = "Semi-supervised variational recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a sequence file.
    #[command(args_override_self = true)]
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a sequence file.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Per-frame label timeline of each recording.
    #[command(args_override_self = true)]
    Detect(DetectArgs),
    /// Roll out future frames after each recording.
    #[command(args_override_self = true)]
    Forecast(ForecastArgs),
    /// Generate a switching-dynamics dataset with its true modes.
    #[command(args_override_self = true)]
    SynthData(SynthArgs),
    /// Compare analytic gradients with finite differences.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Apply frame preprocessing to a sequence file.
    #[command(args_override_self = true)]
    Preprocess(PreprocessArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Detect(_) => "detect",
            Command::Forecast(_) => "forecast",
            Command::SynthData(_) => "synth-data",
            Command::Gradcheck(_) => "gradcheck",
            Command::Preprocess(_) => "preprocess",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 32-wide networks, dim_z 8, one recurrent layer.
    Small,
    /// 256-wide networks, one recurrent layer, decoder 512.
    Detection,
    /// 516-wide networks, three recurrent layers.
    Skeleton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskModeChoice {
    PerFrame,
    TailOnly,
    Interval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskLevelChoice {
    Child,
    Parent,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteChoice {
    Posterior,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observations {
    Sample,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TinyModel {
    All,
    Flat,
    Hierarchical,
    MultiEntity,
}

/// Model architecture overrides. Unset values come from the preset and
/// the data.
#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// JSON model spec; replaces the preset and the data-derived sizes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Small)]
    pub preset: Preset,
    /// Child label classes (default: largest observed label + 1).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Parent label classes; makes the model hierarchical.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_classes: Option<usize>,
    /// Label classes of the non-primary entities.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub other_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim_z: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lift_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Weight of the supervised terms (default: number of features).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    /// Decode frame differences instead of frames.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_samples: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recordings evaluated at every evaluation point.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
    /// Fold manifest; trains on every fold except `--fold`.
    #[arg(long, requires = "fold")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Learning rate (default 0.001; 0.0005 with --motion).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Use the motion-synthesis learning rate.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub motion: bool,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerChoice::Adam)]
    pub optimizer: OptimizerChoice,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Steps between evaluations and checkpoints (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    #[arg(long, value_delimiter = ',', default_value = "detect")]
    pub eval_tasks: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub eval_repeats: usize,
    /// Fraction of labels hidden before training.
    #[arg(long, default_value_t = 0.0)]
    pub mask_fraction: f64,
    #[arg(long, value_enum, default_value_t = MaskModeChoice::PerFrame)]
    pub mask_mode: MaskModeChoice,
    /// Labeled final frames per recording with `--mask-mode tail-only`.
    #[arg(long, default_value_t = 7)]
    pub mask_tail: usize,
    #[arg(long, value_enum, default_value_t = MaskLevelChoice::Child)]
    pub mask_level: MaskLevelChoice,
    /// Continue the run stored in a checkpoint. The checkpoint's model and
    /// training settings are used; `--epochs` may extend the run.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Stop after this many updates in total.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only fold `--fold` of this manifest.
    #[arg(long, requires = "fold")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    /// Comma-separated: detect, anticipate, classify, forecast, bound.
    #[arg(long, value_delimiter = ',', default_value = "detect")]
    pub tasks: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    #[arg(long, default_value_t = 3)]
    pub tail: usize,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub entity: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ForecastArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Recordings to continue.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entities fed with ground truth during the rollout (repeatable).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub clamp_entity: Vec<usize>,
    /// Use only the first N frames of each recording as the prefix; the
    /// remaining frames serve as ground truth.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefix: Option<usize>,
    /// Ground-truth recordings (same ids) for clamping and errors.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RouteChoice::Posterior)]
    pub route: RouteChoice,
    #[arg(long, value_enum, default_value_t = Observations::Sample)]
    pub observations: Observations,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub keep_samples: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator spec; replaces the shape flags below.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub modes: usize,
    #[arg(long, default_value_t = 6)]
    pub dim_x: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.9)]
    pub stay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 60)]
    pub min_len: usize,
    #[arg(long, default_value_t = 60)]
    pub max_len: usize,
    /// Fraction of labels left unobserved.
    #[arg(long, default_value_t = 0.25)]
    pub unobserved: f64,
    #[arg(long, default_value_t = 250)]
    pub sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON model spec to check instead of the built-in tiny models.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TinyModel::All)]
    pub model: TinyModel,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Random draws per tape primitive.
    #[arg(long, default_value_t = 10)]
    pub primitive_seeds: u64,
    /// Timesteps of the unrolled model.
    #[arg(long, default_value_t = 2)]
    pub steps: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Root joint subtracted from every joint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_root: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub root_coords: usize,
    #[arg(long, default_value_t = 3)]
    pub smooth: usize,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub residuals: bool,
}

/// Runs the CLI and maps the outcome to an exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", serde_json::json!({ "status": "error", "kind": e.kind(), "message": e.to_string() }));
            if matches!(e, Error::Usage(_)) {
                1
            } else {
                2
            }
        }
    }
}

/// Inserts the settings of `--config FILE` right after the subcommand, so
/// flags given on the command line override them.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path: Option<PathBuf> = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    if argv.len() < 2 {
        return Ok(argv);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sub = argv[1].to_string_lossy().to_string();
    let mut merged = vec![argv[0].clone(), argv[1].clone()];
    for (k, v) in parse_key_values(&text, &path)? {
        if k == "command" {
            if v != sub {
                return Err(Error::Usage(format!("{} is a `{v}` configuration, not `{sub}`", path.display())));
            }
            continue;
        }
        if k == "config" {
            return Err(Error::Usage("configuration files cannot include other files".into()));
        }
        merged.push(format!("--{k}").into());
        merged.push(v.into());
    }
    merged.extend(argv.into_iter().skip(2));
    Ok(merged)
}

/// `key = value` lines of a resolved argument struct.
fn resolved_pairs<T: Serialize>(command: &str, args: &T) -> Vec<(String, String)> {
    let mut pairs = vec![("command".to_string(), command.to_string())];
    fn walk(v: &serde_json::Value, pairs: &mut Vec<(String, String)>) {
        if let serde_json::Value::Object(map) = v {
            for (k, v) in map {
                match v {
                    serde_json::Value::Object(_) => walk(v, pairs),
                    serde_json::Value::Array(items) => {
                        let parts: Vec<String> = items.iter().map(scalar).collect();
                        pairs.push((k.replace('_', "-"), parts.join(",")));
                    }
                    _ => pairs.push((k.replace('_', "-"), scalar(v))),
                }
            }
        }
    }
    fn scalar(v: &serde_json::Value) -> String {
        match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
    walk(&serde_json::to_value(args).expect("serializable"), &mut pairs);
    pairs
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run_config<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<()> {
    write_text(dir.join(RUN_CONFIG), &render_key_values(&resolved_pairs(command, args)))
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train((**a).clone()),
        Command::Eval(a) => cmd_eval(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::SynthData(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Preprocess(a) => cmd_preprocess(a),
    }
    .map_err(|e| match e {
        Error::Core(svrnn_core::Error::InvalidArgument(m)) => Error::Usage(format!("{}: {m}", command.name())),
        e => e,
    })
}

fn parse_tasks(names: &[String]) -> Result<Vec<Task>> {
    names
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            Task::parse(s).ok_or_else(|| {
                Error::Usage(format!("unknown task `{s}` (expected detect, anticipate, classify, forecast or bound)"))
            })
        })
        .collect()
}

fn max_label(values: impl Iterator<Item = Option<usize>>) -> Option<usize> {
    values.flatten().max()
}

/// Builds the model spec from the preset, the data and the overrides, and
/// writes the resolved sizes back into `m`.
pub fn resolve_spec(m: &mut ModelArgs, data: &[Sequence]) -> Result<ModelSpec> {
    let mut spec = if let Some(path) = &m.spec {
        crate::format::read_json::<ModelSpec>(path)?
    } else {
        let first = data.first().ok_or_else(|| Error::Usage("training set is empty".into()))?;
        let dim_x = first.entities[0].dim();
        let classes = match m.classes {
            Some(c) => c,
            None => {
                max_label(data.iter().flat_map(|s| (0..s.len()).map(move |t| s.child_label(0, t))))
                    .ok_or_else(|| Error::Usage("no observed labels; pass --classes".into()))?
                    + 1
            }
        };
        let parents = m.parent_classes.or_else(|| {
            max_label(data.iter().flat_map(|s| (0..s.len()).map(move |t| s.parent_label(0, t)))).map(|c| c + 1)
        });
        let mut spec = match m.preset {
            Preset::Small => ModelSpec::flat(dim_x, classes).with_width(32, 8, 1),
            Preset::Detection => ModelSpec::detection_preset(dim_x, classes),
            Preset::Skeleton => ModelSpec::skeleton_preset(dim_x, classes),
        };
        spec.groups[0].name = first.entities[0].group.clone();
        if let Some(c) = parents {
            spec = spec.with_parent(c);
        }
        if first.entities.len() > 1 {
            let other = &first.entities[1];
            if first.entities[1..].iter().any(|e| e.group != other.group || e.dim() != other.dim()) {
                return Err(Error::Usage("more than one kind of additional entity; pass --spec".into()));
            }
            let other_classes = match m.other_classes {
                Some(c) => c,
                None => max_label(data.iter().flat_map(|s| {
                    (1..s.entities.len()).flat_map(move |e| (0..s.len()).map(move |t| s.child_label(e, t)))
                }))
                .map_or(1, |c| c + 1),
            };
            let group = GroupSpec {
                name: other.group.clone(),
                dim_x: other.dim(),
                dim_y: other_classes,
                dim_c: spec.groups[0].dim_c,
            };
            spec = spec.with_others(group, first.entities.len() - 1);
            m.other_classes = Some(other_classes);
        }
        m.classes = Some(classes);
        m.parent_classes = parents;
        spec
    };
    macro_rules! apply {
        ($($arg:ident => $field:ident),*) => {$(
            match m.$arg {
                Some(v) => spec.$field = v,
                None => m.$arg = Some(spec.$field),
            }
        )*};
    }
    apply!(dim_z => dim_z, lift_width => lift_width, net_width => net_width, decoder_width => decoder_width,
        hidden_width => hidden_width, layers => recurrent_layers, temperature => temperature, alpha => alpha,
        dropout => dropout_rate, residual => residual_mode, latent_samples => latent_samples);
    spec.validate()?;
    Ok(spec)
}

fn train_config(a: &mut TrainArgs) -> TrainConfig {
    let base = if a.motion {
        TrainConfig::motion_synthesis()
    } else {
        TrainConfig::default()
    };
    let lr = *a.lr.get_or_insert(base.learning_rate);
    let optimizer = match a.optimizer {
        OptimizerChoice::Adam => OptimizerKind::Adam {
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        },
        OptimizerChoice::Sgd => OptimizerKind::Sgd,
    };
    let mask = (a.mask_fraction > 0.0 || a.mask_mode == MaskModeChoice::TailOnly).then_some(MaskPolicy {
        fraction: a.mask_fraction,
        mode: match a.mask_mode {
            MaskModeChoice::PerFrame => MaskMode::PerFrame,
            MaskModeChoice::TailOnly => MaskMode::TailOnly(a.mask_tail),
            MaskModeChoice::Interval => MaskMode::Interval,
        },
        level: match a.mask_level {
            MaskLevelChoice::Child => MaskLevel::Child,
            MaskLevelChoice::Parent => MaskLevel::Parent,
            MaskLevelChoice::Both => MaskLevel::Both,
        },
    });
    TrainConfig {
        learning_rate: lr,
        clip_threshold: a.clip,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        optimizer,
        eval_every: a.eval_every,
        mask,
    }
}

fn split_folds(data: Vec<Sequence>, folds: &Option<PathBuf>, fold: Option<usize>) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    match (folds, fold) {
        (Some(path), Some(k)) => FoldManifest::load(path)?.split(&data, k),
        _ => Ok((data, Vec::new())),
    }
}

fn cmd_train(mut a: TrainArgs) -> Result<()> {
    let (train, held_out) = split_folds(load_sequences(&a.data)?, &a.folds, a.fold)?;
    let eval_set = match &a.eval_data {
        Some(p) => load_sequences(p)?,
        None => held_out,
    };
    let eval_tasks = parse_tasks(&a.eval_tasks)?;
    let opts_eval = EvalOptions {
        repeats: a.eval_repeats,
        seed: a.seed,
        ..EvalOptions::default()
    };
    prepare_out(&a.out)?;
    let (ck, log) = if let Some(path) = a.resume.clone() {
        let mut ck = Checkpoint::load(&path)?;
        let cfg = ck
            .train_config
            .as_mut()
            .ok_or_else(|| Error::Usage("checkpoint carries no training configuration".into()))?;
        cfg.epochs = a.epochs;
        write_json(a.out.join("spec.json"), &ck.spec)?;
        write_run_config(&a.out, "train", &a)?;
        let opts = RunOptions {
            out_dir: Some(&a.out),
            eval_set: (!eval_set.is_empty()).then_some(&eval_set[..]),
            eval_tasks,
            eval_options: opts_eval,
            stop_at: a.stop_at,
        };
        run::resume(&ck, &train, &opts)?
    } else {
        let spec = resolve_spec(&mut a.model, &train)?;
        let config = train_config(&mut a);
        write_json(a.out.join("spec.json"), &spec)?;
        write_run_config(&a.out, "train", &a)?;
        let opts = RunOptions {
            out_dir: Some(&a.out),
            eval_set: (!eval_set.is_empty()).then_some(&eval_set[..]),
            eval_tasks,
            eval_options: opts_eval,
            stop_at: a.stop_at,
        };
        run::train(&spec, &config, &train, &opts)?
    };
    let last = log.rows.last().map(|r| r.record.loss);
    println!(
        "trained to step {} ({} new steps), final loss {}",
        ck.step(),
        log.rows.len(),
        last.map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    println!("checkpoint: {}", a.out.join(run::FINAL_CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_sequences(&a.data)?;
    let data = match (&a.folds, a.fold) {
        (Some(p), Some(k)) => FoldManifest::load(p)?.split(&data, k)?.1,
        _ => data,
    };
    let tasks = parse_tasks(&a.tasks)?;
    let opts = EvalOptions {
        repeats: a.repeats,
        seed: a.seed,
        horizon: a.horizon,
        tail_frames: a.tail,
        forecast_samples: a.samples,
    };
    prepare_out(&a.out)?;
    write_run_config(&a.out, "eval", a)?;
    let report = svrnn_core::trainer::evaluate(&ck.model()?, &ck.params, &data, &tasks, &opts)?;
    write_text(a.out.join("report.csv"), &report_csv(&report))?;
    print!("{}", report_text(&report));
    Ok(())
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_sequences(&a.data)?;
    prepare_out(&a.out)?;
    write_run_config(&a.out, "detect", a)?;
    let n_class = ck.spec.group_of(a.entity.min(ck.spec.n_entities() - 1)).dim_y;
    let mut timeline = timeline_header(n_class);
    let mut segments = String::from("recording,start,end,label,detected,hit\n");
    for seq in &data {
        let tl = detect_entity(&model, &ck.params, seq, a.entity)?;
        timeline.push_str(&timeline_rows(&seq.id, &tl));
        let labels: Vec<Option<usize>> = (0..seq.len()).map(|t| seq.child_label(a.entity, t)).collect();
        for r in detect_segments(&tl, &segments_from_labels(&labels))? {
            let s = r.segment;
            let detected = r.detected.map_or(String::new(), |k| k.to_string());
            segments.push_str(&format!("{},{},{},{},{detected},{}\n", seq.id, s.start, s.end, s.label, r.hit));
        }
    }
    write_text(a.out.join("timeline.csv"), &timeline)?;
    write_text(a.out.join("segments.csv"), &segments)?;
    println!("{} recordings -> {}", data.len(), a.out.join("timeline.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct ForecastRecord<'a> {
    id: &'a str,
    prefix_len: usize,
    #[serde(flatten)]
    forecast: &'a svrnn_core::tasks::TrajectoryForecast,
}

fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_sequences(&a.data)?;
    let truth_set = match &a.truth {
        Some(p) => Some(load_sequences(p)?),
        None => None,
    };
    let opts = ForecastOptions {
        horizon: a.horizon,
        n_samples: a.samples,
        seed: a.seed,
        clamp: a.clamp_entity.clone(),
        route: match a.route {
            RouteChoice::Posterior => Route::Posterior,
            RouteChoice::Prior => Route::Prior,
        },
        sample_observations: a.observations == Observations::Sample,
        keep_samples: a.keep_samples,
    };
    prepare_out(&a.out)?;
    write_run_config(&a.out, "forecast", a)?;
    let mut lines = Vec::new();
    let mut csv = String::from("recording,frame,entity,dim,value\n");
    let mut errors = String::from("recording,accumulated_sq_error,frozen_pose_error\n");
    for seq in &data {
        let cut = a.prefix.unwrap_or(seq.len()).min(seq.len());
        let truth = match &truth_set {
            Some(set) => Some(
                set.iter()
                    .find(|s| s.id == seq.id)
                    .ok_or_else(|| Error::Usage(format!("no ground truth for recording `{}`", seq.id)))?,
            ),
            None => (cut < seq.len()).then_some(seq),
        };
        let f = forecast(&model, &ck.params, &seq.prefix(cut), truth, &opts)?;
        csv.push_str(&forecast_csv(&seq.id, &f));
        if let Some(tr) = truth {
            let avail = tr.len().saturating_sub(cut).min(a.horizon);
            if avail > 0 && cut > 0 {
                let frames = |t: usize| -> Vec<Vec<f64>> { tr.entities.iter().map(|e| e.frames[t].clone()).collect() };
                let target: Vec<_> = (cut..cut + avail).map(frames).collect();
                let still = vec![frames(cut - 1); avail];
                errors.push_str(&format!(
                    "{},{},{}\n",
                    seq.id,
                    accumulated_sq_error(&f.mean, &target, avail)?,
                    accumulated_sq_error(&still, &target, avail)?
                ));
            }
        }
        lines.push(serde_json::to_string(&ForecastRecord { id: &seq.id, prefix_len: cut, forecast: &f }).expect("serializable"));
    }
    let mut jsonl = lines.join("\n");
    jsonl.push('\n');
    write_text(a.out.join("forecast.jsonl"), &jsonl)?;
    write_text(a.out.join("forecast.csv"), &csv)?;
    if errors.lines().count() > 1 {
        write_text(a.out.join("forecast_errors.csv"), &errors)?;
    }
    println!("{} forecasts of {} frames -> {}", data.len(), a.horizon, a.out.join("forecast.jsonl").display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => crate::format::read_json::<SynthSpec>(p)?,
        None => {
            let mut s = SynthSpec::switching(a.modes, a.dim_x, a.separation, a.noise, a.stay);
            s.init_scale = a.init_scale;
            s.min_len = a.min_len;
            s.max_len = a.max_len;
            s.unobserved_fraction = a.unobserved;
            s
        }
    };
    let (data, oracle) = synth_generate(&spec, a.sequences, a.seed)?;
    prepare_out(&a.out)?;
    write_run_config(&a.out, "synth-data", a)?;
    save_sequences(a.out.join("data.jsonl"), &data)?;
    write_text(a.out.join("oracle.jsonl"), &to_lines::<OracleRecord>(&oracle))?;
    write_json(a.out.join("synth_spec.json"), &spec)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (seq, rec) in data.iter().zip(&oracle) {
        for (row, &mode) in oracle_filter(&spec, seq)?.iter().zip(&rec.modes) {
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hit += (best == mode) as usize;
            n += 1;
        }
    }
    let acc = if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    write_text(a.out.join("oracle_accuracy.txt"), &format!("{acc}\n"))?;
    println!("{} recordings, {n} frames, forward-filter accuracy {acc:.4}", data.len());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = if let Some(p) = &a.spec {
        let spec: ModelSpec = crate::format::read_json(p)?;
        let seq = tiny_sequence(&spec, a.steps, a.seed);
        GradReport {
            epsilon: a.epsilon,
            checks: vec![CheckResult {
                name: "model.custom".into(),
                max_error: check_model(&spec, &seq, a.seed, Mode::Train, a.epsilon)?,
            }],
        }
    } else {
        let mut r = run_suite(a.seed, a.primitive_seeds, a.epsilon)?;
        let keep = |name: &str| match a.model {
            TinyModel::All => true,
            TinyModel::Flat => !name.starts_with("model.") || name.starts_with("model.flat"),
            TinyModel::Hierarchical => !name.starts_with("model.") || name == "model.hierarchical",
            TinyModel::MultiEntity => !name.starts_with("model.") || name == "model.multi_entity",
        };
        r.checks.retain(|c| keep(&c.name));
        r
    };
    let mut csv = String::from("check,max_error\n");
    for c in &report.checks {
        csv.push_str(&format!("{},{:e}\n", c.name, c.max_error));
    }
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        write_run_config(dir, "gradcheck", a)?;
        write_text(dir.join("gradcheck.csv"), &csv)?;
    }
    print!("{csv}");
    let max = report.max_error();
    println!("max error {max:e} (tolerance {:e})", a.tolerance);
    if report.passes(a.tolerance) {
        Ok(())
    } else {
        Err(Error::Core(svrnn_core::Error::InvalidData(format!(
            "gradient check failed: max error {max:e} >= {:e}",
            a.tolerance
        ))))
    }
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let data = load_sequences(&a.data)?;
    let opts = PreprocessOptions {
        center_root: a.center_root.map(|joint| RootCentering {
            joint,
            coords: a.root_coords,
        }),
        smooth_window: a.smooth,
        residuals: a.residuals,
    };
    let out: Vec<Sequence> = data.iter().map(|s| preprocess(s, &opts)).collect::<std::result::Result<_, _>>()?;
    prepare_out(&a.out)?;
    write_run_config(&a.out, "preprocess", a)?;
    save_sequences(a.out.join("data.jsonl"), &out)?;
    if a.residuals {
        let firsts: Vec<serde_json::Value> = data
            .iter()
            .map(|s| serde_json::json!({ "id": s.id, "first_frames": s.entities.iter().map(|e| e.frames.first().cloned().unwrap_or_default()).collect::<Vec<_>>() }))
            .collect();
        write_text(a.out.join("first_frames.jsonl"), &to_lines(&firsts))?;
    }
    println!("{} recordings -> {}", out.len(), a.out.join("data.jsonl").display());
    Ok(())
}
