//! Command-line surface: `train`, `predict`, `evaluate`, `roc`,
//! `gradcheck` and `version`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 data,
//! 4 training divergence, 5 model format, 6 missing prediction,
//! 7 gradient check failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::codec::{parse_key_values, write_atomic};
use crate::data::raster::encode_png;
use crate::data::{load_split, FundusSample, Split};
use crate::ensemble::{
    load_model, predict_image, train_ensemble, EnsembleConfig, EpochRecord, HyperparamRanges,
    ProbabilityMap, TrainConfig,
};
use crate::error::Error;
use crate::eval::{max_avg_accuracy, roc, Report, RocCurve, ScoredImage};
use crate::gradcheck::{self, Check, TOLERANCE};
use crate::optim::RmsPropConfig;
use crate::tensor::Rng;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_MODEL_FORMAT: u8 = 5;
pub const EXIT_MISSING_PREDICTION: u8 = 6;
pub const EXIT_GRADCHECK: u8 = 7;

/// A failed command: exit code plus the message for standard error.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Ingestion { .. } | Error::Data(_) | Error::Undefined(_) => EXIT_DATA,
            Error::Training { .. } => EXIT_DIVERGED,
            Error::Format { .. } => EXIT_MODEL_FORMAT,
            _ => EXIT_OTHER,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnealInterval {
    Epoch,
    Iteration,
}

/// Every tunable of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub patches_per_model: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub anneal: f64,
    pub anneal_interval: AnnealInterval,
    pub epochs: usize,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub retention_range: (f64, f64),
    pub l2_range: (f64, f64),
    pub hidden_choices: Vec<usize>,
    pub balance: bool,
    pub mean_subtract: bool,
    pub seed: u64,
    pub train_ids: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ensemble = EnsembleConfig::default();
        let train = ensemble.train;
        RunConfig {
            k: ensemble.k,
            patches_per_model: ensemble.patches_per_model,
            batch_size: train.batch_size,
            base_lr: train.optimizer.base_lr,
            anneal: train.optimizer.anneal,
            anneal_interval: AnnealInterval::Epoch,
            epochs: train.epochs,
            rmsprop_rho: train.optimizer.rho,
            rmsprop_eps: train.optimizer.eps,
            retention_range: ensemble.ranges.retention,
            l2_range: ensemble.ranges.l2,
            hidden_choices: ensemble.ranges.hidden_choices,
            balance: train.balance,
            mean_subtract: train.mean_subtract,
            seed: 1,
            train_ids: Split::Training.ids(),
        }
    }
}

/// Config keys in documentation order, with a one-line description.
pub const CONFIG_KEYS: [(&str, &str); 16] = [
    ("k", "ensemble size (published default)"),
    (
        "patches_per_model",
        "training patches drawn per member (published default)",
    ),
    ("batch_size", "minibatch size (published default)"),
    (
        "base_lr",
        "initial RMSProp learning rate (published default)",
    ),
    (
        "anneal",
        "learning-rate multiplier per annealing event (published default)",
    ),
    (
        "anneal_interval",
        "`epoch` or `iteration`: when annealing happens",
    ),
    ("epochs", "passes over each member's patches"),
    ("rmsprop_rho", "decay of the squared-gradient average"),
    ("rmsprop_eps", "denominator offset of the RMSProp update"),
    (
        "retention_range",
        "`lo,hi`: dropout retention probability drawn uniformly per member (published default)",
    ),
    (
        "l2_range",
        "`lo,hi`: L2 coefficient drawn uniformly per member (published default)",
    ),
    (
        "hidden_choices",
        "comma list: hidden-layer widths drawn uniformly per member (published default)",
    ),
    (
        "balance",
        "`true` draws equal numbers of vessel and background patches",
    ),
    (
        "mean_subtract",
        "`true` subtracts the training FOV channel means",
    ),
    ("seed", "master seed; identical seeds give identical models"),
    (
        "train_ids",
        "training image ids, e.g. `21-40` or `21,22,25`",
    ),
];

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Formats id lists as compact ranges: `21-25,30`.
pub fn format_ids(ids: &[u32]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let mut j = i;
        while j + 1 < ids.len() && ids[j + 1] == ids[j] + 1 {
            j += 1;
        }
        parts.push(if j > i {
            format!("{:02}-{:02}", ids[i], ids[j])
        } else {
            format!("{:02}", ids[i])
        });
        i = j + 1;
    }
    parts.join(",")
}

/// Parses `21-25,30` style id lists. Ids must be unique.
pub fn parse_ids(text: &str) -> std::result::Result<Vec<u32>, String> {
    let mut ids = Vec::new();
    for part in text.split(',').map(str::trim) {
        let num = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| format!("invalid id `{s}`"))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty id range `{part}`"));
                }
                ids.extend(a..=b);
            }
            None => ids.push(num(part)?),
        }
    }
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(format!("duplicate ids in `{text}`"));
    }
    Ok(ids)
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts[..] {
        [a, b] => Ok((
            a.parse().map_err(|_| format!("invalid number `{a}`"))?,
            b.parse().map_err(|_| format!("invalid number `{b}`"))?,
        )),
        _ => Err(format!("expected `lo,hi`, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, got `{v}`")),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "k" => self.k.to_string(),
            "patches_per_model" => self.patches_per_model.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "base_lr" => fmt_f64(self.base_lr),
            "anneal" => self.anneal.to_string(),
            "anneal_interval" => match self.anneal_interval {
                AnnealInterval::Epoch => "epoch".into(),
                AnnealInterval::Iteration => "iteration".into(),
            },
            "epochs" => self.epochs.to_string(),
            "rmsprop_rho" => self.rmsprop_rho.to_string(),
            "rmsprop_eps" => fmt_f64(self.rmsprop_eps),
            "retention_range" => format!("{},{}", self.retention_range.0, self.retention_range.1),
            "l2_range" => format!("{},{}", fmt_f64(self.l2_range.0), fmt_f64(self.l2_range.1)),
            "hidden_choices" => join(&self.hidden_choices),
            "balance" => self.balance.to_string(),
            "mean_subtract" => self.mean_subtract.to_string(),
            "seed" => self.seed.to_string(),
            "train_ids" => format_ids(&self.train_ids),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "k" => self.k = parse_num(v)?,
            "patches_per_model" => self.patches_per_model = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "base_lr" => self.base_lr = parse_num(v)?,
            "anneal" => self.anneal = parse_num(v)?,
            "anneal_interval" => {
                self.anneal_interval = match v {
                    "epoch" => AnnealInterval::Epoch,
                    "iteration" => AnnealInterval::Iteration,
                    _ => return Err(format!("expected `epoch` or `iteration`, got `{v}`")),
                }
            }
            "epochs" => self.epochs = parse_num(v)?,
            "rmsprop_rho" => self.rmsprop_rho = parse_num(v)?,
            "rmsprop_eps" => self.rmsprop_eps = parse_num(v)?,
            "retention_range" => self.retention_range = parse_pair(v)?,
            "l2_range" => self.l2_range = parse_pair(v)?,
            "hidden_choices" => {
                self.hidden_choices = v
                    .split(',')
                    .map(|s| parse_num(s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "balance" => self.balance = parse_bool(v)?,
            "mean_subtract" => self.mean_subtract = parse_bool(v)?,
            "seed" => self.seed = parse_num(v)?,
            "train_ids" => self.train_ids = parse_ids(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Defaults, then `text` (config file contents), then `overrides`
    /// (`key=value` each). Errors name the offending line or override.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> std::result::Result<Self, Error> {
        let mut cfg = RunConfig::default();
        if let Some(text) = text {
            let entries = parse_key_values(text)
                .map_err(|(line, msg)| Error::Config(format!("line {line}: {msg}")))?;
            for kv in entries {
                cfg.set(&kv.key, &kv.value)
                    .map_err(|msg| Error::Config(format!("line {}: {msg}", kv.line)))?;
            }
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            cfg.set(key.trim(), value)
                .map_err(|msg| Error::Config(format!("override `{o}`: {msg}")))?;
        }
        cfg.ensemble_config()?;
        Ok(cfg)
    }

    /// The resolved configuration in config-file syntax.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|(key, _)| format!("{key} = {}\n", self.get(key).expect("listed key")))
            .collect()
    }

    pub fn ensemble_config(&self) -> std::result::Result<EnsembleConfig, Error> {
        let bad = |msg: String| Error::Config(msg);
        if self.k == 0 || self.patches_per_model == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(bad(
                "k, patches_per_model, batch_size and epochs must be >= 1".into(),
            ));
        }
        if self.train_ids.is_empty() {
            return Err(bad("train_ids is empty".into()));
        }
        let config = EnsembleConfig {
            k: self.k,
            patches_per_model: self.patches_per_model,
            ranges: HyperparamRanges {
                retention: self.retention_range,
                l2: self.l2_range,
                hidden_choices: self.hidden_choices.clone(),
            },
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                optimizer: RmsPropConfig {
                    base_lr: self.base_lr,
                    anneal: self.anneal,
                    rho: self.rmsprop_rho,
                    eps: self.rmsprop_eps,
                },
                anneal_per_iteration: self.anneal_interval == AnnealInterval::Iteration,
                balance: self.balance,
                mean_subtract: self.mean_subtract,
            },
        };
        config.ranges.validate().map_err(|e| bad(e.to_string()))?;
        config.train.validate().map_err(|e| bad(e.to_string()))?;
        Ok(config)
    }
}

fn config_help() -> String {
    let defaults = RunConfig::default();
    let mut s = String::from(
        "Config keys (`key = value` lines in --config, or --set key=value; flags override the file):\n",
    );
    for (key, doc) in CONFIG_KEYS {
        let _ = writeln!(
            s,
            "  {key:<18} default {:<14} {doc}",
            defaults.get(key).expect("listed key")
        );
    }
    s.push_str("\nEnvironment: VESSELNET_THREADS sets the thread count when --threads is absent.");
    s
}

#[derive(Debug, Parser)]
#[command(
    name = "vesselnet",
    version,
    about = "Retinal vessel segmentation with an ensemble of small convolutional networks"
)]
pub struct Cli {
    /// Worker threads (1 guarantees bit-identical scheduling). Defaults to
    /// VESSELNET_THREADS, then to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble and write the model file plus a training-log CSV.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Write a probability map (.pmap) and a grayscale PNG per test image.
    #[command(after_help = config_help())]
    Predict(PredictArgs),
    /// Score predictions: report CSV, ROC CSV and a summary line.
    #[command(after_help = config_help())]
    Evaluate(EvaluateArgs),
    /// Write only the pooled ROC curve and print its AUC.
    #[command(after_help = config_help())]
    Roc(RocArgs),
    /// Run the 64-bit finite-difference gradient suite.
    #[command(after_help = config_help())]
    Gradcheck(GradcheckArgs),
    /// Print the program and model-format versions.
    #[command(after_help = config_help())]
    Version,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root containing training/{images,truth,mask}.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-log CSV; defaults to the model path with extension `log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override one config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Suppress per-epoch progress on standard error.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root containing test/{images,truth,mask}.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for NN.pmap and NN.png.
    #[arg(long)]
    pub out: PathBuf,
    /// Test image ids.
    #[arg(long, default_value = "01-20")]
    pub ids: String,
    /// Patches per forward pass.
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory holding NN.pmap files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// ROC CSV to write; defaults to `roc.csv` beside the report.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    #[arg(long, default_value = "01-20")]
    pub ids: String,
    /// Score every pixel instead of only the field of view.
    #[arg(long)]
    pub include_exterior: bool,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// ROC CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "01-20")]
    pub ids: String,
    #[arg(long)]
    pub include_exterior: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random configurations per check.
    #[arg(long, default_value_t = gradcheck::CONFIGS_PER_CHECK)]
    pub configs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corrupt the analytic gradient of one check (detector self-test).
    #[arg(long, hide = true)]
    pub perturb: Option<String>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(
    args: I,
    out: &mut (dyn std::io::Write + Send),
    err: &mut (dyn std::io::Write + Send),
) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn thread_count(flag: Option<usize>, env: Option<String>) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(Failure::new(EXIT_CONFIG, "--threads must be >= 1"))
        } else {
            Ok(Some(n))
        };
    }
    match env {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::new(
                EXIT_CONFIG,
                format!("VESSELNET_THREADS=`{v}` is not a positive integer"),
            )),
        },
        None => Ok(None),
    }
}

fn execute(
    cli: Cli,
    out: &mut (dyn std::io::Write + Send),
    err: &mut (dyn std::io::Write + Send),
) -> CliResult {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads, std::env::var("VESSELNET_THREADS").ok())? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::new(EXIT_OTHER, format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Roc(a) => cmd_roc(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out, err),
        Command::Version => writeln!(
            out,
            "vesselnet {} (model format {})",
            env!("CARGO_PKG_VERSION"),
            crate::ensemble::MODEL_VERSION
        )
        .map_err(io_failure),
    })
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(EXIT_OTHER, e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes)
        .map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", path.display())))
}

fn ids_arg(text: &str) -> CliResult<Vec<u32>> {
    parse_ids(text).map_err(|m| Failure::new(EXIT_CONFIG, format!("--ids: {m}")))
}

fn load_data(root: &Path, split: Split, ids: &[u32]) -> CliResult<Vec<FundusSample>> {
    if !root.is_dir() {
        return Err(Failure::new(
            EXIT_DATA,
            format!("dataset root {} is not a directory", root.display()),
        ));
    }
    load_split(root, split, ids).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))
}

/// Training-log CSV: one row per member and epoch.
pub fn training_log_csv(records: &[(usize, EpochRecord)]) -> String {
    let mut s = String::from("member,epoch,loss,train_accuracy,learning_rate\n");
    for (m, r) in records {
        let _ = writeln!(
            s,
            "{m},{},{:.6},{:.6},{:e}",
            r.epoch, r.mean_loss, r.train_accuracy, r.learning_rate
        );
    }
    s
}

fn cmd_train(
    a: TrainArgs,
    out: &mut (dyn std::io::Write + Send),
    err: &mut (dyn std::io::Write + Send),
) -> CliResult {
    let text = match &a.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), &a.overrides)?;
    if a.dry_run {
        return out.write_all(cfg.to_text().as_bytes()).map_err(io_failure);
    }
    let (Some(data), Some(model_path)) = (a.data, a.out) else {
        return Err(Failure::new(
            EXIT_CONFIG,
            "train needs --data and --out (or --dry-run)",
        ));
    };
    let ensemble = cfg.ensemble_config()?;
    let samples = load_data(&data, Split::Training, &cfg.train_ids)?;
    let records = Mutex::new(Vec::new());
    let progress = Mutex::new(err);
    let quiet = a.quiet;
    let epochs = cfg.epochs;
    let observer = |member: usize, r: &EpochRecord| {
        if !quiet {
            let mut e = progress.lock().expect("progress lock");
            let _ = writeln!(
                e,
                "member {member} epoch {}/{epochs} loss={:.6} train_accuracy={:.4}",
                r.epoch, r.mean_loss, r.train_accuracy
            );
        }
        records.lock().expect("log lock").push((member, *r));
    };
    let mut rng = Rng::new(cfg.seed);
    let model = train_ensemble(&samples, &ensemble, &mut rng, &observer)?;
    let mut records = records.into_inner().expect("log lock");
    records.sort_by_key(|(m, r)| (*m, r.epoch));
    let log_path = a
        .log
        .unwrap_or_else(|| model_path.with_extension("log.csv"));
    write_file(&log_path, training_log_csv(&records).as_bytes())?;
    write_file(&model_path, &model.to_bytes())?;
    writeln!(
        out,
        "wrote {} ({} members) and {}",
        model_path.display(),
        model.k(),
        log_path.display()
    )
    .map_err(io_failure)
}

fn cmd_predict(a: PredictArgs, out: &mut (dyn std::io::Write + Send)) -> CliResult {
    let ids = ids_arg(&a.ids)?;
    let model = load_model(&a.model).map_err(|e| Failure::new(EXIT_MODEL_FORMAT, e.to_string()))?;
    let samples = load_data(&a.data, Split::Test, &ids)?;
    for sample in &samples {
        let map = predict_image(&model, sample, a.batch)?;
        let id = sample.id();
        write_file(&a.out.join(format!("{id:02}.pmap")), &map.to_bytes())?;
        write_file(
            &a.out.join(format!("{id:02}.png")),
            &encode_png(&map.to_raster())?,
        )?;
    }
    writeln!(
        out,
        "wrote {} probability maps to {}",
        samples.len(),
        a.out.display()
    )
    .map_err(io_failure)
}

fn scored_images(
    pred: &Path,
    data: &Path,
    ids: &str,
    include_exterior: bool,
) -> CliResult<Vec<ScoredImage>> {
    let ids = ids_arg(ids)?;
    let missing: Vec<String> = ids
        .iter()
        .map(|id| pred.join(format!("{id:02}.pmap")))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Failure::new(
            EXIT_MISSING_PREDICTION,
            format!("missing predictions: {}", missing.join(", ")),
        ));
    }
    let samples = load_data(data, Split::Test, &ids)?;
    samples
        .iter()
        .map(|s| {
            let path = pred.join(format!("{:02}.pmap", s.id()));
            let map = ProbabilityMap::load(&path)
                .map_err(|e| Failure::new(EXIT_MODEL_FORMAT, format!("{}: {e}", path.display())))?;
            ScoredImage::from_map(&map, s, include_exterior)
                .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut (dyn std::io::Write + Send)) -> CliResult {
    let images = scored_images(&a.pred, &a.data, &a.ids, a.include_exterior)?;
    let sweep = max_avg_accuracy(&images)?;
    let curve = roc(&images)?;
    let report = Report::new(&sweep, &curve);
    let roc_path = a.roc.unwrap_or_else(|| a.out.with_file_name("roc.csv"));
    write_file(&roc_path, curve.to_csv().as_bytes())?;
    write_file(&a.out, report.to_csv().as_bytes())?;
    writeln!(out, "{}", report.summary_line()).map_err(io_failure)
}

fn cmd_roc(a: RocArgs, out: &mut (dyn std::io::Write + Send)) -> CliResult {
    let images = scored_images(&a.pred, &a.data, &a.ids, a.include_exterior)?;
    let curve: RocCurve = roc(&images)?;
    write_file(&a.out, curve.to_csv().as_bytes())?;
    writeln!(out, "auc={:.6}", curve.auc).map_err(io_failure)
}

fn cmd_gradcheck(
    a: GradcheckArgs,
    out: &mut (dyn std::io::Write + Send),
    err: &mut (dyn std::io::Write + Send),
) -> CliResult {
    let perturb = match a.perturb.as_deref() {
        Some(name) => Some(
            Check::from_name(name)
                .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown check `{name}`")))?,
        ),
        None => None,
    };
    if a.configs == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--configs must be >= 1"));
    }
    let mut options = gradcheck::Options {
        configs: a.configs,
        perturb,
        ..Default::default()
    };
    if let Some(seed) = a.seed {
        options.seed = seed;
    }
    let started = std::time::Instant::now();
    let mut failed = Vec::new();
    for check in Check::ALL {
        let r = gradcheck::run_check(check, &options)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<12} max_rel_error={:.3e} compared={} {verdict}",
            check.name(),
            r.worst.error,
            r.compared
        )
        .map_err(io_failure)?;
        if !r.passed() {
            let w = &r.worst;
            let _ = writeln!(
                err,
                "{}: {}[{}] config {} analytic={:e} numeric={:e} rel_error={:e}",
                check.name(),
                w.tensor,
                w.index,
                w.config,
                w.analytic,
                w.numeric,
                w.error
            );
            failed.push(format!("{}[{}] in {}", w.tensor, w.index, check.name()));
        }
    }
    writeln!(
        out,
        "elapsed {:.1}s, tolerance {TOLERANCE:e}",
        started.elapsed().as_secs_f64()
    )
    .map_err(io_failure)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!("gradient mismatch at {}", failed.join(", ")),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::resolve(Some(&cfg.to_text()), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.get("hidden_choices").unwrap(), "128,256,512");
        assert_eq!(cfg.get("train_ids").unwrap(), "21-40");
    }

    #[test]
    fn overrides_beat_file_values() {
        let cfg = RunConfig::resolve(Some("k = 3\nepochs = 4 # short\n"), &["k=2".into()]).unwrap();
        assert_eq!((cfg.k, cfg.epochs), (2, 4));
    }

    #[test]
    fn config_errors_name_the_line() {
        let e = RunConfig::resolve(Some("k = 3\nbatch_size = many\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::resolve(Some("nonsense = 1\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("unknown key"), "{e}");
        assert!(matches!(
            RunConfig::resolve(None, &["retention_range=0.9,0.5".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &["k=0".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &["hidden_choices=100".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn id_lists() {
        assert_eq!(parse_ids("21-23,30").unwrap(), vec![21, 22, 23, 30]);
        assert_eq!(format_ids(&[1, 2, 3, 7, 9, 10]), "01-03,07,09-10");
        assert!(parse_ids("3-1").is_err());
        assert!(parse_ids("1,1").is_err());
        assert!(parse_ids("x").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = config_help();
        for (key, _) in CONFIG_KEYS {
            assert!(help.contains(key), "{key}");
        }
        assert!(help.contains("60000"));
    }

    #[test]
    fn error_codes() {
        let code = |e: Error| Failure::from(e).code;
        assert_eq!(code(Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(code(Error::Data("x".into())), EXIT_DATA);
        assert_eq!(
            code(Error::Training {
                member: Some(1),
                epoch: 0,
                step: 3
            }),
            EXIT_DIVERGED
        );
        assert_eq!(
            code(Error::Format {
                offset: 4,
                reason: "x".into()
            }),
            EXIT_MODEL_FORMAT
        );
    }

    #[test]
    fn thread_count_sources() {
        assert_eq!(thread_count(Some(3), Some("8".into())).unwrap(), Some(3));
        assert_eq!(thread_count(None, Some(" 8 ".into())).unwrap(), Some(8));
        assert_eq!(thread_count(None, None).unwrap(), None);
        for (flag, env) in [(Some(0), None), (None, Some("many")), (None, Some("0"))] {
            let e = thread_count(flag, env.map(String::from)).unwrap_err();
            assert_eq!(e.code, EXIT_CONFIG);
        }
    }
}
