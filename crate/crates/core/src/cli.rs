//! `winoscore` command-line interface.
//!
//! Exit codes: 0 success, 1 data error, 2 usage or I/O error, 3 backend or
//! transport error.
//!
//! Settings resolve in the order flag, environment variable
//! (`WINOSCORE_ENDPOINT`, `WINOSCORE_TIMEOUT_MS`), config file, default.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::backend::{Backend, BackendConfig, BackendError, RemoteBackend, ScriptedBackend};
use crate::dataset::{self, DatasetError, Manifest, Problem, SplitLabel};
use crate::evaluation::{
    evaluate_split, learning_curve_auc_with, predict_unlabeled, write_leaderboard_csv, zero_shot_eval, EvalConfig,
    EvalError, EvalReport, FailurePolicy, LearningCurve, Spacing,
};
use crate::scoring::Prediction;
use crate::templating::{emit_training_file, escape_tsv_field, render_pair, EmitError, TargetTokenPair, TemplateError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => EXIT_USAGE,
            CliError::Dataset(e) => match e {
                DatasetError::Io { .. }
                | DatasetError::Manifest { .. }
                | DatasetError::UnknownSplit(_)
                | DatasetError::UnknownLabel(_)
                | DatasetError::DuplicateLabel(_) => EXIT_USAGE,
                DatasetError::AtLine { .. } | DatasetError::CountMismatch { .. } => EXIT_DATA,
            },
            CliError::Eval(e) => match e {
                EvalError::Backend { .. } | EvalError::Batch(_) => EXIT_BACKEND,
                EvalError::Io(_) | EvalError::Curve(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            },
            CliError::Emit(EmitError::Io(_)) => EXIT_USAGE,
            CliError::Emit(EmitError::Template(_)) | CliError::Template(_) => EXIT_DATA,
            CliError::Backend(BackendError::Config(_)) => EXIT_USAGE,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "winoscore", version, about = "Hypothesis/premise scoring harness for WinoGrande-style problems")]
pub struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print both rendered instances of every problem.
    Decompose(DecomposeArgs),
    /// Write a source<TAB>target training file plus an experiment manifest.
    EmitTrain(EmitArgs),
    /// Evaluate a labeled split and report accuracy and the case histogram.
    Eval(EvalArgs),
    /// Write leaderboard predictions (qID,choice) for a split.
    Predict(EvalArgs),
    /// Learning-curve AUC from accuracies or report files.
    Auc(AucArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// JSONL file to read directly.
    #[arg(long, conflicts_with_all = ["manifest", "split"])]
    pub input: Option<PathBuf>,
    /// Dataset manifest mapping split labels to files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split label: XS, S, M, L, XL, dev or test.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Only print these qids (repeatable).
    #[arg(long = "qid")]
    pub qids: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Answer tokens as POS,NEG.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Training file path; the experiment manifest goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Scripted: gold instance decodes the positive token.
    Oracle,
    /// Scripted: every oracle prediction flipped.
    Inverted,
    /// Scripted: seeded uniform-random logits.
    Random,
    /// Scripted: positive token with equal logits everywhere.
    Constant,
    /// Scripted from a JSON script file (--script-file).
    Script,
    /// HTTP inference service.
    Remote,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, env = "WINOSCORE_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long = "timeout-ms", env = "WINOSCORE_TIMEOUT_MS")]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "max-in-flight")]
    pub max_in_flight: Option<usize>,
    /// Answer tokens as POS,NEG.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Resolve with the softmax over candidate logits (default).
    #[arg(long, conflicts_with = "no_logit")]
    pub logit: bool,
    /// Resolve from greedy tokens only.
    #[arg(long = "no-logit")]
    pub no_logit: bool,
    /// Seed for the random scripted backend.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "script-file")]
    pub script_file: Option<PathBuf>,
    /// Output file: JSON report for eval, CSV for predict.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exclude items whose predictions fail instead of aborting.
    #[arg(long = "skip-failures")]
    pub skip_failures: bool,
    /// Label the report as zero-shot.
    #[arg(long = "zero-shot")]
    pub zero_shot: bool,
    /// Free-text condition label for the report.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpacingKind {
    Equal,
    Log,
}

#[derive(Debug, Args)]
pub struct AucArgs {
    /// Accuracies, or paths to eval report JSON files, smallest size first.
    #[arg(required = true)]
    pub values: Vec<String>,
    #[arg(long, value_enum, default_value = "equal")]
    pub spacing: SpacingKind,
    /// Training-set sizes for log spacing, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<f64>,
}

/// Settings from the `--config` TOML file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
    pub input: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub timeout_ms: Option<u64>,
    pub retries: Option<u32>,
    pub batch_size: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub backoff_ms: Option<u64>,
    pub tokens: Option<String>,
    pub logit: Option<bool>,
    pub seed: Option<u64>,
    pub script_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub skip_failures: Option<bool>,
    /// Extra POS,NEG pairs accepted by --tokens.
    #[serde(default)]
    pub token_pairs: Vec<String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut file: ConfigFile =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut file.manifest, &mut file.input, &mut file.script_file, &mut file.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(file)
    }
}

/// Allowed answer-token pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRegistry {
    pairs: Vec<TargetTokenPair>,
}

impl Default for TokenRegistry {
    fn default() -> Self {
        TokenRegistry {
            pairs: vec![TargetTokenPair::entailment(), TargetTokenPair::true_false()],
        }
    }
}

impl TokenRegistry {
    pub fn with_extra(extra: &[String]) -> Result<Self, CliError> {
        let mut registry = TokenRegistry::default();
        for spec in extra {
            let pair: TargetTokenPair = spec.parse().map_err(|e: TemplateError| CliError::Usage(e.to_string()))?;
            if !registry.pairs.contains(&pair) {
                registry.pairs.push(pair);
            }
        }
        Ok(registry)
    }

    /// `None` selects the default pair, entailment/contradiction.
    pub fn select(&self, spec: Option<&str>) -> Result<TargetTokenPair, CliError> {
        let Some(spec) = spec else {
            return Ok(TargetTokenPair::entailment());
        };
        let pair: TargetTokenPair = spec.parse().map_err(|e: TemplateError| CliError::Usage(e.to_string()))?;
        if self.pairs.contains(&pair) {
            Ok(pair)
        } else {
            let known: Vec<String> = self.pairs.iter().map(|p| p.to_string()).collect();
            Err(CliError::Usage(format!(
                "token pair '{pair}' is not registered (known: {})",
                known.join(" ")
            )))
        }
    }
}

/// Fully resolved settings for `eval` and `predict`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataArgs,
    pub backend: BackendKind,
    pub backend_config: BackendConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub script_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub zero_shot: bool,
}

impl RunConfig {
    pub fn resolve(args: &EvalArgs, file: &ConfigFile) -> Result<Self, CliError> {
        let registry = TokenRegistry::with_extra(&file.token_pairs)?;
        let tokens = registry.select(args.tokens.as_deref().or(file.tokens.as_deref()))?;
        let use_logit = if args.logit {
            true
        } else if args.no_logit {
            false
        } else {
            file.logit.unwrap_or(true)
        };
        let defaults = BackendConfig::default();
        let backend_config = BackendConfig {
            endpoint: args
                .endpoint
                .clone()
                .or_else(|| file.endpoint.clone())
                .unwrap_or(defaults.endpoint),
            max_in_flight: args.max_in_flight.or(file.max_in_flight).unwrap_or(defaults.max_in_flight),
            timeout: args
                .timeout_ms
                .or(file.timeout_ms)
                .map(Duration::from_millis)
                .unwrap_or(defaults.timeout),
            retries: args.retries.or(file.retries).unwrap_or(defaults.retries),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
            backoff_base: file.backoff_ms.map(Duration::from_millis).unwrap_or(defaults.backoff_base),
            backoff_max: defaults.backoff_max,
        };
        backend_config.validate()?;
        let skip = args.skip_failures || file.skip_failures.unwrap_or(false);
        let mut eval = EvalConfig::new(tokens, use_logit).with_failure_policy(if skip {
            FailurePolicy::Skip
        } else {
            FailurePolicy::Abort
        });
        if let Some(label) = &args.label {
            eval = eval.with_label(label.clone());
        }
        let data = DataArgs {
            input: args.data.input.clone().or_else(|| {
                (args.data.manifest.is_none() && args.data.split.is_none())
                    .then(|| file.input.clone())
                    .flatten()
            }),
            manifest: args.data.manifest.clone().or_else(|| file.manifest.clone()),
            split: args.data.split.clone().or_else(|| file.split.clone()),
        };
        Ok(RunConfig {
            data,
            backend: args.backend.or(file.backend).unwrap_or(BackendKind::Oracle),
            backend_config,
            eval,
            seed: args.seed.or(file.seed).unwrap_or(42),
            script_file: args.script_file.clone().or_else(|| file.script_file.clone()),
            out: args.out.clone().or_else(|| file.out.clone()),
            zero_shot: args.zero_shot,
        })
    }

    pub fn build_backend(&self, problems: &[Problem]) -> Result<Box<dyn Backend>, CliError> {
        let tokens = &self.eval.tokens;
        let max = self.backend_config.max_in_flight;
        Ok(match self.backend {
            BackendKind::Oracle => Box::new(ScriptedBackend::oracle(problems, tokens)?.with_max_in_flight(max)),
            BackendKind::Inverted => {
                Box::new(ScriptedBackend::inverted_oracle(problems, tokens)?.with_max_in_flight(max))
            }
            BackendKind::Random => Box::new(ScriptedBackend::random(self.seed).with_max_in_flight(max)),
            BackendKind::Constant => {
                let p = Prediction::new(tokens.positive(), 0.0, 0.0).expect("finite");
                Box::new(ScriptedBackend::constant(p).with_max_in_flight(max))
            }
            BackendKind::Script => {
                let path = self
                    .script_file
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--backend script needs --script-file".into()))?;
                Box::new(ScriptedBackend::from_file(path)?.with_max_in_flight(max))
            }
            BackendKind::Remote => Box::new(RemoteBackend::new(self.backend_config.clone())?),
        })
    }
}

/// Loaded problems plus the label used in reports.
struct Loaded {
    label: String,
    problems: Vec<Problem>,
}

fn load_data(data: &DataArgs, require_answers: bool) -> Result<Loaded, CliError> {
    if let Some(input) = &data.input {
        let problems = dataset::load_file(input, require_answers)?;
        let label = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        return Ok(Loaded { label, problems });
    }
    let (Some(manifest), Some(split)) = (&data.manifest, &data.split) else {
        return Err(CliError::Usage("give --input FILE or both --manifest and --split".into()));
    };
    let label: SplitLabel = split.parse()?;
    let manifest = Manifest::load(manifest)?;
    let problems = dataset::load_split(manifest.get(label)?)?;
    Ok(Loaded {
        label: label.to_string(),
        problems,
    })
}

fn open_out(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn write_stdout(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn cmd_decompose(args: &DecomposeArgs, file: &ConfigFile, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data = DataArgs {
        input: args.data.input.clone().or_else(|| {
            (args.data.manifest.is_none() && args.data.split.is_none())
                .then(|| file.input.clone())
                .flatten()
        }),
        manifest: args.data.manifest.clone().or_else(|| file.manifest.clone()),
        split: args.data.split.clone().or_else(|| file.split.clone()),
    };
    let loaded = load_data(&data, false)?;
    let mut out = String::new();
    for problem in &loaded.problems {
        if !args.qids.is_empty() && !args.qids.iter().any(|q| q == problem.qid()) {
            continue;
        }
        for instance in render_pair(problem)? {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                problem.qid(),
                instance.option_slot.label(),
                escape_tsv_field(&instance.source)
            ));
        }
    }
    write_stdout(stdout, &out)
}

/// Path of the experiment manifest written beside a training file.
pub fn experiment_manifest_path(training_file: &Path) -> PathBuf {
    let mut name = training_file.file_name().unwrap_or_default().to_os_string();
    name.push(".experiment.json");
    training_file.with_file_name(name)
}

fn cmd_emit_train(args: &EmitArgs, file: &ConfigFile, stdout: &mut dyn Write) -> Result<(), CliError> {
    let registry = TokenRegistry::with_extra(&file.token_pairs)?;
    let tokens = registry.select(args.tokens.as_deref().or(file.tokens.as_deref()))?;
    let out = args
        .out
        .clone()
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Usage("emit-train needs --out".into()))?;
    let data = DataArgs {
        input: args.data.input.clone(),
        manifest: args.data.manifest.clone().or_else(|| file.manifest.clone()),
        split: args.data.split.clone().or_else(|| file.split.clone()),
    };
    let loaded = load_data(&data, true)?;
    let mut sink = open_out(&out)?;
    let pairs = emit_training_file(&loaded.problems, &tokens, &mut sink)?;

    let experiment = json!({
        "training_file": out.file_name().map(|n| n.to_string_lossy().into_owned()),
        "split": loaded.label,
        "problems": loaded.problems.len(),
        "pairs": pairs,
        "tokens": tokens,
        "format": "source\\ttarget, tabs and newlines in source escaped as \\t and \\n",
        "template": "hypothesis: {option}{text after blank} premise: {text before blank}",
        "hyperparameters": {
            "model": "t5-3b",
            "batch_size": 16,
            "learning_rate": 2e-4,
            "checkpoint_every_steps": 5000,
            "steps_to_converge_xl": 130000,
            "decoding": "greedy",
            "checkpoint_selection": "best dev accuracy",
        },
    });
    let manifest_path = experiment_manifest_path(&out);
    let text = serde_json::to_string_pretty(&experiment).expect("static JSON") + "\n";
    std::fs::write(&manifest_path, text).map_err(|e| io_error(&manifest_path, e))?;
    write_stdout(stdout, &format!("wrote {pairs} pairs to {}\n", out.display()))
}

fn cmd_eval(args: &EvalArgs, file: &ConfigFile, stdout: &mut dyn Write) -> Result<(), CliError> {
    let run = RunConfig::resolve(args, file)?;
    let loaded = load_data(&run.data, true)?;
    let backend = run.build_backend(&loaded.problems)?;
    let report: EvalReport = if run.zero_shot {
        zero_shot_eval(&loaded.label, &loaded.problems, backend.as_ref(), &run.eval)?
    } else {
        evaluate_split(&loaded.label, &loaded.problems, backend.as_ref(), &run.eval)?
    };
    if let Some(path) = &run.out {
        let mut sink = open_out(path)?;
        serde_json::to_writer_pretty(&mut sink, &report).map_err(|e| CliError::Io(e.to_string()))?;
        sink.write_all(b"\n").and_then(|()| sink.flush()).map_err(|e| io_error(path, e))?;
    }
    write_stdout(stdout, &report.summary_table())
}

fn cmd_predict(args: &EvalArgs, file: &ConfigFile, stdout: &mut dyn Write) -> Result<(), CliError> {
    let run = RunConfig::resolve(args, file)?;
    let loaded = load_data(&run.data, false)?;
    let backend = run.build_backend(&loaded.problems)?;
    let predictions = predict_unlabeled(&loaded.problems, backend.as_ref(), &run.eval)?;
    match &run.out {
        Some(path) => write_leaderboard_csv(&predictions.choices, open_out(path)?)?,
        None => write_leaderboard_csv(&predictions.choices, &mut *stdout)?,
    }
    if !predictions.skipped.is_empty() {
        log::warn!("{} problem(s) skipped", predictions.skipped.len());
    }
    Ok(())
}

fn accuracy_from(value: &str) -> Result<f64, CliError> {
    if let Ok(a) = value.parse::<f64>() {
        return Ok(a);
    }
    let path = Path::new(value);
    if !path.exists() {
        return Err(CliError::Usage(format!("'{value}' is neither a number nor a report file")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    report.check_consistency()?;
    Ok(report.accuracy)
}

fn cmd_auc(args: &AucArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let accuracies = args
        .values
        .iter()
        .map(|v| accuracy_from(v))
        .collect::<Result<Vec<_>, _>>()?;
    if accuracies.len() < 2 {
        return Err(CliError::Usage("auc needs at least two accuracies".into()));
    }
    let curve = LearningCurve::from_accuracies(&accuracies)?;
    let spacing = match args.spacing {
        SpacingKind::Equal => Spacing::Equal,
        SpacingKind::Log => Spacing::LogSize(args.sizes.clone()),
    };
    let auc = learning_curve_auc_with(&curve, &spacing)?;
    write_stdout(stdout, &format!("{auc:.6}\n"))
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Decompose(args) => cmd_decompose(args, &file, stdout),
        Command::EmitTrain(args) => cmd_emit_train(args, &file, stdout),
        Command::Eval(args) => cmd_eval(args, &file, stdout),
        Command::Predict(args) => cmd_predict(args, &file, stdout),
        Command::Auc(args) => cmd_auc(args, stdout),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
