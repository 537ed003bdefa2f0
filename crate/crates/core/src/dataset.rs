//! WinoGrande JSONL records, split manifests and loading.
//!
//! A record looks like
//!
//! ```json
//! {"qID":"x1","sentence":"... the _ is smaller.","option1":"home","option2":"house","answer":"1"}
//! ```
//!
//! `answer` is absent in the unlabeled test split. Unknown fields are ignored.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::templating::find_blanks;

/// Which of the two answer options a choice or instance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionSlot {
    Option1,
    Option2,
}

impl OptionSlot {
    pub const BOTH: [OptionSlot; 2] = [OptionSlot::Option1, OptionSlot::Option2];

    /// Dataset / leaderboard encoding: `"1"` or `"2"`.
    pub fn label(self) -> &'static str {
        match self {
            OptionSlot::Option1 => "1",
            OptionSlot::Option2 => "2",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "1" => Some(OptionSlot::Option1),
            "2" => Some(OptionSlot::Option2),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            OptionSlot::Option1 => OptionSlot::Option2,
            OptionSlot::Option2 => OptionSlot::Option1,
        }
    }
}

impl fmt::Display for OptionSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptionSlot::Option1 => f.write_str("Option1"),
            OptionSlot::Option2 => f.write_str("Option2"),
        }
    }
}

fn at(qid: &Option<String>) -> String {
    match qid {
        Some(q) => format!("problem '{q}': "),
        None => String::new(),
    }
}

/// A record-level validation failure. Carries the qid whenever it could be read.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProblemError {
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("{}missing field '{field}'", at(.qid))]
    MissingField { qid: Option<String>, field: &'static str },
    #[error("{}field '{field}' must be a {expected}", at(.qid))]
    InvalidFieldType {
        qid: Option<String>,
        field: &'static str,
        expected: &'static str,
    },
    #[error("{}sentence has no blank marker '_'", at(.qid))]
    MissingBlank { qid: Option<String> },
    #[error("{}sentence has {count} blank markers, expected exactly one", at(.qid))]
    MultipleBlanks { qid: Option<String>, count: usize },
    #[error("{}answer '{value}' is not \"1\" or \"2\"", at(.qid))]
    InvalidAnswer { qid: Option<String>, value: String },
    #[error("{}{field} is empty", at(.qid))]
    EmptyOption { qid: Option<String>, field: &'static str },
    #[error("{}option1 and option2 are identical", at(.qid))]
    IdenticalOptions { qid: Option<String> },
    #[error("{}gold answer required in a labeled split", at(.qid))]
    MissingAnswer { qid: Option<String> },
}

impl ProblemError {
    pub fn qid(&self) -> Option<&str> {
        match self {
            ProblemError::InvalidJson(_) | ProblemError::NotAnObject => None,
            ProblemError::MissingField { qid, .. }
            | ProblemError::InvalidFieldType { qid, .. }
            | ProblemError::MissingBlank { qid }
            | ProblemError::MultipleBlanks { qid, .. }
            | ProblemError::InvalidAnswer { qid, .. }
            | ProblemError::EmptyOption { qid, .. }
            | ProblemError::IdenticalOptions { qid }
            | ProblemError::MissingAnswer { qid } => qid.as_deref(),
        }
    }
}

/// One validated problem: a sentence with exactly one blank and two distinct options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    qid: String,
    sentence: String,
    option1: String,
    option2: String,
    answer: Option<OptionSlot>,
}

impl Problem {
    pub fn new(
        qid: impl Into<String>,
        sentence: impl Into<String>,
        option1: impl Into<String>,
        option2: impl Into<String>,
        answer: Option<OptionSlot>,
    ) -> Result<Self, ProblemError> {
        let problem = Problem {
            qid: qid.into(),
            sentence: sentence.into(),
            option1: option1.into(),
            option2: option2.into(),
            answer,
        };
        problem.validate()?;
        Ok(problem)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        let qid = Some(self.qid.clone());
        match find_blanks(&self.sentence).len() {
            0 => return Err(ProblemError::MissingBlank { qid }),
            1 => {}
            count => return Err(ProblemError::MultipleBlanks { qid, count }),
        }
        if self.option1.is_empty() {
            return Err(ProblemError::EmptyOption { qid, field: "option1" });
        }
        if self.option2.is_empty() {
            return Err(ProblemError::EmptyOption { qid, field: "option2" });
        }
        if self.option1 == self.option2 {
            return Err(ProblemError::IdenticalOptions { qid });
        }
        Ok(())
    }

    pub fn qid(&self) -> &str {
        &self.qid
    }

    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn option1(&self) -> &str {
        &self.option1
    }

    pub fn option2(&self) -> &str {
        &self.option2
    }

    pub fn option(&self, slot: OptionSlot) -> &str {
        match slot {
            OptionSlot::Option1 => &self.option1,
            OptionSlot::Option2 => &self.option2,
        }
    }

    pub fn answer(&self) -> Option<OptionSlot> {
        self.answer
    }

    /// Same problem with the gold answer replaced.
    pub fn with_answer(mut self, answer: Option<OptionSlot>) -> Self {
        self.answer = answer;
        self
    }

    /// Serializes back to the dataset record format.
    pub fn to_record(&self) -> Value {
        let mut map = Map::new();
        map.insert("qID".into(), Value::String(self.qid.clone()));
        map.insert("sentence".into(), Value::String(self.sentence.clone()));
        map.insert("option1".into(), Value::String(self.option1.clone()));
        map.insert("option2".into(), Value::String(self.option2.clone()));
        if let Some(answer) = self.answer {
            map.insert("answer".into(), Value::String(answer.label().into()));
        }
        Value::Object(map)
    }

    pub fn to_json_line(&self) -> String {
        self.to_record().to_string()
    }
}

fn string_field(
    map: &Map<String, Value>,
    qid: &Option<String>,
    field: &'static str,
) -> Result<String, ProblemError> {
    match map.get(field) {
        None | Some(Value::Null) => Err(ProblemError::MissingField {
            qid: qid.clone(),
            field,
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ProblemError::InvalidFieldType {
            qid: qid.clone(),
            field,
            expected: "string",
        }),
    }
}

/// Parses and validates one JSONL record.
pub fn parse_problem(line: &str) -> Result<Problem, ProblemError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ProblemError::InvalidJson(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(ProblemError::NotAnObject);
    };

    let qid = string_field(&map, &None, "qID")?;
    let known = Some(qid.clone());
    let sentence = string_field(&map, &known, "sentence")?;
    let option1 = string_field(&map, &known, "option1")?;
    let option2 = string_field(&map, &known, "option2")?;
    let answer = match map.get("answer") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(OptionSlot::from_label(s).ok_or_else(|| {
            ProblemError::InvalidAnswer {
                qid: known.clone(),
                value: s.clone(),
            }
        })?),
        Some(other) => {
            return Err(ProblemError::InvalidAnswer {
                qid: known,
                value: other.to_string(),
            })
        }
    };
    Problem::new(qid, sentence, option1, option2, answer)
}

/// Split labels: the five nested training sizes plus dev and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitLabel {
    XS,
    S,
    M,
    L,
    XL,
    #[serde(rename = "dev")]
    Dev,
    #[serde(rename = "test")]
    Test,
}

impl SplitLabel {
    pub const TRAINING_SIZES: [SplitLabel; 5] = [
        SplitLabel::XS,
        SplitLabel::S,
        SplitLabel::M,
        SplitLabel::L,
        SplitLabel::XL,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::XS => "XS",
            SplitLabel::S => "S",
            SplitLabel::M => "M",
            SplitLabel::L => "L",
            SplitLabel::XL => "XL",
            SplitLabel::Dev => "dev",
            SplitLabel::Test => "test",
        }
    }

    /// Only the test split may omit gold answers.
    pub fn requires_answers(self) -> bool {
        self != SplitLabel::Test
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xs" => Ok(SplitLabel::XS),
            "s" => Ok(SplitLabel::S),
            "m" => Ok(SplitLabel::M),
            "l" => Ok(SplitLabel::L),
            "xl" => Ok(SplitLabel::XL),
            "dev" => Ok(SplitLabel::Dev),
            "test" => Ok(SplitLabel::Test),
            _ => Err(DatasetError::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub label: SplitLabel,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {error}", .path.display())]
    AtLine {
        path: PathBuf,
        line: usize,
        #[source]
        error: ProblemError,
    },
    #[error("split {label}: expected {expected} items, found {actual}")]
    CountMismatch {
        label: SplitLabel,
        expected: usize,
        actual: usize,
    },
    #[error("manifest {}: {message}", .path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("manifest lists split '{0}' more than once")]
    DuplicateLabel(SplitLabel),
    #[error("manifest has no split '{0}'")]
    UnknownSplit(SplitLabel),
    #[error("unknown split label '{0}' (expected XS, S, M, L, XL, dev or test)")]
    UnknownLabel(String),
}

impl DatasetError {
    /// I/O failures, as opposed to problems with the data itself.
    pub fn is_io(&self) -> bool {
        matches!(self, DatasetError::Io { .. })
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::AtLine { line, .. } => Some(*line),
            _ => None,
        }
    }

    pub fn problem_error(&self) -> Option<&ProblemError> {
        match self {
            DatasetError::AtLine { error, .. } => Some(error),
            _ => None,
        }
    }
}

/// Reads problems from a JSONL stream. Blank lines are skipped; reported line
/// numbers are 1-based physical lines.
pub fn read_problems<R: BufRead>(
    reader: R,
    path: &Path,
    require_answers: bool,
) -> Result<Vec<Problem>, DatasetError> {
    let mut problems = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let at_line = |error| DatasetError::AtLine {
            path: path.to_path_buf(),
            line: index + 1,
            error,
        };
        let problem = parse_problem(&line).map_err(at_line)?;
        if require_answers && problem.answer().is_none() {
            return Err(at_line(ProblemError::MissingAnswer {
                qid: Some(problem.qid().to_string()),
            }));
        }
        problems.push(problem);
    }
    Ok(problems)
}

/// Reads a JSONL file without a split spec.
pub fn load_file(path: &Path, require_answers: bool) -> Result<Vec<Problem>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_problems(BufReader::new(file), path, require_answers)
}

/// Loads a split, checking gold answers (except for test) and the expected count.
pub fn load_split(spec: &SplitSpec) -> Result<Vec<Problem>, DatasetError> {
    let problems = load_file(&spec.path, spec.label.requires_answers())?;
    if let Some(expected) = spec.size {
        if expected != problems.len() {
            return Err(DatasetError::CountMismatch {
                label: spec.label,
                expected,
                actual: problems.len(),
            });
        }
    }
    Ok(problems)
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    #[serde(default, rename = "split")]
    splits: Vec<SplitSpec>,
}

/// Maps split labels to files and expected sizes.
///
/// ```toml
/// [[split]]
/// label = "XS"
/// path = "train_xs.jsonl"
/// size = 160
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    splits: Vec<SplitSpec>,
}

impl Manifest {
    pub fn new(splits: Vec<SplitSpec>) -> Result<Self, DatasetError> {
        for (i, spec) in splits.iter().enumerate() {
            if splits[..i].iter().any(|s| s.label == spec.label) {
                return Err(DatasetError::DuplicateLabel(spec.label));
            }
        }
        Ok(Manifest { splits })
    }

    pub fn parse(text: &str, base_dir: &Path, path: &Path) -> Result<Self, DatasetError> {
        let file: ManifestFile = toml::from_str(text).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let splits = file
            .splits
            .into_iter()
            .map(|mut spec| {
                if spec.path.is_relative() {
                    spec.path = base_dir.join(&spec.path);
                }
                spec
            })
            .collect();
        Manifest::new(splits)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Manifest::parse(&text, base, path)
    }

    pub fn get(&self, label: SplitLabel) -> Result<&SplitSpec, DatasetError> {
        self.splits
            .iter()
            .find(|s| s.label == label)
            .ok_or(DatasetError::UnknownSplit(label))
    }

    pub fn splits(&self) -> &[SplitSpec] {
        &self.splits
    }
}
