//! Split evaluation, leaderboard predictions and learning-curve AUC.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ScoreRequest};
use crate::dataset::{OptionSlot, Problem};
use crate::scoring::{resolve, Case, Resolution};
use crate::templating::{render_pair, TargetTokenPair, TemplateError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("problem '{0}' has no gold answer")]
    MissingGold(String),
    #[error("qid '{0}' appears more than once")]
    DuplicateQid(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend failed on problem '{qid}': {error}")]
    Backend { qid: String, error: BackendError },
    #[error("backend rejected the batch: {0}")]
    Batch(BackendError),
    #[error("no items were evaluated")]
    NoItems,
    #[error("report is internally inconsistent: {0}")]
    Inconsistent(String),
    #[error("invalid learning curve: {0}")]
    Curve(String),
    #[error("writing predictions: {0}")]
    Io(#[from] std::io::Error),
}

impl EvalError {
    pub fn is_backend(&self) -> bool {
        matches!(self, EvalError::Backend { .. } | EvalError::Batch(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// The first backend error aborts the run.
    #[default]
    Abort,
    /// Failed items are excluded from the totals and listed in the report.
    Skip,
}

/// One condition: answer-token pair and whether logit resolution is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tokens: TargetTokenPair,
    pub use_logit: bool,
    pub label: String,
    #[serde(default)]
    pub on_failure: FailurePolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tokens: TargetTokenPair::entailment(),
            use_logit: true,
            label: "entailment/contradiction, logit".into(),
            on_failure: FailurePolicy::Abort,
        }
    }
}

impl EvalConfig {
    pub fn new(tokens: TargetTokenPair, use_logit: bool) -> Self {
        let label = format!(
            "{}/{}{}",
            tokens.positive(),
            tokens.negative(),
            if use_logit { ", logit" } else { "" }
        );
        EvalConfig {
            tokens,
            use_logit,
            label,
            on_failure: FailurePolicy::Abort,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_failure_policy(mut self, policy: FailurePolicy) -> Self {
        self.on_failure = policy;
        self
    }
}

/// Request id used for one instance: `{qid}/{1|2}`.
pub fn request_id(qid: &str, slot: OptionSlot) -> String {
    format!("{qid}/{}", slot.label())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub qid: String,
    pub error: String,
}

enum Outcome {
    Resolved(Resolution),
    Skipped(SkippedItem),
}

/// Renders, predicts and resolves every problem, preserving input order.
fn run_problems(problems: &[Problem], backend: &dyn Backend, config: &EvalConfig) -> Result<Vec<Outcome>, EvalError> {
    let mut seen = HashSet::with_capacity(problems.len());
    let mut requests = Vec::with_capacity(problems.len() * 2);
    for problem in problems {
        if !seen.insert(problem.qid()) {
            return Err(EvalError::DuplicateQid(problem.qid().to_string()));
        }
        for instance in render_pair(problem)? {
            requests.push(ScoreRequest::new(
                request_id(problem.qid(), instance.option_slot),
                instance.source,
                config.tokens.clone(),
            ));
        }
    }
    let predictions = backend.predict_batch(&requests).map_err(EvalError::Batch)?;
    if predictions.len() != requests.len() {
        return Err(EvalError::Batch(BackendError::Malformed(format!(
            "{} predictions for {} requests",
            predictions.len(),
            requests.len()
        ))));
    }

    let mut outcomes = Vec::with_capacity(problems.len());
    let mut predictions = predictions.into_iter();
    for problem in problems {
        let first = predictions.next().expect("length checked");
        let second = predictions.next().expect("length checked");
        let resolved = first.and_then(|a| {
            let b = second?;
            resolve(&a, &b, &config.tokens, config.use_logit).map_err(|e| BackendError::Malformed(e.to_string()))
        });
        match resolved {
            Ok(resolution) => outcomes.push(Outcome::Resolved(resolution)),
            Err(error) => match config.on_failure {
                FailurePolicy::Abort => {
                    return Err(EvalError::Backend {
                        qid: problem.qid().to_string(),
                        error,
                    })
                }
                FailurePolicy::Skip => {
                    warn!("skipping problem '{}': {error}", problem.qid());
                    outcomes.push(Outcome::Skipped(SkippedItem {
                        qid: problem.qid().to_string(),
                        error: error.to_string(),
                    }));
                }
            },
        }
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseHistogram {
    pub case1: usize,
    pub case2: usize,
    pub case3: usize,
    pub case4: usize,
}

impl CaseHistogram {
    pub fn record(&mut self, case: Case) {
        *self.slot_mut(case) += 1;
    }

    pub fn get(&self, case: Case) -> usize {
        match case {
            Case::Contrastive => self.case1,
            Case::OneInSet => self.case2,
            Case::NoneInSet => self.case3,
            Case::SameInSet => self.case4,
        }
    }

    fn slot_mut(&mut self, case: Case) -> &mut usize {
        match case {
            Case::Contrastive => &mut self.case1,
            Case::OneInSet => &mut self.case2,
            Case::NoneInSet => &mut self.case3,
            Case::SameInSet => &mut self.case4,
        }
    }

    pub fn total(&self) -> usize {
        self.case1 + self.case2 + self.case3 + self.case4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub qid: String,
    pub gold: OptionSlot,
    pub choice: OptionSlot,
    pub correct: bool,
    pub case_id: Case,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<(f64, f64)>,
    pub tie_broken: bool,
    #[serde(default)]
    pub precedence_rule: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: String,
    pub zero_shot: bool,
    pub tokens: TargetTokenPair,
    pub use_logit: bool,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub case_histogram: CaseHistogram,
    pub tie_count: usize,
    pub precedence_count: usize,
    #[serde(default)]
    pub skipped: Vec<SkippedItem>,
    pub items: Vec<ItemRecord>,
}

impl EvalReport {
    fn from_items(split: &str, config: &EvalConfig, items: Vec<ItemRecord>, skipped: Vec<SkippedItem>) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::NoItems);
        }
        let mut case_histogram = CaseHistogram::default();
        for item in &items {
            case_histogram.record(item.case_id);
        }
        let n_items = items.len();
        let n_correct = items.iter().filter(|i| i.correct).count();
        let report = EvalReport {
            split: split.to_string(),
            mode: config.label.clone(),
            zero_shot: false,
            tokens: config.tokens.clone(),
            use_logit: config.use_logit,
            n_items,
            n_correct,
            accuracy: n_correct as f64 / n_items as f64,
            case_histogram,
            tie_count: items.iter().filter(|i| i.tie_broken).count(),
            precedence_count: items.iter().filter(|i| i.precedence_rule).count(),
            skipped,
            items,
        };
        report.check_consistency()?;
        Ok(report)
    }

    /// Recomputes every aggregate from the per-item records.
    pub fn check_consistency(&self) -> Result<(), EvalError> {
        let fail = |m: String| Err(EvalError::Inconsistent(m));
        if self.items.len() != self.n_items {
            return fail(format!("{} item records for n_items = {}", self.items.len(), self.n_items));
        }
        if self.n_correct > self.n_items {
            return fail(format!("n_correct {} > n_items {}", self.n_correct, self.n_items));
        }
        let correct = self.items.iter().filter(|i| i.correct && i.choice == i.gold).count();
        if correct != self.n_correct || self.items.iter().any(|i| i.correct != (i.choice == i.gold)) {
            return fail("per-item correctness disagrees with n_correct".into());
        }
        if self.n_items == 0 || self.accuracy != self.n_correct as f64 / self.n_items as f64 {
            return fail(format!("accuracy {} != {}/{}", self.accuracy, self.n_correct, self.n_items));
        }
        if self.case_histogram.total() != self.n_items {
            return fail(format!("case histogram sums to {}", self.case_histogram.total()));
        }
        for case in Case::ALL {
            let counted = self.items.iter().filter(|i| i.case_id == case).count();
            if counted != self.case_histogram.get(case) {
                return fail(format!("case {} count mismatch", case.id()));
            }
        }
        if self.tie_count != self.items.iter().filter(|i| i.tie_broken).count() {
            return fail("tie count mismatch".into());
        }
        if self.precedence_count != self.items.iter().filter(|i| i.precedence_rule).count()
            || self.precedence_count > self.case_histogram.case2
        {
            return fail("precedence count mismatch".into());
        }
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let kind = if self.zero_shot { " (zero-shot)" } else { "" };
        let _ = writeln!(out, "split      {}{kind}", self.split);
        let _ = writeln!(out, "condition  {}", self.mode);
        let _ = writeln!(out, "items      {}", self.n_items);
        let _ = writeln!(out, "correct    {}", self.n_correct);
        let _ = writeln!(out, "accuracy   {:.3}", self.accuracy);
        let _ = writeln!(out, "case       count");
        for case in Case::ALL {
            let _ = writeln!(out, "  {}        {}", case.id(), self.case_histogram.get(case));
        }
        let _ = writeln!(out, "ties       {}", self.tie_count);
        if !self.use_logit {
            let _ = writeln!(out, "precedence {}", self.precedence_count);
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped    {}", self.skipped.len());
        }
        out
    }
}

/// Accuracy of one split under one condition. Every problem needs a gold
/// answer; the report is checked for internal consistency before returning.
pub fn evaluate_split(
    split: &str,
    problems: &[Problem],
    backend: &dyn Backend,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let golds = problems
        .iter()
        .map(|p| p.answer().ok_or_else(|| EvalError::MissingGold(p.qid().to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes = run_problems(problems, backend, config)?;
    let mut items = Vec::with_capacity(problems.len());
    let mut skipped = Vec::new();
    for ((problem, gold), outcome) in problems.iter().zip(golds).zip(outcomes) {
        match outcome {
            Outcome::Resolved(r) => items.push(ItemRecord {
                qid: problem.qid().to_string(),
                gold,
                choice: r.choice,
                correct: r.choice == gold,
                case_id: r.case,
                scores: r.scores,
                tie_broken: r.tie_broken,
                precedence_rule: r.precedence_rule,
            }),
            Outcome::Skipped(s) => skipped.push(s),
        }
    }
    EvalReport::from_items(split, config, items, skipped)
}

/// [`evaluate_split`] against a model that was never fine-tuned; only the
/// report labeling differs.
pub fn zero_shot_eval(
    split: &str,
    problems: &[Problem],
    backend: &dyn Backend,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut report = evaluate_split(split, problems, backend, config)?;
    report.zero_shot = true;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnlabeledPredictions {
    pub choices: Vec<(String, OptionSlot)>,
    pub skipped: Vec<SkippedItem>,
}

/// Choices for problems that may lack gold answers, in input order.
pub fn predict_unlabeled(
    problems: &[Problem],
    backend: &dyn Backend,
    config: &EvalConfig,
) -> Result<UnlabeledPredictions, EvalError> {
    let mut out = UnlabeledPredictions::default();
    for (problem, outcome) in problems.iter().zip(run_problems(problems, backend, config)?) {
        match outcome {
            Outcome::Resolved(r) => out.choices.push((problem.qid().to_string(), r.choice)),
            Outcome::Skipped(s) => out.skipped.push(s),
        }
    }
    Ok(out)
}

/// Writes `qID,choice` lines with choice `1` or `2`.
pub fn write_leaderboard_csv<W: Write>(choices: &[(String, OptionSlot)], sink: W) -> Result<(), EvalError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    for (qid, choice) in choices {
        writer
            .write_record([qid.as_str(), choice.label()])
            .map_err(|e| EvalError::Io(e.into()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Accuracy by training size, smallest size first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    points: Vec<(String, f64)>,
}

impl LearningCurve {
    pub fn new(points: Vec<(String, f64)>) -> Result<Self, EvalError> {
        if points.len() < 2 {
            return Err(EvalError::Curve(format!("need at least 2 points, got {}", points.len())));
        }
        for (i, (label, accuracy)) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(accuracy) {
                return Err(EvalError::Curve(format!("accuracy {accuracy} for '{label}' is outside [0, 1]")));
            }
            if points[..i].iter().any(|(l, _)| l == label) {
                return Err(EvalError::Curve(format!("label '{label}' repeats")));
            }
        }
        Ok(LearningCurve { points })
    }

    /// Labels XS..XL for five accuracies, `p1..pn` otherwise.
    pub fn from_accuracies(accuracies: &[f64]) -> Result<Self, EvalError> {
        const SIZES: [&str; 5] = ["XS", "S", "M", "L", "XL"];
        let points = accuracies
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let label = if accuracies.len() == SIZES.len() {
                    SIZES[i].to_string()
                } else {
                    format!("p{}", i + 1)
                };
                (label, a)
            })
            .collect();
        LearningCurve::new(points)
    }

    pub fn points(&self) -> &[(String, f64)] {
        &self.points
    }

    pub fn accuracies(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|(_, a)| *a)
    }
}

/// Placement of curve points along the training-size axis.
#[derive(Debug, Clone, PartialEq)]
pub enum Spacing {
    /// Points one unit apart.
    Equal,
    /// Points at ln(size); sizes must be positive and strictly increasing.
    LogSize(Vec<f64>),
}

/// Trapezoidal area under the curve with equally spaced points, normalized
/// to unit width.
pub fn learning_curve_auc(curve: &LearningCurve) -> f64 {
    learning_curve_auc_with(curve, &Spacing::Equal).expect("equal spacing is always valid")
}

pub fn learning_curve_auc_with(curve: &LearningCurve, spacing: &Spacing) -> Result<f64, EvalError> {
    let n = curve.points.len();
    let xs: Vec<f64> = match spacing {
        Spacing::Equal => (0..n).map(|i| i as f64).collect(),
        Spacing::LogSize(sizes) => {
            if sizes.len() != n {
                return Err(EvalError::Curve(format!("{} sizes for {n} points", sizes.len())));
            }
            if sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(EvalError::Curve("sizes must be positive".into()));
            }
            if sizes.windows(2).any(|w| w[1] <= w[0]) {
                return Err(EvalError::Curve("sizes must be strictly increasing".into()));
            }
            sizes.iter().map(|s| s.ln()).collect()
        }
    };
    let ys: Vec<f64> = curve.accuracies().collect();
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    Ok(area / (xs[n - 1] - xs[0]))
}
