//! Resolution of the two per-problem predictions into one answer.
//!
//! Each instance yields a greedy first token and the logits of the positive
//! and negative candidate tokens. The joint pattern of greedy tokens falls
//! into one of four cases:
//!
//! 1. one instance decodes positive, the other negative;
//! 2. exactly one decodes a candidate token;
//! 3. neither does;
//! 4. both decode the same candidate token.
//!
//! Case 1 is unambiguous. In logit mode the remaining cases pick the instance
//! with the higher positive-token probability after a two-way softmax. In
//! greedy mode same-token outcomes fall back to Option1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OptionSlot;
use crate::templating::TargetTokenPair;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoringError {
    #[error("non-finite logit {0}")]
    NonFinite(String),
}

/// A backend's output for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub greedy_token: String,
    /// (positive-token logit, negative-token logit) at the first decode step.
    pub candidate_logits: (f64, f64),
}

impl Prediction {
    pub fn new(greedy_token: impl Into<String>, logit_pos: f64, logit_neg: f64) -> Result<Self, ScoringError> {
        for l in [logit_pos, logit_neg] {
            if !l.is_finite() {
                return Err(ScoringError::NonFinite(l.to_string()));
            }
        }
        Ok(Prediction {
            greedy_token: greedy_token.into(),
            candidate_logits: (logit_pos, logit_neg),
        })
    }

    pub fn logit_pos(&self) -> f64 {
        self.candidate_logits.0
    }

    pub fn logit_neg(&self) -> f64 {
        self.candidate_logits.1
    }

    /// A greedy token equal to a candidate must carry the larger (or equal)
    /// of the two candidate logits, since greedy decoding is an argmax over
    /// the full vocabulary.
    pub fn is_consistent(&self, tokens: &TargetTokenPair) -> bool {
        let (pos, neg) = self.candidate_logits;
        if !(pos.is_finite() && neg.is_finite()) {
            return false;
        }
        match token_class(&self.greedy_token, tokens) {
            TokenClass::Positive => pos >= neg,
            TokenClass::Negative => neg >= pos,
            TokenClass::Other => true,
        }
    }

    pub fn positive_probability(&self) -> Result<f64, ScoringError> {
        softmax_pair(self.logit_pos(), self.logit_neg()).map(|(p, _)| p)
    }
}

/// Two-way softmax with max subtraction. The smaller probability is computed
/// directly and the larger as its complement, so the pair sums to exactly 1.
pub fn softmax_pair(logit_pos: f64, logit_neg: f64) -> Result<(f64, f64), ScoringError> {
    for l in [logit_pos, logit_neg] {
        if !l.is_finite() {
            return Err(ScoringError::NonFinite(l.to_string()));
        }
    }
    let gap = (logit_pos - logit_neg).abs();
    let tail = (-gap).exp();
    let small = tail / (1.0 + tail);
    let large = 1.0 - small;
    Ok(if logit_pos >= logit_neg {
        (large, small)
    } else {
        (small, large)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Positive,
    Negative,
    Other,
}

// Decoded pieces may carry a leading space; candidate tokens never contain whitespace.
fn token_class(token: &str, tokens: &TargetTokenPair) -> TokenClass {
    let token = token.trim();
    if token == tokens.positive() {
        TokenClass::Positive
    } else if token == tokens.negative() {
        TokenClass::Negative
    } else {
        TokenClass::Other
    }
}

/// Joint outcome of the two greedy tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Case {
    Contrastive = 1,
    OneInSet = 2,
    NoneInSet = 3,
    SameInSet = 4,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::Contrastive, Case::OneInSet, Case::NoneInSet, Case::SameInSet];

    pub fn id(self) -> u8 {
        self as u8
    }
}

impl From<Case> for u8 {
    fn from(case: Case) -> u8 {
        case.id()
    }
}

impl TryFrom<u8> for Case {
    type Error = String;

    fn try_from(id: u8) -> Result<Self, Self::Error> {
        Case::ALL
            .into_iter()
            .find(|c| c.id() == id)
            .ok_or_else(|| format!("case id {id} outside 1..=4"))
    }
}

pub fn classify_case(pred_a: &Prediction, pred_b: &Prediction, tokens: &TargetTokenPair) -> Case {
    use TokenClass::*;
    match (token_class(&pred_a.greedy_token, tokens), token_class(&pred_b.greedy_token, tokens)) {
        (Positive, Negative) | (Negative, Positive) => Case::Contrastive,
        (Positive, Positive) | (Negative, Negative) => Case::SameInSet,
        (Other, Other) => Case::NoneInSet,
        _ => Case::OneInSet,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub choice: OptionSlot,
    #[serde(rename = "case_id")]
    pub case: Case,
    /// Positive-token probabilities of (Option1, Option2); logit mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<(f64, f64)>,
    pub tie_broken: bool,
    /// Set when the greedy mixed-outcome precedence rule decided the answer.
    #[serde(default)]
    pub precedence_rule: bool,
}

/// Logit-mode resolution. `pred_a` belongs to the Option1 instance.
///
/// Probabilities are compared through the logit gaps they are monotone in,
/// which keeps distinct gaps distinct even where both probabilities round to
/// the same double.
pub fn resolve_logit(
    pred_a: &Prediction,
    pred_b: &Prediction,
    tokens: &TargetTokenPair,
) -> Result<Resolution, ScoringError> {
    let case = classify_case(pred_a, pred_b, tokens);
    let scores = (pred_a.positive_probability()?, pred_b.positive_probability()?);
    let (choice, tie_broken) = if case == Case::Contrastive {
        if token_class(&pred_a.greedy_token, tokens) == TokenClass::Positive {
            (OptionSlot::Option1, false)
        } else {
            (OptionSlot::Option2, false)
        }
    } else {
        let gap_a = pred_a.logit_pos() - pred_a.logit_neg();
        let gap_b = pred_b.logit_pos() - pred_b.logit_neg();
        if gap_a > gap_b {
            (OptionSlot::Option1, false)
        } else if gap_b > gap_a {
            (OptionSlot::Option2, false)
        } else {
            (OptionSlot::Option1, true)
        }
    };
    Ok(Resolution {
        choice,
        case,
        scores: Some(scores),
        tie_broken,
        precedence_rule: false,
    })
}

/// Greedy-mode resolution from the decoded tokens alone.
///
/// Mixed outcomes (case 2) use a precedence rule: an instance decoding the
/// positive token beats any other token, and an instance decoding the
/// negative token loses to any other token.
pub fn resolve_greedy(pred_a: &Prediction, pred_b: &Prediction, tokens: &TargetTokenPair) -> Resolution {
    use TokenClass::*;
    let case = classify_case(pred_a, pred_b, tokens);
    let class_a = token_class(&pred_a.greedy_token, tokens);
    let class_b = token_class(&pred_b.greedy_token, tokens);
    let (choice, tie_broken) = match case {
        Case::Contrastive => {
            if class_a == Positive {
                (OptionSlot::Option1, false)
            } else {
                (OptionSlot::Option2, false)
            }
        }
        Case::OneInSet => match (class_a, class_b) {
            (Positive, _) | (_, Negative) => (OptionSlot::Option1, false),
            _ => (OptionSlot::Option2, false),
        },
        Case::NoneInSet | Case::SameInSet => (OptionSlot::Option1, true),
    };
    Resolution {
        choice,
        case,
        scores: None,
        tie_broken,
        precedence_rule: case == Case::OneInSet,
    }
}

/// Resolves in logit mode when `use_logit`, greedy mode otherwise.
pub fn resolve(
    pred_a: &Prediction,
    pred_b: &Prediction,
    tokens: &TargetTokenPair,
    use_logit: bool,
) -> Result<Resolution, ScoringError> {
    if use_logit {
        resolve_logit(pred_a, pred_b, tokens)
    } else {
        Ok(resolve_greedy(pred_a, pred_b, tokens))
    }
}
