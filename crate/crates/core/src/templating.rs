//! Decomposition of a problem into two hypothesis/premise source strings.
//!
//! For the sentence `He never comes to my home, but I always go to his house
//! because the _ is smaller.` and the option `home`, the rendered source is
//!
//! ```text
//! hypothesis: home is smaller. premise: He never comes to my home, but I always go to his house because the
//! ```
//!
//! The hypothesis is the option followed by everything after the blank; the
//! premise is everything before it. Whitespace is collapsed to a single space
//! only where template pieces are joined; options and the sentence are
//! otherwise copied verbatim.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{OptionSlot, Problem};

pub const BLANK: &str = "_";
pub const HYPOTHESIS_TAG: &str = "hypothesis: ";
pub const PREMISE_SEPARATOR: &str = " premise: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("sentence has no blank marker '_'")]
    MissingBlank,
    #[error("sentence has {0} blank markers, expected exactly one")]
    MultipleBlanks(usize),
    #[error("problem '{0}' has no gold answer")]
    MissingAnswer(String),
    #[error("problem '{0}': rendered source would contain more than one \"premise: \" separator")]
    AmbiguousSeparator(String),
    #[error("invalid target token pair: {0}")]
    InvalidTokens(String),
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offsets of every blank marker: an underscore bounded on both sides by
/// the string edge, whitespace or punctuation. Underscores inside identifiers
/// such as `snake_case` and runs like `__` are not markers.
pub fn find_blanks(sentence: &str) -> Vec<usize> {
    let mut found = Vec::new();
    let mut prev: Option<char> = None;
    let mut chars = sentence.char_indices().peekable();
    while let Some((offset, c)) = chars.next() {
        let next = chars.peek().map(|&(_, n)| n);
        if c == '_' && !prev.is_some_and(is_word_char) && !next.is_some_and(is_word_char) {
            found.push(offset);
        }
        prev = Some(c);
    }
    found
}

/// The sentence text on either side of its blank marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlankSplit {
    pub prefix: String,
    pub suffix: String,
}

impl BlankSplit {
    pub fn reconstruct(&self) -> String {
        format!("{}{BLANK}{}", self.prefix, self.suffix)
    }
}

pub fn split_at_blank(sentence: &str) -> Result<BlankSplit, TemplateError> {
    match find_blanks(sentence).as_slice() {
        [] => Err(TemplateError::MissingBlank),
        &[offset] => Ok(BlankSplit {
            prefix: sentence[..offset].to_string(),
            suffix: sentence[offset + BLANK.len()..].to_string(),
        }),
        many => Err(TemplateError::MultipleBlanks(many.len())),
    }
}

/// Concatenates `left` and `right`, collapsing any whitespace at the seam to
/// one space. No space is inserted when neither side has one.
fn join_at_seam(left: &str, right: &str) -> String {
    let l = left.trim_end();
    let r = right.trim_start();
    if l.len() != left.len() || r.len() != right.len() {
        if l.is_empty() {
            return r.to_string();
        }
        if r.is_empty() {
            return l.to_string();
        }
        format!("{l} {r}")
    } else {
        format!("{l}{r}")
    }
}

/// One source string, embedding one of the two options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInstance {
    pub qid: String,
    pub option_slot: OptionSlot,
    pub source: String,
}

impl RenderedInstance {
    /// Text between `hypothesis: ` and the premise separator.
    pub fn hypothesis(&self) -> &str {
        let body = &self.source[HYPOTHESIS_TAG.len()..];
        let end = body.find(PREMISE_SEPARATOR).unwrap_or(body.len());
        &body[..end]
    }

    pub fn premise(&self) -> &str {
        match self.source.find(PREMISE_SEPARATOR) {
            Some(i) => &self.source[i + PREMISE_SEPARATOR.len()..],
            None => "",
        }
    }
}

/// Renders `hypothesis: <option><suffix> premise: <prefix>`.
pub fn render_instance(problem: &Problem, slot: OptionSlot) -> Result<RenderedInstance, TemplateError> {
    let split = split_at_blank(problem.sentence())?;
    let hypothesis = join_at_seam(problem.option(slot), &split.suffix);
    let premise = split.prefix.trim();
    let source = format!(
        "{HYPOTHESIS_TAG}{}{PREMISE_SEPARATOR}{premise}",
        hypothesis.trim()
    );
    if source.matches(PREMISE_SEPARATOR).count() != 1 {
        return Err(TemplateError::AmbiguousSeparator(problem.qid().to_string()));
    }
    Ok(RenderedInstance {
        qid: problem.qid().to_string(),
        option_slot: slot,
        source,
    })
}

/// Both instances of a problem, Option1 first.
pub fn render_pair(problem: &Problem) -> Result<[RenderedInstance; 2], TemplateError> {
    Ok([
        render_instance(problem, OptionSlot::Option1)?,
        render_instance(problem, OptionSlot::Option2)?,
    ])
}

/// The answer tokens a model emits for the correct (positive) and incorrect
/// (negative) instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPair", into = "RawPair")]
pub struct TargetTokenPair {
    positive: String,
    negative: String,
}

#[derive(Serialize, Deserialize)]
struct RawPair {
    positive: String,
    negative: String,
}

impl TryFrom<RawPair> for TargetTokenPair {
    type Error = TemplateError;

    fn try_from(raw: RawPair) -> Result<Self, Self::Error> {
        TargetTokenPair::new(raw.positive, raw.negative)
    }
}

impl From<TargetTokenPair> for RawPair {
    fn from(pair: TargetTokenPair) -> Self {
        RawPair {
            positive: pair.positive,
            negative: pair.negative,
        }
    }
}

impl TargetTokenPair {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>) -> Result<Self, TemplateError> {
        let positive = positive.into();
        let negative = negative.into();
        for token in [&positive, &negative] {
            if token.is_empty() {
                return Err(TemplateError::InvalidTokens("tokens must be non-empty".into()));
            }
            if token.chars().any(char::is_whitespace) {
                return Err(TemplateError::InvalidTokens(format!(
                    "token '{token}' contains whitespace"
                )));
            }
        }
        if positive == negative {
            return Err(TemplateError::InvalidTokens(format!(
                "positive and negative are both '{positive}'"
            )));
        }
        Ok(TargetTokenPair { positive, negative })
    }

    pub fn entailment() -> Self {
        TargetTokenPair {
            positive: "entailment".into(),
            negative: "contradiction".into(),
        }
    }

    pub fn true_false() -> Self {
        TargetTokenPair {
            positive: "true".into(),
            negative: "false".into(),
        }
    }

    pub fn positive(&self) -> &str {
        &self.positive
    }

    pub fn negative(&self) -> &str {
        &self.negative
    }
}

impl Default for TargetTokenPair {
    fn default() -> Self {
        TargetTokenPair::entailment()
    }
}

impl fmt::Display for TargetTokenPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.positive, self.negative)
    }
}

/// Parses `POS,NEG`.
impl FromStr for TargetTokenPair {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (pos, neg) = s
            .split_once(',')
            .ok_or_else(|| TemplateError::InvalidTokens(format!("expected POS,NEG, got '{s}'")))?;
        TargetTokenPair::new(pos.trim(), neg.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainingPair {
    pub source: String,
    pub target: String,
}

/// The two supervised examples for a labeled problem, Option1 instance first.
/// The instance embedding the gold option is labeled positive.
pub fn build_training_pairs(
    problem: &Problem,
    tokens: &TargetTokenPair,
) -> Result<[TrainingPair; 2], TemplateError> {
    let gold = problem
        .answer()
        .ok_or_else(|| TemplateError::MissingAnswer(problem.qid().to_string()))?;
    let [first, second] = render_pair(problem)?;
    let label = |instance: RenderedInstance| TrainingPair {
        target: if instance.option_slot == gold {
            tokens.positive.clone()
        } else {
            tokens.negative.clone()
        },
        source: instance.source,
    };
    Ok([label(first), label(second)])
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("writing training file: {0}")]
    Io(#[from] std::io::Error),
}

/// Escapes tabs and newlines as the two-character sequences `\t` and `\n`.
pub fn escape_tsv_field(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// Writes `source\ttarget\n` lines, two per problem, in input order. Every
/// problem is validated before anything is written.
pub fn emit_training_file<W: Write>(
    problems: &[Problem],
    tokens: &TargetTokenPair,
    sink: &mut W,
) -> Result<usize, EmitError> {
    let pairs = problems
        .iter()
        .map(|p| build_training_pairs(p, tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let mut written = 0;
    for pair in pairs.iter().flatten() {
        writeln!(sink, "{}\t{}", escape_tsv_field(&pair.source), pair.target)?;
        written += 1;
    }
    sink.flush()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SENTENCE: &str =
        "He never comes to my home, but I always go to his house because the _ is smaller.";
    const ROW1: &str = "hypothesis: home is smaller. premise: He never comes to my home, but I always go to his house because the";
    const ROW2: &str = "hypothesis: house is smaller. premise: He never comes to my home, but I always go to his house because the";

    fn worked(answer: OptionSlot) -> Problem {
        Problem::new("x1", SENTENCE, "home", "house", Some(answer)).unwrap()
    }

    #[test]
    fn split_worked_example() {
        let split = split_at_blank(SENTENCE).unwrap();
        assert_eq!(
            split.prefix,
            "He never comes to my home, but I always go to his house because the "
        );
        assert_eq!(split.suffix, " is smaller.");
        assert_eq!(split.reconstruct(), SENTENCE);
    }

    #[test]
    fn split_edges() {
        let split = split_at_blank("_ runs fast.").unwrap();
        assert_eq!(split.prefix, "");
        assert_eq!(split.suffix, " runs fast.");
        assert_eq!(split_at_blank("a _ b _ c"), Err(TemplateError::MultipleBlanks(2)));
        assert_eq!(split_at_blank("none"), Err(TemplateError::MissingBlank));
    }

    #[test]
    fn blank_marker_boundaries() {
        assert_eq!(find_blanks("the _'s car"), vec![4]);
        assert_eq!(find_blanks("(_)"), vec![1]);
        assert!(find_blanks("snake_case __ x_").is_empty());
        assert_eq!(find_blanks("_"), vec![0]);
        assert_eq!(find_blanks("é _ ü"), vec![3]);
    }

    #[test]
    fn renders_both_rows_byte_exact() {
        let p = worked(OptionSlot::Option1);
        let [a, b] = render_pair(&p).unwrap();
        assert_eq!(a.source, ROW1);
        assert_eq!(b.source, ROW2);
        assert_eq!(a.option_slot, OptionSlot::Option1);
        assert_eq!(b.qid, "x1");
        assert_eq!(a.hypothesis(), "home is smaller.");
        assert_eq!(
            a.premise(),
            "He never comes to my home, but I always go to his house because the"
        );
    }

    #[test]
    fn sentence_initial_blank_has_empty_premise() {
        let p = Problem::new("q", "_ won.", "Ann", "Bob", None).unwrap();
        let r = render_instance(&p, OptionSlot::Option1).unwrap();
        assert_eq!(r.source, "hypothesis: Ann won. premise: ");
        assert_eq!(r.premise(), "");
    }

    #[test]
    fn seams_collapse_whitespace_only_at_joins() {
        let p = Problem::new("q", "The  dog saw the _   and  ran.", "cat ", "fox", None).unwrap();
        let [a, b] = render_pair(&p).unwrap();
        assert_eq!(a.source, "hypothesis: cat and  ran. premise: The  dog saw the");
        assert_eq!(b.source, "hypothesis: fox and  ran. premise: The  dog saw the");
        // No seam space is invented when the blank is glued to punctuation.
        let p = Problem::new("q", "It was the _'s fault.", "cat", "dog", None).unwrap();
        assert_eq!(
            render_instance(&p, OptionSlot::Option2).unwrap().source,
            "hypothesis: dog's fault. premise: It was the"
        );
    }

    #[test]
    fn separator_inside_text_is_rejected() {
        let p = Problem::new("q", "My premise: _ is right.", "Al", "Bo", None).unwrap();
        assert!(render_instance(&p, OptionSlot::Option1).is_ok());
        let p = Problem::new("q", "A _ b premise: c", "Al", "Bo", None).unwrap();
        assert_eq!(
            render_instance(&p, OptionSlot::Option1),
            Err(TemplateError::AmbiguousSeparator("q".into()))
        );
    }

    #[test]
    fn training_pairs_follow_gold() {
        let pairs = build_training_pairs(&worked(OptionSlot::Option1), &TargetTokenPair::entailment()).unwrap();
        assert_eq!(pairs[0], TrainingPair { source: ROW1.into(), target: "entailment".into() });
        assert_eq!(pairs[1], TrainingPair { source: ROW2.into(), target: "contradiction".into() });

        let twin = build_training_pairs(&worked(OptionSlot::Option2), &TargetTokenPair::entailment()).unwrap();
        assert_eq!(twin[0].target, "contradiction");
        assert_eq!(twin[1].target, "entailment");

        let tf = build_training_pairs(&worked(OptionSlot::Option1), &TargetTokenPair::true_false()).unwrap();
        assert_eq!((tf[0].source.as_str(), tf[0].target.as_str()), (ROW1, "true"));
        assert_eq!((tf[1].source.as_str(), tf[1].target.as_str()), (ROW2, "false"));

        let unlabeled = worked(OptionSlot::Option1).with_answer(None);
        assert_eq!(
            build_training_pairs(&unlabeled, &TargetTokenPair::entailment()),
            Err(TemplateError::MissingAnswer("x1".into()))
        );
    }

    #[test]
    fn token_pair_validation() {
        assert!(TargetTokenPair::new("a", "a").is_err());
        assert!(TargetTokenPair::new("", "b").is_err());
        assert!(TargetTokenPair::new("a b", "c").is_err());
        let pair: TargetTokenPair = "true,false".parse().unwrap();
        assert_eq!(pair, TargetTokenPair::true_false());
        assert!("entailment".parse::<TargetTokenPair>().is_err());
        let json = serde_json::to_string(&pair).unwrap();
        assert_eq!(json, r#"{"positive":"true","negative":"false"}"#);
        assert!(serde_json::from_str::<TargetTokenPair>(r#"{"positive":"x","negative":"x"}"#).is_err());
    }

    #[test]
    fn emit_counts_and_order() {
        let tokens = TargetTokenPair::entailment();
        let mut out = Vec::new();
        assert_eq!(emit_training_file(&[], &tokens, &mut out).unwrap(), 0);
        assert!(out.is_empty());

        let mut out = Vec::new();
        assert_eq!(emit_training_file(&[worked(OptionSlot::Option1)], &tokens, &mut out).unwrap(), 2);
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{ROW1}\tentailment\n{ROW2}\tcontradiction\n")
        );

        // Five hand-built problems: lines 1,3,5,7,9 are the Option1 instances.
        let problems: Vec<Problem> = (0..5)
            .map(|i| {
                let gold = if i % 2 == 0 { OptionSlot::Option1 } else { OptionSlot::Option2 };
                Problem::new(format!("p{i}"), format!("The _ won game {i}."), "Ann", "Bob", Some(gold)).unwrap()
            })
            .collect();
        let mut out = Vec::new();
        assert_eq!(emit_training_file(&problems, &tokens, &mut out).unwrap(), 10);
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        for (n, line) in lines.iter().enumerate() {
            let option = if n % 2 == 0 { "Ann" } else { "Bob" };
            assert!(line.starts_with(&format!("hypothesis: {option} won game {}.", n / 2)), "{line}");
        }
        assert!(lines[2].ends_with("\tcontradiction"));
        assert!(lines[3].ends_with("\tentailment"));
    }

    #[test]
    fn emit_escapes_tabs_and_newlines() {
        let p = Problem::new("t", "A\tb _ c\nd", "x", "y", Some(OptionSlot::Option1)).unwrap();
        let mut out = Vec::new();
        emit_training_file(&[p], &TargetTokenPair::entailment(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("hypothesis: x c\\nd premise: A\\tb\tentailment\n"));
    }

    #[test]
    fn emit_rejects_unlabeled_before_writing() {
        let p = worked(OptionSlot::Option1);
        let mut out = Vec::new();
        let err = emit_training_file(&[p.clone(), p.with_answer(None)], &TargetTokenPair::entailment(), &mut out);
        assert!(matches!(err, Err(EmitError::Template(TemplateError::MissingAnswer(_)))));
        assert!(out.is_empty());
    }

    fn clean_word() -> impl Strategy<Value = String> {
        "[A-Za-z,.']{1,7}"
    }

    proptest! {
        // Single-space seams reconstruct the sentence byte-exactly.
        #[test]
        fn reconstruction_through_template(
            before in prop::collection::vec(clean_word(), 0..6),
            after in prop::collection::vec(clean_word(), 0..6),
            option1 in "[A-Za-z]{1,6}( [A-Za-z]{1,6})?",
            option2 in "[0-9]{1,6}",
        ) {
            let mut words = before.clone();
            words.push(BLANK.to_string());
            words.extend(after.clone());
            let sentence = words.join(" ");
            let p = Problem::new("r", sentence.clone(), option1, option2, None).unwrap();
            for slot in OptionSlot::BOTH {
                let r = render_instance(&p, slot).unwrap();
                prop_assert!(r.source.starts_with(HYPOTHESIS_TAG));
                prop_assert_eq!(r.source.matches(PREMISE_SEPARATOR).count(), 1);
                prop_assert!(r.source.contains(p.option(slot)));
                let rest = &r.hypothesis()[p.option(slot).len()..];
                let rebuilt = if r.premise().is_empty() {
                    format!("{BLANK}{rest}")
                } else {
                    format!("{} {BLANK}{rest}", r.premise())
                };
                prop_assert_eq!(rebuilt, sentence.clone());
            }
        }

        // Twin instances differ exactly in the option substring.
        #[test]
        fn twins_differ_only_in_option(
            sentence in "[A-Za-z ,.]{0,15} _ [A-Za-z ,.]{0,15}",
            option1 in "[a-z]{1,5}",
            option2 in "[A-Z]{1,5}",
        ) {
            let p = Problem::new("t", sentence, option1.clone(), option2.clone(), None).unwrap();
            let [a, b] = render_pair(&p).unwrap();
            let lead = HYPOTHESIS_TAG.len();
            prop_assert_eq!(&a.source[..lead], &b.source[..lead]);
            prop_assert_eq!(&a.source[lead..lead + option1.len()], option1.as_str());
            prop_assert_eq!(&b.source[lead..lead + option2.len()], option2.as_str());
            prop_assert_eq!(&a.source[lead + option1.len()..], &b.source[lead + option2.len()..]);
        }

        #[test]
        fn one_positive_one_negative(
            pos in "[a-z]{1,8}",
            neg in "[A-Z]{1,8}",
            gold in prop_oneof![Just(OptionSlot::Option1), Just(OptionSlot::Option2)],
        ) {
            let tokens = TargetTokenPair::new(pos.clone(), neg.clone()).unwrap();
            let p = worked(gold);
            let pairs = build_training_pairs(&p, &tokens).unwrap();
            let positives = pairs.iter().filter(|t| t.target == pos).count();
            let negatives = pairs.iter().filter(|t| t.target == neg).count();
            prop_assert_eq!((positives, negatives), (1, 1));
            let gold_index = if gold == OptionSlot::Option1 { 0 } else { 1 };
            prop_assert_eq!(&pairs[gold_index].target, &pos);
        }
    }
}
