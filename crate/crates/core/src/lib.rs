//! Evaluation harness for two-option fill-in-the-blank commonsense problems.
//!
//! Each problem is decomposed into two `hypothesis: ... premise: ...` source
//! strings, one per answer option. A text-to-text backend predicts a single
//! target token for each, and the pair of predictions is resolved into a
//! choice either from the greedy tokens alone or by comparing a softmax over
//! the two candidate-token logits.
//!
//! Module map:
//!
//! * [`dataset`]: JSONL parsing, validation and split manifests.
//! * [`templating`]: blank splitting, instance rendering, training files.
//! * [`scoring`]: the four-case resolution protocol.
//! * [`backend`]: the inference interface, scripted and remote backends.
//! * [`evaluation`]: per-split accuracy, leaderboard output, learning-curve AUC.
//! * [`cli`]: the `winoscore` command-line surface.

pub mod backend;
pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod scoring;
pub mod synth;
pub mod templating;

pub use backend::{Backend, BackendConfig, BackendError, RemoteBackend, ScoreRequest, ScriptedBackend};
pub use dataset::{DatasetError, Manifest, OptionSlot, Problem, ProblemError, SplitLabel, SplitSpec};
pub use evaluation::{EvalConfig, EvalError, EvalReport, LearningCurve};
pub use scoring::{Case, Prediction, Resolution};
pub use templating::{BlankSplit, RenderedInstance, TargetTokenPair, TemplateError};
