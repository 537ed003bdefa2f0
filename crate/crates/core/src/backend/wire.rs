//! JSON bodies of the inference service.
//!
//! `POST /v1/score`
//!
//! ```json
//! {"requests":[{"request_id":"x1/1","source":"hypothesis: ...","candidates":["entailment","contradiction"]}]}
//! ```
//!
//! answered by
//!
//! ```json
//! {"responses":[{"request_id":"x1/1","greedy_token":"entailment","logits":[2.1,-1.3],"model_info":{...}}]}
//! ```
//!
//! `logits` is aligned with `candidates`. A response item may carry `error`
//! instead of a prediction. `GET /v1/health` returns a [`HealthReport`].

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequestWire {
    pub request_id: String,
    pub source: String,
    pub candidates: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBatchRequest {
    pub requests: Vec<ScoreRequestWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponseWire {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_info: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBatchResponse {
    pub responses: Vec<ScoreResponseWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePieces {
    pub token: String,
    pub pieces: usize,
    #[serde(default)]
    pub multi_piece: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    #[serde(default)]
    pub status: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub candidates: Vec<CandidatePieces>,
}
