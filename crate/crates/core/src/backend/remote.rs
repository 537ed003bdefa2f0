use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::wire::{HealthReport, ScoreBatchRequest, ScoreBatchResponse, ScoreRequestWire};
use super::{check_batch, check_request, run_bounded, Backend, BackendConfig, BackendError, BatchResult, ScoreRequest};
use crate::scoring::Prediction;

/// HTTP client for the inference service.
///
/// Batches are split into chunks of `batch_size` requests; at most
/// `max_in_flight` chunks are on the wire at once. Retryable failures are
/// retried `retries` times with exponential backoff and jitter.
pub struct RemoteBackend {
    config: BackendConfig,
    client: Client,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(RemoteBackend { config, client })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint.trim_end_matches('/'))
    }

    pub fn health(&self) -> Result<HealthReport, BackendError> {
        self.with_retries(|attempts| {
            let response = self
                .client
                .get(self.url("/v1/health"))
                .send()
                .map_err(|e| transport_error(e, attempts))?;
            let status = response.status();
            let body = response.text().map_err(|e| transport_error(e, attempts))?;
            if !status.is_success() {
                return Err(service_error(status, body));
            }
            serde_json::from_str(&body).map_err(|e| BackendError::Malformed(e.to_string()))
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base.as_secs_f64() * 2f64.powi(attempt as i32);
        let capped = base.min(self.config.backoff_max.as_secs_f64());
        let jitter = rand::rng().random_range(0.5..=1.0);
        Duration::from_secs_f64(capped * jitter)
    }

    fn with_retries<T>(&self, mut op: impl FnMut(u32) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match op(attempt + 1) {
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    let delay = self.backoff(attempt);
                    warn!("attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                    thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn send_chunk(&self, chunk: &[ScoreRequest]) -> Result<BatchResult, BackendError> {
        let body = ScoreBatchRequest {
            requests: chunk
                .iter()
                .map(|r| ScoreRequestWire {
                    request_id: r.request_id.clone(),
                    source: r.source.clone(),
                    candidates: [
                        r.candidate_tokens.positive().to_string(),
                        r.candidate_tokens.negative().to_string(),
                    ],
                })
                .collect(),
        };
        let parsed: ScoreBatchResponse = self.with_retries(|attempts| {
            debug!("POST /v1/score with {} request(s), attempt {attempts}", chunk.len());
            let response = self
                .client
                .post(self.url("/v1/score"))
                .json(&body)
                .send()
                .map_err(|e| transport_error(e, attempts))?;
            let status = response.status();
            let text = response.text().map_err(|e| transport_error(e, attempts))?;
            if !status.is_success() {
                return Err(service_error(status, text));
            }
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
        })?;
        match_responses(chunk, parsed)
    }
}

fn transport_error(e: reqwest::Error, attempts: u32) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout { attempts }
    } else {
        let mut message = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(inner) = source {
            message.push_str(": ");
            message.push_str(&inner.to_string());
            source = inner.source();
        }
        BackendError::Transport { attempts, message }
    }
}

fn service_error(status: StatusCode, body: String) -> BackendError {
    BackendError::Service {
        status: status.as_u16(),
        message: body.chars().take(512).collect(),
    }
}

/// Aligns response items with the chunk by request_id and validates each one.
fn match_responses(chunk: &[ScoreRequest], parsed: ScoreBatchResponse) -> Result<BatchResult, BackendError> {
    let mut by_id = HashMap::with_capacity(parsed.responses.len());
    for item in parsed.responses {
        let id = item.request_id.clone();
        if by_id.insert(id.clone(), item).is_some() {
            return Err(BackendError::Malformed(format!("request_id '{id}' answered twice")));
        }
    }
    let results = chunk
        .iter()
        .map(|request| {
            let item = by_id.remove(&request.request_id).ok_or_else(|| {
                BackendError::Malformed(format!("no response for request_id '{}'", request.request_id))
            })?;
            if let Some(error) = item.error {
                return Err(BackendError::Service { status: 500, message: error });
            }
            let (Some(greedy_token), Some([pos, neg])) = (item.greedy_token, item.logits) else {
                return Err(BackendError::Malformed(format!(
                    "response for '{}' lacks greedy_token or logits",
                    request.request_id
                )));
            };
            let prediction = Prediction::new(greedy_token, pos, neg)
                .map_err(|e| BackendError::Malformed(e.to_string()))?;
            if !prediction.is_consistent(&request.candidate_tokens) {
                return Err(BackendError::Malformed(format!(
                    "response for '{}' decodes '{}' but its logit is the smaller one",
                    request.request_id, prediction.greedy_token
                )));
            }
            Ok(prediction)
        })
        .collect();
    if let Some(extra) = by_id.keys().next() {
        return Err(BackendError::Malformed(format!("unexpected request_id '{extra}' in response")));
    }
    Ok(results)
}

impl Backend for RemoteBackend {
    fn predict(&self, request: &ScoreRequest) -> Result<Prediction, BackendError> {
        self.predict_batch(std::slice::from_ref(request))?
            .pop()
            .expect("one response per request")
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn predict_batch(&self, requests: &[ScoreRequest]) -> Result<BatchResult, BackendError> {
        check_batch(requests)?;
        let mut results: Vec<Option<Result<Prediction, BackendError>>> = requests
            .iter()
            .map(|r| check_request(r).err().map(Err))
            .collect();
        let pending: Vec<ScoreRequest> = requests
            .iter()
            .zip(&results)
            .filter(|(_, slot)| slot.is_none())
            .map(|(r, _)| r.clone())
            .collect();
        let chunks: Vec<&[ScoreRequest]> = pending.chunks(self.config.batch_size).collect();
        let answered = run_bounded(&chunks, self.config.max_in_flight, |chunk| {
            self.send_chunk(chunk)
                .unwrap_or_else(|e| chunk.iter().map(|_| Err(e.clone())).collect())
        });
        let mut answered = answered.into_iter().flatten();
        for slot in results.iter_mut().filter(|s| s.is_none()) {
            *slot = answered.next();
        }
        Ok(results
            .into_iter()
            .map(|slot| slot.expect("every pending request answered"))
            .collect())
    }
}
