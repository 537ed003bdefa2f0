//! Model-inference interface.
//!
//! A [`Backend`] turns a [`ScoreRequest`] (one rendered source plus the two
//! candidate tokens) into a [`Prediction`]: the greedy first token and the
//! first-step logits of both candidates. Two implementations ship here:
//! [`ScriptedBackend`] for deterministic tests and [`RemoteBackend`] for the
//! HTTP inference service.

mod remote;
mod scripted;
pub mod wire;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::RemoteBackend;
pub use scripted::{Script, ScriptFile, ScriptedBackend};

use crate::scoring::Prediction;
use crate::templating::TargetTokenPair;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub source: String,
    pub candidate_tokens: TargetTokenPair,
}

impl ScoreRequest {
    pub fn new(request_id: impl Into<String>, source: impl Into<String>, candidate_tokens: TargetTokenPair) -> Self {
        ScoreRequest {
            request_id: request_id.into(),
            source: source.into(),
            candidate_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("service returned HTTP {status}: {message}")]
    Service { status: u16, message: String },
    #[error("no scripted prediction for source {0:?}")]
    Unscripted(String),
    #[error("scripted failure for request '{0}'")]
    Injected(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("duplicate request_id '{0}' in batch")]
    DuplicateRequestId(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Retrying the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { .. } | BackendError::Timeout { .. } => true,
            BackendError::Service { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

/// Connection and batching parameters for the remote backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendConfig {
    pub endpoint: String,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub retries: u32,
    pub batch_size: usize,
    /// First retry delay; doubles per attempt up to `backoff_max`, with jitter.
    pub backoff_base: Duration,
    pub backoff_max: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "http://127.0.0.1:8000".into(),
            max_in_flight: 4,
            timeout: Duration::from_secs(30),
            retries: 3,
            batch_size: 16,
            backoff_base: Duration::from_millis(100),
            backoff_max: Duration::from_secs(5),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(BackendError::Config("batch_size must be at least 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        Ok(())
    }
}

pub type BatchResult = Vec<Result<Prediction, BackendError>>;

pub trait Backend: Send + Sync {
    fn predict(&self, request: &ScoreRequest) -> Result<Prediction, BackendError>;

    /// Upper bound on concurrent transport operations in `predict_batch`.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Predictions in request order. A failing request yields an error at its
    /// own position; the outer error is reserved for an invalid batch.
    fn predict_batch(&self, requests: &[ScoreRequest]) -> Result<BatchResult, BackendError> {
        check_batch(requests)?;
        Ok(run_bounded(requests, self.max_in_flight(), |r| self.predict(r)))
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn predict(&self, request: &ScoreRequest) -> Result<Prediction, BackendError> {
        (**self).predict(request)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    fn predict_batch(&self, requests: &[ScoreRequest]) -> Result<BatchResult, BackendError> {
        (**self).predict_batch(requests)
    }
}

pub(crate) fn check_request(request: &ScoreRequest) -> Result<(), BackendError> {
    if request.source.is_empty() {
        return Err(BackendError::InvalidRequest(format!(
            "request '{}' has an empty source",
            request.request_id
        )));
    }
    Ok(())
}

pub(crate) fn check_batch(requests: &[ScoreRequest]) -> Result<(), BackendError> {
    let mut seen = HashSet::with_capacity(requests.len());
    for r in requests {
        if !seen.insert(r.request_id.as_str()) {
            return Err(BackendError::DuplicateRequestId(r.request_id.clone()));
        }
    }
    Ok(())
}

/// Maps `f` over `items` on at most `limit` worker threads, returning results
/// in input order.
pub fn run_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every index is visited once")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn run_bounded_keeps_order_and_limit() {
        let items: Vec<usize> = (0..64).collect();
        let current = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let out = run_bounded(&items, 5, |&i| {
            let now = current.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_micros(((i * 37) % 11) as u64 * 100));
            current.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 5);
    }

    #[test]
    fn run_bounded_empty() {
        let out: Vec<u8> = run_bounded(&[] as &[u8], 4, |&x| x);
        assert!(out.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let bad = BackendConfig { max_in_flight: 0, ..BackendConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BackendConfig { batch_size: 0, ..BackendConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn retryable_classification() {
        assert!(BackendError::Timeout { attempts: 1 }.is_retryable());
        assert!(BackendError::Service { status: 503, message: String::new() }.is_retryable());
        assert!(!BackendError::Service { status: 413, message: String::new() }.is_retryable());
        assert!(!BackendError::Malformed(String::new()).is_retryable());
    }
}
