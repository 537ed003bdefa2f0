//! In-process stand-in for the inference service, speaking the same wire
//! protocol. Predictions come from a seeded scripted backend so that every
//! response is a pure function of the request.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use winoscore::backend::wire::{ScoreBatchRequest, ScoreBatchResponse, ScoreResponseWire};
use winoscore::{Backend, ScoreRequest, ScriptedBackend, TargetTokenPair};

#[derive(Default)]
pub struct Faults {
    /// The first N score calls answer 503.
    pub fail_first: usize,
    /// Every score call sleeps this long before answering.
    pub delay: Duration,
    /// Maximum requests accepted per call; larger batches get 413.
    pub max_batch: Option<usize>,
    /// Answer with a body that is not valid JSON.
    pub garbage: bool,
}

pub struct MockState {
    pub seed: u64,
    pub faults: Faults,
    pub calls: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub peak_in_flight: AtomicUsize,
    pub batch_sizes: std::sync::Mutex<Vec<usize>>,
}

pub struct MockService {
    pub addr: SocketAddr,
    pub state: Arc<MockState>,
    _shutdown: tokio::sync::oneshot::Sender<()>,
}

impl MockService {
    pub fn start(seed: u64, faults: Faults) -> Self {
        let state = Arc::new(MockState {
            seed,
            faults,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            batch_sizes: Default::default(),
        });
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
        let app_state = state.clone();
        std::thread::spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .unwrap();
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                let app = Router::new()
                    .route("/v1/score", post(score))
                    .route("/v1/health", get(health))
                    .with_state(app_state);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        MockService {
            addr,
            state,
            _shutdown: shutdown_tx,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn calls(&self) -> usize {
        self.state.calls.load(Ordering::SeqCst)
    }
}

/// What the service answers for one request, computed directly.
pub fn expected(seed: u64, request: &ScoreRequest) -> winoscore::Prediction {
    ScriptedBackend::random(seed).predict(request).unwrap()
}

async fn score(State(state): State<Arc<MockState>>, Json(body): Json<ScoreBatchRequest>) -> Response {
    let call = state.calls.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    state.batch_sizes.lock().unwrap().push(body.requests.len());
    if !state.faults.delay.is_zero() {
        tokio::time::sleep(state.faults.delay).await;
    }
    let response = answer(&state, call, body);
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    response
}

fn answer(state: &MockState, call: usize, body: ScoreBatchRequest) -> Response {
    if call < state.faults.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, "warming up").into_response();
    }
    if state.faults.garbage {
        return (StatusCode::OK, "{not json").into_response();
    }
    if let Some(max) = state.faults.max_batch {
        if body.requests.len() > max {
            return (StatusCode::PAYLOAD_TOO_LARGE, "batch too large").into_response();
        }
    }
    let backend = ScriptedBackend::random(state.seed);
    let mut responses = Vec::with_capacity(body.requests.len());
    // Answer in reverse to exercise id-based matching.
    for wire in body.requests.into_iter().rev() {
        let [a, b] = wire.candidates;
        let Ok(tokens) = TargetTokenPair::new(a, b) else {
            return (StatusCode::BAD_REQUEST, "candidates must be distinct").into_response();
        };
        let request = ScoreRequest::new(wire.request_id.clone(), wire.source, tokens);
        let p = backend.predict(&request).unwrap();
        responses.push(ScoreResponseWire {
            request_id: wire.request_id,
            greedy_token: Some(p.greedy_token),
            logits: Some([p.candidate_logits.0, p.candidate_logits.1]),
            model_info: Some(json!({"model": "mock-random", "decode": "greedy", "max_new_tokens": 1})),
            error: None,
        });
    }
    Json(ScoreBatchResponse { responses }).into_response()
}

async fn health() -> Response {
    Json(json!({
        "status": "ok",
        "model": "mock-random",
        "candidates": [
            {"token": "entailment", "pieces": 1, "multi_piece": false},
            {"token": "contradiction", "pieces": 2, "multi_piece": true}
        ]
    }))
    .into_response()
}

/// An address with nothing listening on it.
pub fn refusing_endpoint() -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}
