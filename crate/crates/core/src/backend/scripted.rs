use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_request, Backend, BackendError, ScoreRequest};
use crate::dataset::Problem;
use crate::scoring::Prediction;
use crate::templating::{render_pair, TargetTokenPair, TemplateError};

/// How a scripted backend chooses its prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Script {
    /// Exact match on the source text.
    BySource(HashMap<String, Prediction>),
    /// Exact match on the request id.
    ByRequestId(HashMap<String, Prediction>),
    /// The same prediction for every request.
    Constant(Prediction),
    /// Uniform logits in [-4, 4) drawn from a generator seeded by
    /// `(seed, source)`; the greedy token is the larger candidate.
    Random { seed: u64 },
}

fn stable_seed(seed: u64, text: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn random_prediction(seed: u64, request: &ScoreRequest) -> Prediction {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, &request.source));
    let pos: f64 = rng.random_range(-4.0..4.0);
    let neg: f64 = rng.random_range(-4.0..4.0);
    let tokens = &request.candidate_tokens;
    let greedy = if pos >= neg { tokens.positive() } else { tokens.negative() };
    Prediction {
        greedy_token: greedy.to_string(),
        candidate_logits: (pos, neg),
    }
}

/// Deterministic in-process backend. Identical requests always produce
/// identical predictions.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    default: Option<Prediction>,
    failures: HashSet<String>,
    jitter: Option<(u64, Duration)>,
    max_in_flight: usize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend {
            script,
            default: None,
            failures: HashSet::new(),
            jitter: None,
            max_in_flight: 1,
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn constant(prediction: Prediction) -> Self {
        ScriptedBackend::new(Script::Constant(prediction))
    }

    pub fn random(seed: u64) -> Self {
        ScriptedBackend::new(Script::Random { seed })
    }

    /// Decodes the positive token with logits (2, -2) for the instance
    /// embedding the gold option and the negative token with (-2, 2) for
    /// the other. Problems without a gold answer are skipped.
    pub fn oracle(problems: &[Problem], tokens: &TargetTokenPair) -> Result<Self, TemplateError> {
        Self::from_gold(problems, tokens, false)
    }

    /// The oracle with every prediction flipped.
    pub fn inverted_oracle(problems: &[Problem], tokens: &TargetTokenPair) -> Result<Self, TemplateError> {
        Self::from_gold(problems, tokens, true)
    }

    fn from_gold(problems: &[Problem], tokens: &TargetTokenPair, invert: bool) -> Result<Self, TemplateError> {
        let positive = Prediction {
            greedy_token: tokens.positive().to_string(),
            candidate_logits: (2.0, -2.0),
        };
        let negative = Prediction {
            greedy_token: tokens.negative().to_string(),
            candidate_logits: (-2.0, 2.0),
        };
        let mut map = HashMap::with_capacity(problems.len() * 2);
        for problem in problems {
            let Some(gold) = problem.answer() else { continue };
            for instance in render_pair(problem)? {
                let correct = (instance.option_slot == gold) != invert;
                let prediction = if correct { positive.clone() } else { negative.clone() };
                map.insert(instance.source, prediction);
            }
        }
        Ok(ScriptedBackend::new(Script::BySource(map)))
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let file: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(file.into_backend())
    }

    /// Used for any request the script does not cover.
    pub fn with_default(mut self, prediction: Prediction) -> Self {
        self.default = Some(prediction);
        self
    }

    /// Requests with this id fail with [`BackendError::Injected`].
    pub fn with_failure(mut self, request_id: impl Into<String>) -> Self {
        self.failures.insert(request_id.into());
        self
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.max_in_flight = max_in_flight.max(1);
        self
    }

    /// Sleeps up to `max_delay` per request, by a pseudo-random amount fixed
    /// by `(seed, request_id)`. Completion order shuffles; results do not.
    pub fn with_jitter(mut self, seed: u64, max_delay: Duration) -> Self {
        self.jitter = Some((seed, max_delay));
        self
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    /// Highest number of concurrent `predict` calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, request: &ScoreRequest) -> Result<Prediction, BackendError> {
        let found = match &self.script {
            Script::BySource(map) => map.get(&request.source).cloned(),
            Script::ByRequestId(map) => map.get(&request.request_id).cloned(),
            Script::Constant(p) => Some(p.clone()),
            Script::Random { seed } => Some(random_prediction(*seed, request)),
        };
        found
            .or_else(|| self.default.clone())
            .ok_or_else(|| BackendError::Unscripted(request.source.clone()))
    }
}

impl Backend for ScriptedBackend {
    fn predict(&self, request: &ScoreRequest) -> Result<Prediction, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some((seed, max_delay)) = self.jitter {
            let nanos = max_delay.as_nanos().max(1) as u64;
            thread::sleep(Duration::from_nanos(stable_seed(seed, &request.request_id) % nanos));
        }
        let result = check_request(request).and_then(|()| {
            if self.failures.contains(&request.request_id) {
                Err(BackendError::Injected(request.request_id.clone()))
            } else {
                self.lookup(request)
            }
        });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// On-disk script for the CLI's `script` backend.
///
/// ```json
/// {"key": "source",
///  "default": {"greedy_token": "entailment", "candidate_logits": [0.0, 0.0]},
///  "entries": {"hypothesis: ... premise: ...": {"greedy_token": "contradiction", "candidate_logits": [-1.0, 1.0]}}}
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub key: ScriptKey,
    #[serde(default)]
    pub default: Option<Prediction>,
    #[serde(default)]
    pub entries: HashMap<String, Prediction>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKey {
    #[default]
    Source,
    RequestId,
}

impl ScriptFile {
    pub fn into_backend(self) -> ScriptedBackend {
        let script = match self.key {
            ScriptKey::Source => Script::BySource(self.entries),
            ScriptKey::RequestId => Script::ByRequestId(self.entries),
        };
        let backend = ScriptedBackend::new(script);
        match self.default {
            Some(p) => backend.with_default(p),
            None => backend,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::OptionSlot;
    use crate::scoring::{classify_case, Case};

    fn tokens() -> TargetTokenPair {
        TargetTokenPair::entailment()
    }

    fn requests(n: usize) -> Vec<ScoreRequest> {
        (0..n)
            .map(|i| ScoreRequest::new(format!("r{i}"), format!("hypothesis: s{i} premise: "), tokens()))
            .collect()
    }

    fn worked() -> Problem {
        Problem::new(
            "x1",
            "He never comes to my home, but I always go to his house because the _ is smaller.",
            "home",
            "house",
            Some(OptionSlot::Option1),
        )
        .unwrap()
    }

    #[test]
    fn oracle_emits_positive_for_gold() {
        let p = worked();
        let backend = ScriptedBackend::oracle(std::slice::from_ref(&p), &tokens()).unwrap();
        let [a, b] = render_pair(&p).unwrap();
        let pa = backend.predict(&ScoreRequest::new("a", a.source, tokens())).unwrap();
        let pb = backend.predict(&ScoreRequest::new("b", b.source, tokens())).unwrap();
        assert_eq!(pa, Prediction::new("entailment", 2.0, -2.0).unwrap());
        assert_eq!(pb, Prediction::new("contradiction", -2.0, 2.0).unwrap());
        assert_eq!(classify_case(&pa, &pb, &tokens()), Case::Contrastive);

        let inverted = ScriptedBackend::inverted_oracle(&[p], &tokens()).unwrap();
        let [a, _] = render_pair(&worked()).unwrap();
        let flipped = inverted.predict(&ScoreRequest::new("a", a.source, tokens())).unwrap();
        assert_eq!(flipped.greedy_token, "contradiction");
    }

    #[test]
    fn unmatched_source_without_default_errors() {
        let backend = ScriptedBackend::new(Script::BySource(HashMap::new()));
        let err = backend.predict(&requests(1)[0]).unwrap_err();
        assert!(matches!(err, BackendError::Unscripted(_)));
        let fallback = Prediction::new("entailment", 0.0, 0.0).unwrap();
        let backend = ScriptedBackend::new(Script::BySource(HashMap::new())).with_default(fallback.clone());
        assert_eq!(backend.predict(&requests(1)[0]).unwrap(), fallback);
    }

    #[test]
    fn request_id_mode() {
        let p = Prediction::new("contradiction", -1.0, 1.0).unwrap();
        let backend = ScriptedBackend::new(Script::ByRequestId(HashMap::from([("r3".to_string(), p.clone())])));
        assert_eq!(backend.predict(&requests(4)[3]).unwrap(), p);
        assert!(backend.predict(&requests(4)[2]).is_err());
    }

    #[test]
    fn random_is_reproducible_and_consistent() {
        let reqs = requests(200);
        let first: Vec<_> = reqs.iter().map(|r| ScriptedBackend::random(42).predict(r).unwrap()).collect();
        let second: Vec<_> = reqs.iter().map(|r| ScriptedBackend::random(42).predict(r).unwrap()).collect();
        assert_eq!(first, second);
        let other: Vec<_> = reqs.iter().map(|r| ScriptedBackend::random(7).predict(r).unwrap()).collect();
        assert_ne!(first, other);
        assert!(first.iter().all(|p| p.is_consistent(&tokens())));
        let positives = first.iter().filter(|p| p.greedy_token == "entailment").count();
        assert!((60..140).contains(&positives), "{positives}");
    }

    #[test]
    fn constant_backend_gives_same_in_set_ties() {
        let backend = ScriptedBackend::constant(Prediction::new("entailment", 0.5, 0.5).unwrap());
        let reqs = requests(2);
        let a = backend.predict(&reqs[0]).unwrap();
        let b = backend.predict(&reqs[1]).unwrap();
        assert_eq!(classify_case(&a, &b, &tokens()), Case::SameInSet);
    }

    #[test]
    fn batch_in_order_with_one_failure() {
        let backend = ScriptedBackend::random(1).with_failure("r4").with_max_in_flight(3);
        let reqs = requests(10);
        let out = backend.predict_batch(&reqs).unwrap();
        assert_eq!(out.len(), 10);
        assert!(matches!(&out[4], Err(BackendError::Injected(id)) if id == "r4"));
        for (i, r) in out.iter().enumerate().filter(|(i, _)| *i != 4) {
            assert_eq!(r.as_ref().unwrap(), &backend.predict(&reqs[i]).unwrap());
        }
        assert!(backend.predict_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn batch_rejects_duplicate_ids() {
        let mut reqs = requests(3);
        reqs[2].request_id = "r0".into();
        assert_eq!(
            ScriptedBackend::random(1).predict_batch(&reqs),
            Err(BackendError::DuplicateRequestId("r0".into()))
        );
    }

    #[test]
    fn empty_source_is_invalid() {
        let r = ScoreRequest::new("e", "", tokens());
        assert!(matches!(ScriptedBackend::random(1).predict(&r), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn script_file_round_trip() {
        let json = r#"{"key":"request_id","default":{"greedy_token":"x","candidate_logits":[0.0,0.0]},
            "entries":{"r1":{"greedy_token":"entailment","candidate_logits":[1.5,-0.5]}}}"#;
        let backend = serde_json::from_str::<ScriptFile>(json).unwrap().into_backend();
        let reqs = requests(2);
        assert_eq!(backend.predict(&reqs[1]).unwrap().candidate_logits, (1.5, -0.5));
        assert_eq!(backend.predict(&reqs[0]).unwrap().greedy_token, "x");
    }
}
