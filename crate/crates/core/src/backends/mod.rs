//! Generation and embedding endpoints.
//!
//! A [`Generator`] or [`Encoder`] is the provider-specific part: a seeded
//! simulator or an HTTP client. [`GenerationEndpoint`] and [`EncoderEndpoint`]
//! wrap one with retries, a concurrency limit, call caps and cost accounting.

mod config;
mod ledger;
mod prompt;
mod sim;
mod wire;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnnotationKind, ImageRef, Prediction, TokenCounts, TokenDistribution};
use crate::uncertainty::{sequence_entropy, EntropyVariant};

pub use config::{EncoderConfig, EndpointConfig, EndpointKind, SimEncoderParams};
pub use ledger::{CostLedger, LedgerSnapshot, Role, RoleCounters};
pub use prompt::{build_prompt, extract_final_answer, parse_annotation_text, Prompt, PromptPart};
pub use sim::mix as mix_seed;
pub use sim::{
    ConfidenceModel, EntropyModel, IclGain, LatencyModel, SimWorld, SimulatedAgentProfile, SimulatedEncoder,
    SimulatedGenerator,
};
pub use wire::{WireEncoder, WireGenerator};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Network failure, timeout, 429 or 5xx. Retried.
    #[error("transport error: {0}")]
    Transport(String),
    /// Malformed or unexpected response. Not retried.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("call budget of {0} exhausted")]
    BudgetExceeded(u64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_token_probs: bool,
    pub top_logprobs: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 64,
            want_token_probs: true,
            top_logprobs: 5,
        }
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {}",
                self.temperature
            )));
        }
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.want_token_probs && self.top_logprobs < 1 {
            return Err(BackendError::InvalidRequest(
                "top_logprobs must be >= 1 when token probabilities are requested".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoBlock {
    pub image: ImageRef,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Rendered annotation text.
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBlock {
    pub image: ImageRef,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_message: String,
    pub demonstrations: Vec<DemoBlock>,
    pub query: QueryBlock,
    pub sampling: Sampling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_instruction: Option<String>,
    #[serde(default)]
    pub annotation_kind: AnnotationKind,
    /// Index of this request within a best-of-n batch.
    #[serde(default)]
    pub draw: u32,
}

impl GenerationRequest {
    pub fn new(system_message: impl Into<String>, query: QueryBlock, sampling: Sampling) -> Self {
        Self {
            system_message: system_message.into(),
            demonstrations: Vec::new(),
            query,
            sampling,
            reasoning_instruction: None,
            annotation_kind: AnnotationKind::Label,
            draw: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawGeneration {
    pub text: String,
    pub token_dists: Vec<TokenDistribution>,
    pub latency: Duration,
    pub token_counts: TokenCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EmbedContent {
    Image(ImageRef),
    Text(String),
}

pub trait Generator: Send + Sync {
    fn model_id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest) -> Result<RawGeneration, BackendError>;
}

pub trait Encoder: Send + Sync {
    fn encoder_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Returns the vector and the time the call took.
    fn embed(&self, content: &EmbedContent) -> Result<(Vec<f32>, Duration), BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Attempts `call` under `policy`, recording every attempt in the ledger.
fn with_retries<T>(
    policy: &RetryPolicy,
    ledger: &CostLedger,
    role: Role,
    max_calls: Option<u64>,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        if let Some(cap) = max_calls {
            if ledger.calls(role) >= cap {
                return Err(BackendError::BudgetExceeded(cap));
            }
        }
        if attempt > 0 {
            ledger.record_retry(role);
            std::thread::sleep(policy.delay(attempt - 1));
        }
        ledger.record_call(role);
        match call() {
            Ok(v) => return Ok(v),
            Err(e) => {
                ledger.record_failure(role);
                if !e.is_retryable() {
                    return Err(e);
                }
                last = Some(e);
            }
        }
    }
    Err(BackendError::RetriesExhausted {
        attempts,
        last: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

/// Shareable generation handle.
pub struct GenerationEndpoint {
    inner: Arc<dyn Generator>,
    role: Role,
    ledger: Arc<CostLedger>,
    retry: RetryPolicy,
    max_calls: Option<u64>,
    entropy_variant: EntropyVariant,
    gate: Gate,
    sampling: Sampling,
}

impl GenerationEndpoint {
    pub fn new(inner: Arc<dyn Generator>, role: Role, ledger: Arc<CostLedger>) -> Self {
        Self {
            inner,
            role,
            ledger,
            retry: RetryPolicy::default(),
            max_calls: None,
            entropy_variant: EntropyVariant::default(),
            gate: Gate::new(4),
            sampling: Sampling::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_calls(mut self, cap: Option<u64>) -> Self {
        self.max_calls = cap;
        self
    }

    pub fn with_entropy_variant(mut self, v: EntropyVariant) -> Self {
        self.entropy_variant = v;
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.gate = Gate::new(n);
        self
    }

    /// Default sampling for requests built by callers of this endpoint.
    pub fn with_sampling(mut self, s: Sampling) -> Self {
        self.sampling = s;
        self
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<Prediction, BackendError> {
        request.sampling.validate()?;
        let _permit = self.gate.acquire();
        let raw = with_retries(&self.retry, &self.ledger, self.role, self.max_calls, || {
            self.inner.generate(request)
        })?;
        self.ledger.record_usage(self.role, raw.token_counts, raw.latency);
        let uncertainty = if request.sampling.want_token_probs {
            let u = sequence_entropy(&raw.token_dists, self.entropy_variant)
                .map_err(|_| BackendError::Protocol("response carries no token probabilities".into()))?;
            Some(u)
        } else {
            None
        };
        Ok(Prediction {
            text: raw.text,
            token_dists: raw.token_dists,
            uncertainty,
            latency: raw.latency,
            token_counts: raw.token_counts,
        })
    }
}

/// Shareable embedding handle.
pub struct EncoderEndpoint {
    inner: Arc<dyn Encoder>,
    ledger: Arc<CostLedger>,
    retry: RetryPolicy,
    gate: Gate,
}

impl EncoderEndpoint {
    pub fn new(inner: Arc<dyn Encoder>, ledger: Arc<CostLedger>) -> Self {
        Self {
            inner,
            ledger,
            retry: RetryPolicy::default(),
            gate: Gate::new(4),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.gate = Gate::new(n);
        self
    }

    pub fn encoder_id(&self) -> &str {
        self.inner.encoder_id()
    }

    pub fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    pub fn embed(&self, content: &EmbedContent) -> Result<Vec<f32>, BackendError> {
        let _permit = self.gate.acquire();
        let (v, latency) = with_retries(&self.retry, &self.ledger, Role::Encoder, None, || {
            self.inner.embed(content)
        })?;
        self.ledger.record_usage(Role::Encoder, TokenCounts::default(), latency);
        if v.len() != self.dimension() {
            return Err(BackendError::Protocol(format!(
                "embedding has dimension {}, endpoint declares {}",
                v.len(),
                self.dimension()
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(BackendError::Protocol("embedding contains non-finite values".into()));
        }
        Ok(v)
    }
}
