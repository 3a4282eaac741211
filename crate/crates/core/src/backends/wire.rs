//! HTTP clients for OpenAI-style `/chat/completions` and `/embeddings`.
//!
//! Images are sent as `image_url` content parts. `http(s)://` and `data:`
//! references pass through; anything else is read as a local file and inlined
//! as a base64 data URL.

use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::domain::{ImageRef, TokenCounts, TokenDistribution};

use super::prompt::{build_prompt, PromptPart};
use super::{BackendError, EmbedContent, Encoder, GenerationRequest, Generator, RawGeneration};

fn map_err(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::StatusCode(c) if c == 429 || c >= 500 => BackendError::Transport(format!("HTTP {c}")),
        ureq::Error::StatusCode(c) => BackendError::Protocol(format!("HTTP {c}")),
        ureq::Error::Json(e) => BackendError::Protocol(format!("malformed JSON: {e}")),
        e @ (ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed
        | ureq::Error::BodyStalled) => BackendError::Transport(e.to_string()),
        e => BackendError::Protocol(e.to_string()),
    }
}

fn mime_for(path: &str) -> &'static str {
    match path.rsplit('.').next().map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

fn image_url(image: &ImageRef) -> Result<String, BackendError> {
    let r = image.as_str();
    if r.starts_with("http://") || r.starts_with("https://") || r.starts_with("data:") {
        return Ok(r.to_owned());
    }
    let bytes = std::fs::read(r).map_err(|e| BackendError::InvalidRequest(format!("cannot read image {r}: {e}")))?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(r),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn post(agent: &ureq::Agent, url: &str, key: Option<&str>, body: &Value) -> Result<Value, BackendError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(k) = key {
        req = req.header("Authorization", &format!("Bearer {k}"));
    }
    req.send_json(body)
        .map_err(map_err)?
        .body_mut()
        .read_json::<Value>()
        .map_err(map_err)
}

pub struct WireGenerator {
    agent: ureq::Agent,
    url: String,
    model_id: String,
    api_key: Option<String>,
}

impl WireGenerator {
    pub fn new(base_url: &str, model_id: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            agent: agent(timeout),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model_id: model_id.into(),
            api_key,
        }
    }

    pub fn request_body(&self, req: &GenerationRequest) -> Result<Value, BackendError> {
        let prompt = build_prompt(req);
        let mut content = Vec::with_capacity(prompt.parts.len());
        for p in &prompt.parts {
            content.push(match p {
                PromptPart::Text(t) => json!({"type": "text", "text": t}),
                PromptPart::Image(i) => json!({"type": "image_url", "image_url": {"url": image_url(i)?}}),
            });
        }
        let mut body = json!({
            "model": self.model_id,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": content},
            ],
            "temperature": req.sampling.temperature,
            "max_tokens": req.sampling.max_tokens,
        });
        if req.sampling.want_token_probs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(req.sampling.top_logprobs);
        }
        Ok(body)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn parse_chat_response(v: Value) -> Result<(String, Vec<TokenDistribution>, TokenCounts), BackendError> {
    let resp: ChatResponse =
        serde_json::from_value(v).map_err(|e| BackendError::Protocol(format!("unexpected response shape: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice.message.content.unwrap_or_default();
    let mut dists = Vec::new();
    for step in choice.logprobs.map(|l| l.content).unwrap_or_default() {
        let d = if step.top_logprobs.is_empty() {
            TokenDistribution::from_logprobs([(step.token, step.logprob)], true)
        } else {
            TokenDistribution::from_logprobs(step.top_logprobs.into_iter().map(|t| (t.token, t.logprob)), true)
        };
        dists.push(d.map_err(|e| BackendError::Protocol(e.to_string()))?);
    }
    let counts = resp
        .usage
        .map(|u| TokenCounts {
            prompt_tokens: u.prompt_tokens,
            output_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok((text, dists, counts))
}

impl Generator for WireGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<RawGeneration, BackendError> {
        let body = self.request_body(req)?;
        let start = Instant::now();
        let v = post(&self.agent, &self.url, self.api_key.as_deref(), &body)?;
        let latency = start.elapsed();
        let (text, token_dists, token_counts) = parse_chat_response(v)?;
        Ok(RawGeneration {
            text,
            token_dists,
            latency,
            token_counts,
        })
    }
}

/// Embedding client. Text is sent as `input: "<text>"`, images as
/// `input: {"image": "<url>"}`; the vector is read from `data[0].embedding`.
pub struct WireEncoder {
    agent: ureq::Agent,
    url: String,
    model_id: String,
    api_key: Option<String>,
    dimension: usize,
}

impl WireEncoder {
    pub fn new(
        base_url: &str,
        model_id: impl Into<String>,
        api_key: Option<String>,
        dimension: usize,
        timeout: Duration,
    ) -> Self {
        Self {
            agent: agent(timeout),
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model_id: model_id.into(),
            api_key,
            dimension,
        }
    }
}

impl Encoder for WireEncoder {
    fn encoder_id(&self) -> &str {
        &self.model_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, content: &EmbedContent) -> Result<(Vec<f32>, Duration), BackendError> {
        let input = match content {
            EmbedContent::Text(t) => json!(t),
            EmbedContent::Image(i) => json!({"image": image_url(i)?}),
        };
        let start = Instant::now();
        let v = post(
            &self.agent,
            &self.url,
            self.api_key.as_deref(),
            &json!({"model": self.model_id, "input": input}),
        )?;
        let emb = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("response has no data[0].embedding".into()))?;
        let vec = emb
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| BackendError::Protocol("embedding has non-numeric entries".into()))?;
        Ok((vec, start.elapsed()))
    }
}
