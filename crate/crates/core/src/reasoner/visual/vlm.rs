use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::Prompt;
use crate::error::{Error, Result};

static HTTP_ATTEMPTS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of HTTP attempts made by [`query_vlm`].
pub fn http_attempts() -> usize {
    HTTP_ATTEMPTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmConfig {
    /// Explicit endpoint; falls back to `$TSAGENT_VLM_ENDPOINT`.
    pub endpoint: Option<String>,
    pub model_id: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_concurrent_requests: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            endpoint: None,
            model_id: "Qwen3-VL-235B-Instruct".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            max_concurrent_requests: 4,
        }
    }
}

pub const ENDPOINT_ENV: &str = "TSAGENT_VLM_ENDPOINT";
pub const API_KEY_ENV: &str = "TSAGENT_VLM_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub system_text: String,
    pub user_text: String,
    /// Base64 PNG.
    pub image: String,
    pub endpoint: String,
    pub model_id: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl VlmRequest {
    pub fn new(prompt: Prompt, image_base64: String, cfg: &VlmConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .filter(|e| !e.is_empty())
            .ok_or_else(|| Error::Config(format!("no VLM endpoint configured (set {ENDPOINT_ENV} or use offline mode)")))?;
        Ok(VlmRequest {
            system_text: prompt.system,
            user_text: prompt.user,
            image: image_base64,
            endpoint,
            model_id: cfg.model_id.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs_f64(cfg.timeout_secs.max(0.001)),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
        })
    }

    /// Chat-completion payload with the plot attached as a data URL.
    pub fn payload(&self) -> Value {
        json!({
            "model": self.model_id,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": self.system_text}]},
                {"role": "user", "content": [
                    {"type": "text", "text": self.user_text},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", self.image)}}
                ]}
            ]
        })
    }
}

/// Assistant text from a chat-completion response (string or content-part list).
fn assistant_text(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::ResponseParse(format!("endpoint body: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| Error::Schema("choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("")),
        _ => Err(Error::Schema("choices[0].message.content".into())),
    }
}

enum Attempt {
    Done(String),
    Retry(String),
}

fn attempt(agent: &ureq::Agent, req: &VlmRequest, body: &str) -> Result<Attempt> {
    HTTP_ATTEMPTS.fetch_add(1, Ordering::SeqCst);
    let mut call = agent.post(&req.endpoint).header("Content-Type", "application/json");
    if let Some(key) = &req.api_key {
        call = call.header("Authorization", format!("Bearer {key}"));
    }
    match call.send(body) {
        Ok(mut resp) => {
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            match status {
                200..=299 => Ok(Attempt::Done(assistant_text(&text)?)),
                400..=499 => Err(Error::Endpoint { status, body: text }),
                _ => Ok(Attempt::Retry(format!("status {status}"))),
            }
        }
        Err(e) => Ok(Attempt::Retry(e.to_string())),
    }
}

/// POST the request, retrying transient failures with exponential backoff.
pub fn query_vlm(req: &VlmRequest) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(req.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let body = req.payload().to_string();
    let mut last = String::new();
    for i in 0..=req.max_retries {
        if i > 0 {
            std::thread::sleep(req.backoff * 2u32.saturating_pow(i - 1));
        }
        match attempt(&agent, req, &body)? {
            Attempt::Done(text) => return Ok(text),
            Attempt::Retry(why) => {
                log::warn!("VLM attempt {} failed: {why}", i + 1);
                last = why;
            }
        }
    }
    Err(Error::Transport(format!("{} attempts failed; last: {last}", req.max_retries + 1)))
}

/// Query several requests with at most `limit` in flight.
pub fn query_many(reqs: &[VlmRequest], limit: usize) -> Vec<Result<String>> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(limit.max(1)).build() {
        Ok(pool) => pool.install(|| reqs.par_iter().map(query_vlm).collect()),
        Err(e) => reqs.iter().map(|_| Err(Error::Transport(format!("worker pool: {e}")))).collect(),
    }
}
