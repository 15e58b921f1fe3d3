use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde_json::{json, Value};

use super::{
    BackendError, ContentPart, MediaPayload, ModelBackend, ModelRequest, ModelResponse, Role,
    ToolCall, Usage,
};
use crate::routing::Modality;

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(2),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client (OpenRouter and friends).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    request_timeout: Duration,
}

impl HttpBackend {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            retry: RetryPolicy::default(),
            request_timeout: Duration::from_secs(300),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_request_timeout(mut self, t: Duration) -> Self {
        self.request_timeout = t;
        self
    }

    fn post_once(&self, body: &Value, timeout: Duration) -> Result<Value, Attempt> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(format!("unparsable response: {e}"))),
            401 | 403 => Err(Attempt::Auth(format!("HTTP {status}: {text}"))),
            408 | 429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}: {text}"))),
            _ => Err(Attempt::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
    Auth(String),
}

impl ModelBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(
        &self,
        request: &ModelRequest,
        deadline: Option<Instant>,
    ) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let body = serialize_request(request, &self.model);
        let mut backoff = self.retry.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            let mut timeout = self.request_timeout;
            if let Some(d) = deadline {
                let left = d.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(BackendError::DeadlineExceeded);
                }
                timeout = timeout.min(left);
            }
            match self.post_once(&body, timeout) {
                Ok(v) => {
                    let mut resp =
                        parse_response(&v).map_err(|message| BackendError::ProviderError {
                            message,
                            attempts: attempt,
                        })?;
                    resp.retries = attempt - 1;
                    return Ok(resp);
                }
                Err(Attempt::Auth(m)) => return Err(BackendError::AuthFailure(m)),
                Err(Attempt::Fatal(message)) => {
                    return Err(BackendError::ProviderError {
                        message,
                        attempts: attempt,
                    })
                }
                Err(Attempt::Retry(m)) => {
                    warn!("model call attempt {attempt} failed: {m}");
                    last = m;
                }
            }
            if attempt < self.retry.max_attempts {
                if let Some(d) = deadline {
                    if Instant::now() + backoff >= d {
                        return Err(BackendError::DeadlineExceeded);
                    }
                }
                thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(BackendError::ProviderError {
            message: last,
            attempts: self.retry.max_attempts.max(1),
        })
    }
}

fn media_part(m: &MediaPayload) -> Value {
    let data_url = format!("data:{};base64,{}", m.mime_type, m.base64());
    match m.modality {
        Modality::Image => json!({ "type": "image_url", "image_url": { "url": data_url } }),
        Modality::Audio => {
            let format = m.mime_type.rsplit('/').next().unwrap_or("wav");
            let format = match format {
                "mpeg" => "mp3",
                "mp4" => "m4a",
                f => f,
            };
            json!({ "type": "input_audio", "input_audio": { "data": m.base64(), "format": format } })
        }
        Modality::Video => json!({ "type": "video_url", "video_url": { "url": data_url } }),
    }
}

/// Wire body for a request. Pure: same request and model give the same JSON.
pub fn serialize_request(request: &ModelRequest, model: &str) -> Value {
    let mut messages = vec![json!({ "role": "system", "content": request.system_prompt })];
    for msg in &request.messages {
        match msg.role {
            Role::Agent => {
                let text: Vec<&str> = msg
                    .content
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::Text { text } => Some(text.as_str()),
                        _ => None,
                    })
                    .collect();
                let calls: Vec<Value> = msg
                    .content
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::ToolCall(c) => Some(json!({
                            "id": c.id,
                            "type": "function",
                            "function": { "name": c.name, "arguments": c.arguments.to_string() },
                        })),
                        _ => None,
                    })
                    .collect();
                let mut m = json!({ "role": "assistant", "content": text.join("\n") });
                if !calls.is_empty() {
                    m["tool_calls"] = Value::Array(calls);
                }
                messages.push(m);
            }
            Role::Environment => {
                let mut parts = Vec::new();
                for p in &msg.content {
                    match p {
                        ContentPart::ToolResult { call_id, text, .. } => messages.push(json!({
                            "role": "tool",
                            "tool_call_id": call_id,
                            "content": text,
                        })),
                        ContentPart::Text { text } => {
                            parts.push(json!({ "type": "text", "text": text }))
                        }
                        ContentPart::Media(m) => {
                            parts.push(json!({ "type": "text", "text": format!("[{}: {}]", m.modality, m.source_path) }));
                            parts.push(media_part(m));
                        }
                        ContentPart::ToolCall(_) => {}
                    }
                }
                if !parts.is_empty() {
                    messages.push(json!({ "role": "user", "content": parts }));
                }
            }
        }
    }
    json!({
        "model": model,
        "messages": messages,
        "tools": request.tool_schema.tools.iter().map(|t| t.to_json_schema()).collect::<Vec<_>>(),
        "tool_choice": "auto",
    })
}

fn parse_response(v: &Value) -> Result<ModelResponse, String> {
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| format!("response has no choices: {v}"))?;
    let assistant_text = message
        .get("content")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        for (i, c) in calls.iter().enumerate() {
            let name = c
                .pointer("/function/name")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            let raw = c.pointer("/function/arguments");
            // Arguments arrive as a JSON string; keep unparsable text so dispatch can reject it.
            let arguments = match raw {
                Some(Value::String(s)) => {
                    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.clone()))
                }
                Some(other) => other.clone(),
                None => Value::Null,
            };
            let id = c
                .get("id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(|| format!("call_{i}"));
            tool_calls.push(ToolCall {
                id,
                name,
                arguments,
            });
        }
    }
    let u = v.get("usage").cloned().unwrap_or(Value::Null);
    let num = |p: &str| u.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    let input_tokens = num("/prompt_tokens");
    let usage = Usage {
        input_tokens,
        cached_tokens: num("/prompt_tokens_details/cached_tokens").min(input_tokens),
        output_tokens: num("/completion_tokens"),
    };
    Ok(ModelResponse {
        tool_calls,
        assistant_text,
        usage,
        retries: 0,
        end_of_script: false,
    })
}
