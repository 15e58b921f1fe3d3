//! Chat-with-tools model interface.
//!
//! [`ModelBackend`] is implemented by the deterministic [`ScriptedBackend`]
//! and by [`HttpBackend`], an OpenAI-compatible chat-completions client.

mod http;
mod scripted;

use std::ops::{Add, AddAssign};
use std::path::Path;
use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::routing::{Modality, ToolName, ToolSchema};

pub use http::{serialize_request, HttpBackend, RetryPolicy};
pub use scripted::{Script, ScriptedBackend, ScriptedCall, ScriptedStep, SCRIPT_VERSION};

pub const MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;
pub const MAX_CLIP_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("provider error after {attempts} attempt(s): {message}")]
    ProviderError { message: String, attempts: u32 },
    #[error("{path}: {bytes} bytes exceeds the {limit}-byte {modality} payload bound")]
    PayloadTooLarge {
        path: String,
        modality: Modality,
        bytes: usize,
        limit: usize,
    },
    #[error("media for `{0}` attached but the schema does not expose its tool")]
    MediaNotInSchema(String),
    #[error("deadline reached before the model answered")]
    DeadlineExceeded,
    #[error("invalid script: {0}")]
    InvalidScript(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    /// Prompt tokens including any cached portion.
    pub input_tokens: u64,
    #[serde(default)]
    pub cached_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl Add for Usage {
    type Output = Usage;
    fn add(self, o: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + o.input_tokens,
            cached_tokens: self.cached_tokens + o.cached_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, o: Usage) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

pub fn media_limit(modality: Modality) -> usize {
    match modality {
        Modality::Image => MAX_IMAGE_BYTES,
        Modality::Audio | Modality::Video => MAX_CLIP_BYTES,
    }
}

pub fn mime_for_path(path: &str) -> Option<(&'static str, Modality)> {
    let ext = Path::new(path).extension()?.to_str()?.to_ascii_lowercase();
    let mime = match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "wav" => "audio/wav",
        "mp3" => "audio/mpeg",
        "ogg" => "audio/ogg",
        "flac" => "audio/flac",
        "aac" => "audio/aac",
        "m4a" => "audio/mp4",
        "mp4" => "video/mp4",
        "webm" => "video/webm",
        "avi" => "video/x-msvideo",
        "mov" => "video/quicktime",
        "mkv" => "video/x-matroska",
        _ => return None,
    };
    Some((mime, Modality::from_extension(&ext)?))
}

fn as_base64<S: Serializer>(data: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(data))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MediaPayload {
    pub modality: Modality,
    pub mime_type: String,
    #[serde(serialize_with = "as_base64")]
    pub data: Vec<u8>,
    pub source_path: String,
    pub duration_seconds: Option<f64>,
}

impl MediaPayload {
    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    /// Raw name as emitted by the model; may not be a known tool.
    pub name: String,
    #[serde(default)]
    pub arguments: serde_json::Value,
}

impl ToolCall {
    pub fn tool(&self) -> Option<ToolName> {
        self.name.parse().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Agent,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text {
        text: String,
    },
    Media(MediaPayload),
    ToolCall(ToolCall),
    ToolResult {
        call_id: String,
        name: String,
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRequest {
    pub system_prompt: String,
    pub messages: Vec<Message>,
    pub tool_schema: ToolSchema,
}

impl ModelRequest {
    pub fn media(&self) -> impl Iterator<Item = &MediaPayload> {
        self.messages.iter().flat_map(|m| {
            m.content.iter().filter_map(|p| match p {
                ContentPart::Media(media) => Some(media),
                _ => None,
            })
        })
    }

    /// Stable digest of the request's canonical JSON form.
    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(&serde_json::to_vec(self).expect("request serializes"))
    }

    /// Enforces payload bounds and the schema/media consistency invariant.
    pub fn validate(&self) -> Result<(), BackendError> {
        for m in self.media() {
            if !self.tool_schema.contains(m.modality.perception_tool()) {
                return Err(BackendError::MediaNotInSchema(m.source_path.clone()));
            }
            let limit = media_limit(m.modality);
            if m.data.len() > limit {
                return Err(BackendError::PayloadTooLarge {
                    path: m.source_path.clone(),
                    modality: m.modality,
                    bytes: m.data.len(),
                    limit,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelResponse {
    pub tool_calls: Vec<ToolCall>,
    pub assistant_text: Option<String>,
    pub usage: Usage,
    /// Transport retries before this response was obtained.
    pub retries: u32,
    /// Set only by the scripted backend once its steps are used up.
    pub end_of_script: bool,
}

pub trait ModelBackend: Send + Sync {
    fn model_id(&self) -> &str;

    /// One chat completion. Implementations must give up at `deadline`.
    fn complete(
        &self,
        request: &ModelRequest,
        deadline: Option<Instant>,
    ) -> Result<ModelResponse, BackendError>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn request_with(media: MediaPayload, tools: &[ToolName]) -> ModelRequest {
        ModelRequest {
            system_prompt: "sys".into(),
            messages: vec![Message {
                role: Role::Environment,
                content: vec![ContentPart::Media(media)],
            }],
            tool_schema: ToolSchema::from_names(&tools.iter().copied().collect::<BTreeSet<_>>()),
        }
    }

    fn payload(modality: Modality, len: usize) -> MediaPayload {
        MediaPayload {
            modality,
            mime_type: "x/y".into(),
            data: vec![0; len],
            source_path: "f".into(),
            duration_seconds: None,
        }
    }

    #[test]
    fn payload_bounds() {
        let ok = request_with(
            payload(Modality::Image, MAX_IMAGE_BYTES),
            &[ToolName::ViewImage],
        );
        assert!(ok.validate().is_ok());
        let big = request_with(
            payload(Modality::Image, MAX_IMAGE_BYTES + 1),
            &[ToolName::ViewImage],
        );
        assert!(matches!(
            big.validate(),
            Err(BackendError::PayloadTooLarge { .. })
        ));
        let clip = request_with(
            payload(Modality::Video, MAX_IMAGE_BYTES + 1),
            &[ToolName::WatchVideo],
        );
        assert!(clip.validate().is_ok());
    }

    #[test]
    fn media_requires_tool_in_schema() {
        let r = request_with(payload(Modality::Audio, 10), &[ToolName::ViewImage]);
        assert!(matches!(
            r.validate(),
            Err(BackendError::MediaNotInSchema(_))
        ));
    }

    #[test]
    fn mime_lookup() {
        assert_eq!(
            mime_for_path("a/B.MP4"),
            Some(("video/mp4", Modality::Video))
        );
        assert_eq!(mime_for_path("x.m4a"), Some(("audio/mp4", Modality::Audio)));
        assert_eq!(mime_for_path("x.txt"), None);
    }

    #[test]
    fn usage_sums() {
        let a = Usage {
            input_tokens: 10,
            cached_tokens: 2,
            output_tokens: 3,
        };
        let b = Usage {
            input_tokens: 5,
            cached_tokens: 0,
            output_tokens: 1,
        };
        let total: Usage = [a, b].into_iter().sum();
        assert_eq!(
            total,
            Usage {
                input_tokens: 15,
                cached_tokens: 2,
                output_tokens: 4
            }
        );
        assert_eq!(total.total_tokens(), 19);
    }
}
