//! Pluggable capability interfaces: video generation and multimodal
//! completion, plus the deterministic simulated backend and an HTTP adapter.

pub mod http;
pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GenerationConditions, VideoArtifact, MAX_SEED};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("generation rejected by safety filter: {0}")]
    SafetyRejected(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("seed {0} out of range [0, 2^32 - 1]")]
    SeedOutOfRange(u64),
    #[error("temperature must be exactly 0.0, got {0}")]
    NonZeroTemperature(f64),
    #[error("no aspect token found in question {0:?}")]
    UnknownAspect(String),
    #[error("malformed request for the simulated backend: {0}")]
    MalformedRequest(String),
}

/// Which agent a completion request serves; determines the expected
/// response schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    QuestionGen,
    Qa,
    Refine,
    GlobalRate,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "uri")]
pub enum MediaHandle {
    Video(String),
    Image(String),
}

/// One multimodal completion call. Temperature must stay at exactly 0.0;
/// implementations reject anything else before doing work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role_tag: RoleTag,
    pub prompt_text: String,
    pub attachments: Vec<MediaHandle>,
    pub temperature: f64,
    pub max_retries: u32,
}

impl CompletionRequest {
    pub fn new(role_tag: RoleTag, prompt_text: impl Into<String>) -> Self {
        Self {
            role_tag,
            prompt_text: prompt_text.into(),
            attachments: Vec::new(),
            temperature: 0.0,
            max_retries: 3,
        }
    }

    pub fn with_attachment(mut self, attachment: MediaHandle) -> Self {
        self.attachments.push(attachment);
        self
    }

    pub fn with_attachments(mut self, attachments: impl IntoIterator<Item = MediaHandle>) -> Self {
        self.attachments.extend(attachments);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature != 0.0 {
            return Err(BackendError::NonZeroTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Video generation capability. Implementations must be shareable across
/// concurrently running samples; per-call state stays local.
pub trait VideoGenerator: Send + Sync {
    /// Generates one video. Seeded backends must return bit-identical
    /// artifacts for identical `(prompt, conditions, seed)`; seedless
    /// backends ignore `seed`. The caller owns `iteration_index` and
    /// overwrites it after the call.
    fn generate_video(
        &self,
        prompt: &str,
        conditions: &GenerationConditions,
        seed: Option<u64>,
    ) -> Result<VideoArtifact, BackendError>;

    fn generator_id(&self) -> String;
}

/// Multimodal completion capability. Returns the model's raw textual
/// response; implementations must not inject or reorder attachments.
pub trait VlmClient: Send + Sync {
    fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

pub(crate) fn check_seed(seed: Option<u64>) -> Result<(), BackendError> {
    match seed {
        Some(s) if s > MAX_SEED => Err(BackendError::SeedOutOfRange(s)),
        _ => Ok(()),
    }
}
