//! HTTP adapter for provider-hosted models.
//!
//! One POST per call. The wire shape is adapter-internal and pinned by the
//! stub-server contract tests:
//!
//! - `POST {base}/v1/complete` with `{model, temperature, prompt,
//!   attachments: [{kind, uri}]}` returning `{"text": "..."}`.
//! - `POST {base}/v1/generate` with `{model, prompt, seed, images}`
//!   returning `{"locator": "..."}`; HTTP 403 maps to a safety rejection.
//!
//! Credentials come from the environment (`VQQA_API_KEY`, `VQQA_API_BASE`,
//! `VQQA_MODEL`); the CLI resolves them and passes an [`HttpConfig`].

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::backend::{check_seed, BackendError, CompletionRequest, VideoGenerator, VlmClient};
use crate::model::{GenerationConditions, VideoArtifact};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

#[derive(Deserialize)]
struct GenerateResponse {
    locator: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn post(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<reqwest::blocking::Response, BackendError> {
        self.client
            .post(format!("{}{}", self.config.base_url.trim_end_matches('/'), path))
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))
    }
}

impl VlmClient for HttpBackend {
    fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        request.validate()?;
        let body = json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "prompt": request.prompt_text,
            "attachments": request.attachments,
        });
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let response = self.post("/v1/complete", &body)?;
            let status = response.status();
            if status.as_u16() == 429 {
                if attempts > request.max_retries {
                    return Err(BackendError::RateLimited { attempts });
                }
                std::thread::sleep(backoff(attempts));
                continue;
            }
            if !status.is_success() {
                return Err(BackendError::Unavailable(format!("HTTP {status}")));
            }
            let parsed: CompleteResponse = response
                .json()
                .map_err(|e| BackendError::Unavailable(format!("bad response body: {e}")))?;
            return Ok(parsed.text);
        }
    }
}

impl VideoGenerator for HttpBackend {
    fn generate_video(
        &self,
        prompt: &str,
        conditions: &GenerationConditions,
        seed: Option<u64>,
    ) -> Result<VideoArtifact, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyInput("prompt"));
        }
        check_seed(seed)?;
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "seed": seed,
            "images": conditions.reference_images,
        });
        let response = self.post("/v1/generate", &body)?;
        let status = response.status();
        if status.as_u16() == 403 {
            return Err(BackendError::SafetyRejected(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("HTTP {status}")));
        }
        let parsed: GenerateResponse = response
            .json()
            .map_err(|e| BackendError::Unavailable(format!("bad response body: {e}")))?;
        Ok(VideoArtifact {
            locator: parsed.locator,
            generator_id: self.generator_id(),
            seed,
            iteration_index: 0,
        })
    }

    fn generator_id(&self) -> String {
        self.config.model.clone()
    }
}

fn backoff(attempt: u32) -> Duration {
    let millis = 100u64.saturating_mul(1 << attempt.min(5));
    Duration::from_millis(millis.min(2000))
}
