//! Deterministic simulated backend.
//!
//! A "video" is a [`SimScene`]: a map from aspect tokens (the content words
//! of the generating prompt) to a fulfillment level in `[0, 1]`. Fulfillment
//! is a pure function of `(aspect, seed, emphasis)`:
//!
//! ```text
//! u = hash_unit(aspect, seed)            // uniform in [0, 1)
//! fulfillment = min(1, u + 0.25 * emphasis)
//! ```
//!
//! where `emphasis` counts repeated mentions of the aspect beyond the first.
//! Raising emphasis therefore never lowers fulfillment for any seed, which
//! makes expected improvement under the simulated refiner provable at desk
//! scale. Scene locators encode `(seed, prompt)` so any holder of a video
//! handle can reconstruct the exact scene; the whole backend is stateless.
//!
//! Prompts containing the token `forbidden` are rejected with
//! [`BackendError::SafetyRejected`], mimicking provider safety filters.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::backend::{check_seed, BackendError, VideoGenerator};
use crate::model::{GenerationConditions, Question, VideoArtifact};

/// Emphasis gain per repeated mention of an aspect.
pub const EMPHASIS_GAIN: f64 = 0.25;

/// Token that triggers the simulated safety filter.
pub const SAFETY_TOKEN: &str = "forbidden";

const LOCATOR_PREFIX: &str = "sim://scene/";

/// Desk-scale stand-in for a generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    pub aspects: BTreeMap<String, f64>,
    pub seed: u64,
}

/// Splits a prompt into aspect tokens: lowercased alphanumeric words of at
/// least three characters, in first-occurrence order, with their mention
/// counts. Emphasis markers like `((word))` count as ordinary mentions.
pub fn aspect_counts(prompt: &str) -> Vec<(String, u32)> {
    let mut counts: Vec<(String, u32)> = Vec::new();
    for raw in prompt.split(|c: char| !c.is_alphanumeric()) {
        if raw.chars().count() < 3 {
            continue;
        }
        let token = raw.to_lowercase();
        match counts.iter_mut().find(|(t, _)| *t == token) {
            Some((_, n)) => *n += 1,
            None => counts.push((token, 1)),
        }
    }
    counts
}

/// Distinct aspect tokens of a prompt in first-occurrence order.
pub fn aspects_of(prompt: &str) -> Vec<String> {
    aspect_counts(prompt).into_iter().map(|(t, _)| t).collect()
}

fn hash_unit(aspect: &str, seed: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(b"vqqa-sim-fulfillment\0");
    hasher.update(aspect.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    // 53 uniform bits -> [0, 1)
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// Builds the deterministic scene for `(prompt, seed)`.
pub fn sim_generate(
    prompt: &str,
    _conditions: &GenerationConditions,
    seed: u64,
) -> Result<SimScene, BackendError> {
    sim_scene(prompt, seed)
}

pub fn sim_scene(prompt: &str, seed: u64) -> Result<SimScene, BackendError> {
    if prompt.trim().is_empty() {
        return Err(BackendError::EmptyInput("prompt"));
    }
    let mut aspects = BTreeMap::new();
    for (aspect, count) in aspect_counts(prompt) {
        let emphasis = (count - 1) as f64;
        let fulfillment = (hash_unit(&aspect, seed) + EMPHASIS_GAIN * emphasis).min(1.0);
        aspects.insert(aspect, fulfillment);
    }
    Ok(SimScene { aspects, seed })
}

/// Extracts the aspect a simulated question asks about: the text between
/// backticks.
pub fn question_aspect(question_text: &str) -> Option<&str> {
    let start = question_text.find('`')?;
    let rest = &question_text[start + 1..];
    let end = rest.find('`')?;
    Some(&rest[..end])
}

/// Scores one question against a scene: `round(100 * fulfillment)` of the
/// referenced aspect, 0 if the aspect is absent from the scene.
pub fn sim_answer(scene: &SimScene, question: &Question) -> Result<u8, BackendError> {
    let aspect = question_aspect(&question.text)
        .ok_or_else(|| BackendError::UnknownAspect(question.text.clone()))?;
    let fulfillment = scene.aspects.get(&aspect.to_lowercase()).copied().unwrap_or(0.0);
    Ok(score_from_fulfillment(fulfillment))
}

/// Holistic rating: `round(100 * mean fulfillment)` over the original
/// prompt's aspects; aspects missing from the scene count as 0.
pub fn sim_rate(scene: &SimScene, conditions: &GenerationConditions) -> Result<u8, BackendError> {
    let aspects = aspects_of(&conditions.original_prompt);
    if aspects.is_empty() {
        return Err(BackendError::EmptyInput("original_prompt aspects"));
    }
    let sum: f64 = aspects
        .iter()
        .map(|a| scene.aspects.get(a).copied().unwrap_or(0.0))
        .sum();
    Ok(score_from_fulfillment(sum / aspects.len() as f64))
}

pub fn score_from_fulfillment(fulfillment: f64) -> u8 {
    (fulfillment * 100.0).round() as u8
}

pub fn scene_locator(prompt: &str, seed: u64) -> String {
    format!("{LOCATOR_PREFIX}{seed}/{}", hex::encode(prompt.as_bytes()))
}

/// Reconstructs the scene a sim locator denotes.
pub fn scene_from_locator(locator: &str) -> Result<SimScene, BackendError> {
    let rest = locator
        .strip_prefix(LOCATOR_PREFIX)
        .ok_or_else(|| BackendError::MalformedRequest(format!("not a sim locator: {locator}")))?;
    let (seed, prompt_hex) = rest
        .split_once('/')
        .ok_or_else(|| BackendError::MalformedRequest(format!("bad sim locator: {locator}")))?;
    let seed: u64 = seed
        .parse()
        .map_err(|_| BackendError::MalformedRequest(format!("bad seed in locator: {locator}")))?;
    let bytes = hex::decode(prompt_hex)
        .map_err(|_| BackendError::MalformedRequest(format!("bad prompt hex in {locator}")))?;
    let prompt = String::from_utf8(bytes)
        .map_err(|_| BackendError::MalformedRequest(format!("non-utf8 prompt in {locator}")))?;
    sim_scene(&prompt, seed)
}

/// The simulated video generator.
#[derive(Debug, Default, Clone)]
pub struct SimVideoGenerator;

impl VideoGenerator for SimVideoGenerator {
    fn generate_video(
        &self,
        prompt: &str,
        _conditions: &GenerationConditions,
        seed: Option<u64>,
    ) -> Result<VideoArtifact, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyInput("prompt"));
        }
        check_seed(seed)?;
        if prompt.to_lowercase().contains(SAFETY_TOKEN) {
            return Err(BackendError::SafetyRejected(format!(
                "prompt contains {SAFETY_TOKEN:?}"
            )));
        }
        let effective_seed = seed.unwrap_or(0);
        Ok(VideoArtifact {
            locator: scene_locator(prompt, effective_seed),
            generator_id: self.generator_id(),
            seed,
            iteration_index: 0,
        })
    }

    fn generator_id(&self) -> String {
        "sim".into()
    }
}
