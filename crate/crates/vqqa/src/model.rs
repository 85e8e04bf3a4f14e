//! Domain types and pure bookkeeping shared by all other modules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every generated question must start with this exact prefix.
pub const QUESTION_PREFIX: &str = "On a scale of 0-100, how";

/// Largest seed a seeded generator accepts (inclusive).
pub const MAX_SEED: u64 = u32::MAX as u64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid generation conditions: {0}")]
    InvalidConditions(String),
    #[error("sequence violation: {0}")]
    SequenceViolation(String),
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(i64),
    #[error("invalid stop policy: {0}")]
    InvalidPolicy(String),
    #[error("rating response {0:?} is not a bare integer in [0, 100]")]
    UnparsableScore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TextToVideo,
    ImageToVideo,
}

/// The user's fixed inputs: the original prompt, optional reference images,
/// and the task they define. These never change across iterations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConditions {
    pub original_prompt: String,
    pub reference_images: Vec<String>,
    pub task_kind: TaskKind,
    pub sample_index: u32,
}

impl GenerationConditions {
    pub fn text_to_video(prompt: impl Into<String>, sample_index: u32) -> Result<Self, ModelError> {
        let conditions = Self {
            original_prompt: prompt.into(),
            reference_images: Vec::new(),
            task_kind: TaskKind::TextToVideo,
            sample_index,
        };
        conditions.validate()?;
        Ok(conditions)
    }

    pub fn image_to_video(
        prompt: impl Into<String>,
        reference_images: Vec<String>,
        sample_index: u32,
    ) -> Result<Self, ModelError> {
        let conditions = Self {
            original_prompt: prompt.into(),
            reference_images,
            task_kind: TaskKind::ImageToVideo,
            sample_index,
        };
        conditions.validate()?;
        Ok(conditions)
    }

    /// Number of reference images (`k` in the cost model).
    pub fn k_img(&self) -> usize {
        self.reference_images.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.original_prompt.trim().is_empty() {
            return Err(ModelError::EmptyInput("original_prompt"));
        }
        let has_images = !self.reference_images.is_empty();
        let wants_images = self.task_kind == TaskKind::ImageToVideo;
        if has_images != wants_images {
            return Err(ModelError::InvalidConditions(format!(
                "task kind {:?} with {} reference images",
                self.task_kind,
                self.reference_images.len()
            )));
        }
        Ok(())
    }
}

/// Handle for one generated video. The locator is opaque to the engine; only
/// backends interpret it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoArtifact {
    pub locator: String,
    pub generator_id: String,
    pub seed: Option<u64>,
    pub iteration_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    Alignment,
    VisualQuality,
    ConditionFidelity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub category: QuestionCategory,
    /// Index into `GenerationConditions::reference_images`; set only for
    /// `ConditionFidelity` questions.
    pub source_image_index: Option<usize>,
}

impl Question {
    pub fn alignment(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            category: QuestionCategory::Alignment,
            source_image_index: None,
        }
    }

    pub fn visual_quality(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            category: QuestionCategory::VisualQuality,
            source_image_index: None,
        }
    }

    pub fn condition_fidelity(text: impl Into<String>, source_image_index: usize) -> Self {
        Self {
            text: text.into(),
            category: QuestionCategory::ConditionFidelity,
            source_image_index: Some(source_image_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuestionViolation {
    /// Text does not start with [`QUESTION_PREFIX`].
    PrefixViolation,
    /// `ConditionFidelity` question without a source image index.
    MissingImageIndex,
    /// Non-`ConditionFidelity` question carrying a source image index.
    UnexpectedImageIndex,
}

/// Checks the structural rules for a question and returns every violation.
/// Never panics; an empty list means the question is valid.
pub fn validate_question(question: &Question) -> Vec<QuestionViolation> {
    let mut violations = Vec::new();
    if !question.text.starts_with(QUESTION_PREFIX) {
        violations.push(QuestionViolation::PrefixViolation);
    }
    match (question.category, question.source_image_index) {
        (QuestionCategory::ConditionFidelity, None) => {
            violations.push(QuestionViolation::MissingImageIndex)
        }
        (QuestionCategory::Alignment | QuestionCategory::VisualQuality, Some(_)) => {
            violations.push(QuestionViolation::UnexpectedImageIndex)
        }
        _ => {}
    }
    violations
}

/// One answered question with its normalized score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: Question,
    pub score: u8,
}

impl QAPair {
    pub fn new(question: Question, score: i64) -> Result<Self, ModelError> {
        if !(0..=100).contains(&score) {
            return Err(ModelError::ScoreOutOfRange(score));
        }
        Ok(Self {
            question,
            score: score as u8,
        })
    }
}

/// One flaw the refinement agent isolated from the QA feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlawItem {
    pub vqa_pair_or_question: String,
    pub score: Option<u8>,
    pub category: Option<String>,
    pub identified_flaw: String,
    pub action_or_correlation: String,
}

/// The refinement agent's structured output: the analysis plus the prompt
/// that drives the next generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementAnalysis {
    pub historical_summary: String,
    pub flaw_items: Vec<FlawItem>,
    pub refinement_strategy: String,
    pub refined_prompt: String,
}

/// The holistic 0-100 rating of one candidate against the original prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalScoreRecord {
    pub iteration_index: u32,
    pub score: u8,
    pub raw_response: String,
}

impl GlobalScoreRecord {
    /// Parses a rater response: trimmed, ASCII digits only, value <= 100.
    pub fn from_raw(iteration_index: u32, raw: impl Into<String>) -> Result<Self, ModelError> {
        let raw = raw.into();
        let score = parse_bare_score(&raw).ok_or_else(|| ModelError::UnparsableScore(raw.clone()))?;
        Ok(Self {
            iteration_index,
            score,
            raw_response: raw,
        })
    }
}

/// Accepts a bare integer 0-100 after whitespace trimming, nothing else.
pub fn parse_bare_score(raw: &str) -> Option<u8> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || !trimmed.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    match trimmed.parse::<u32>() {
        Ok(value) if value <= 100 => Some(value as u8),
        _ => None,
    }
}

/// Full state of one optimization round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub prompt_used: String,
    pub seed: Option<u64>,
    pub video: VideoArtifact,
    pub questions: Vec<Question>,
    pub qa_pairs: Vec<QAPair>,
    /// Absent at the final/halted iteration (no further prompt is needed)
    /// and for candidates the generator rejected.
    pub refinement: Option<RefinementAnalysis>,
    pub global_score: GlobalScoreRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetSatisfied,
    Saturated,
    MaxIterations,
}

/// How a trajectory was produced; audits use different cost expectations
/// for the optimization loop and the best-of-N baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Optimize,
    BestOfN,
}

/// Per-role count of multimodal completion calls, auditable against the
/// closed-form cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub question_gen_calls: u64,
    pub qa_calls: u64,
    pub refine_calls: u64,
    pub global_rate_calls: u64,
}

impl CostLedger {
    pub fn total(&self) -> u64 {
        self.question_gen_calls + self.qa_calls + self.refine_calls + self.global_rate_calls
    }
}

/// The ordered candidate set produced by one run, append-only and frozen
/// once a stop reason is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub conditions: GenerationConditions,
    pub mode: RunMode,
    pub records: Vec<IterationRecord>,
    pub stop_reason: Option<StopReason>,
    pub selected_index: Option<usize>,
    pub ledger: CostLedger,
}

impl Trajectory {
    pub fn new(conditions: GenerationConditions, mode: RunMode) -> Self {
        Self {
            conditions,
            mode,
            records: Vec::new(),
            stop_reason: None,
            selected_index: None,
            ledger: CostLedger::default(),
        }
    }

    /// Appends the next iteration record, enforcing contiguous indices and
    /// rejecting appends after the trajectory stopped.
    pub fn append_iteration(&mut self, record: IterationRecord) -> Result<(), ModelError> {
        if self.stop_reason.is_some() {
            return Err(ModelError::SequenceViolation(
                "append after stop_reason was set".into(),
            ));
        }
        let expected = self.records.len() as u32;
        if record.index != expected {
            return Err(ModelError::SequenceViolation(format!(
                "record index {} where {} was expected",
                record.index, expected
            )));
        }
        if record.qa_pairs.len() != record.questions.len() {
            return Err(ModelError::SequenceViolation(format!(
                "{} qa_pairs for {} questions",
                record.qa_pairs.len(),
                record.questions.len()
            )));
        }
        if record.index == 0 && record.prompt_used != self.conditions.original_prompt {
            return Err(ModelError::SequenceViolation(
                "record 0 must use the original prompt".into(),
            ));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn set_stop(&mut self, reason: StopReason) {
        self.stop_reason = Some(reason);
    }

    pub fn set_selected(&mut self, index: usize) -> Result<(), ModelError> {
        if index >= self.records.len() {
            return Err(ModelError::SequenceViolation(format!(
                "selected index {} out of {} records",
                index,
                self.records.len()
            )));
        }
        self.selected_index = Some(index);
        Ok(())
    }

    /// Global scores in iteration order.
    pub fn global_scores(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.global_score.score).collect()
    }

    /// Mean QA score per record; `None` for records that carry no QA pairs
    /// (the halted final candidate, rejected generations, best-of-N runs).
    pub fn qa_means(&self) -> Vec<Option<f64>> {
        self.records
            .iter()
            .map(|r| {
                if r.qa_pairs.is_empty() {
                    None
                } else {
                    let sum: u64 = r.qa_pairs.iter().map(|p| p.score as u64).sum();
                    Some(sum as f64 / r.qa_pairs.len() as f64)
                }
            })
            .collect()
    }
}

/// Convergence parameters for the optimization loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopPolicy {
    /// Target score; reaching it stops the run.
    pub gamma: u8,
    /// Window (in ratings) over which running-max stagnation is measured.
    pub patience: u32,
    /// Minimum running-max improvement over the window that still counts
    /// as progress.
    pub epsilon: f64,
    /// Hard cap on optimization rounds beyond the initial generation.
    pub max_rounds: u32,
}

impl Default for StopPolicy {
    fn default() -> Self {
        Self {
            gamma: 100,
            patience: 3,
            epsilon: 0.0,
            max_rounds: 4,
        }
    }
}

impl StopPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.gamma == 0 || self.gamma > 100 {
            return Err(ModelError::InvalidPolicy(format!(
                "gamma {} outside (0, 100]",
                self.gamma
            )));
        }
        if self.patience == 0 {
            return Err(ModelError::InvalidPolicy("patience must be >= 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(ModelError::InvalidPolicy(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Prefix maximum: `output[i] = max(scores[0..=i])`.
pub fn running_max(scores: &[u8]) -> Result<Vec<u8>, ModelError> {
    if scores.is_empty() {
        return Err(ModelError::EmptyInput("scores"));
    }
    let mut best = 0u8;
    Ok(scores
        .iter()
        .map(|&s| {
            best = best.max(s);
            best
        })
        .collect())
}
