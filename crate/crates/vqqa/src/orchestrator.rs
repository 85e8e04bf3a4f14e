//! The optimization loop: generate, rate, check stopping, refine; plus
//! candidate selection and the best-of-N baseline.
//!
//! Each iteration rates the fresh candidate against the original prompt
//! first and only runs the question/answer/refine agents when the loop
//! decides to continue, so a run that stops at iteration `t` has made
//! exactly `(5 + k) * t + 1` completion calls (`k` reference images). A
//! perfect first generation therefore costs a single rating call.

use std::sync::Arc;

use thiserror::Error;

use sha2::{Digest, Sha256};

use crate::agents::{self, AgentContext, AgentError};
use crate::backend::{
    BackendError, CompletionRequest, MediaHandle, RoleTag, VideoGenerator, VlmClient,
};
use crate::agents::template::{render_template, TemplateId};
use crate::model::{
    running_max, GenerationConditions, GlobalScoreRecord, IterationRecord, ModelError, QAPair,
    Question, QuestionCategory, RefinementAnalysis, RunMode, StopPolicy, StopReason, TaskKind,
    Trajectory, VideoArtifact,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("average-QA selection requires QA means aligned with the scores")]
    MissingQaMeans,
    #[error("rating unparsable after {attempts} attempts; responses: {responses:?}")]
    UnparsableRating {
        attempts: u32,
        responses: Vec<String>,
    },
    #[error("observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Backend bindings for one run.
#[derive(Clone)]
pub struct Backends {
    pub video: Arc<dyn VideoGenerator>,
    pub vlm: Arc<dyn VlmClient>,
}

impl Backends {
    /// The fully deterministic simulated pair.
    pub fn sim() -> Self {
        Self {
            video: Arc::new(crate::backend::sim::SimVideoGenerator),
            vlm: Arc::new(crate::agents::sim::SimVlm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Argmax of the global scores, earliest index on ties. The default.
    GlobalSelection,
    /// Ablation: accept the final iteration's output.
    LastIteration,
    /// Ablation: argmax of mean QA scores, earliest index on ties.
    AverageQa,
}

#[derive(Clone)]
pub struct RunConfig {
    pub stop_policy: StopPolicy,
    pub selection_strategy: SelectionStrategy,
    pub gs_in_the_loop: bool,
    /// Annotate QA pairs under this score in the refinement input; off by
    /// default (the refinement template does its own flaw isolation).
    pub qa_highlight_threshold: Option<u8>,
    /// Extra attempts when a rating response fails to parse.
    pub rater_retries: u32,
    /// Keys the seed stream; two runs with the same id replay identically
    /// on deterministic backends.
    pub run_id: String,
    pub backends: Backends,
}

impl RunConfig {
    pub fn new(run_id: impl Into<String>, backends: Backends) -> Self {
        Self {
            stop_policy: StopPolicy::default(),
            selection_strategy: SelectionStrategy::GlobalSelection,
            gs_in_the_loop: false,
            qa_highlight_threshold: None,
            rater_retries: 3,
            run_id: run_id.into(),
            backends,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub should_stop: bool,
    pub reason: Option<StopReason>,
}

impl StopDecision {
    fn go_on() -> Self {
        Self {
            should_stop: false,
            reason: None,
        }
    }

    fn stop(reason: StopReason) -> Self {
        Self {
            should_stop: true,
            reason: Some(reason),
        }
    }
}

/// Seed policy: iteration 0 of sample `s` uses the fixed seed `17 + 100*s`;
/// later iterations draw uniformly from `[0, 2^32 - 1]` out of a stream
/// keyed by `(run_id, sample_index, iteration)`, so any draw can be
/// reproduced independently of call order.
pub fn seed_for(run_id: &str, sample_index: u32, iteration: u32) -> u64 {
    if iteration == 0 {
        return 17 + 100 * sample_index as u64;
    }
    let mut hasher = Sha256::new();
    hasher.update(b"vqqa-seed-stream\0");
    hasher.update(run_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(sample_index.to_le_bytes());
    hasher.update(iteration.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 4];
    bytes.copy_from_slice(&digest[..4]);
    u32::from_le_bytes(bytes) as u64
}

/// Decides whether to halt after the latest rating. Target satisfaction
/// wins over saturation, which wins over the round cap; inside the first
/// `patience` ratings saturation is not evaluable.
pub fn check_stop(
    global_scores: &[u8],
    policy: &StopPolicy,
) -> Result<StopDecision, OrchestratorError> {
    if global_scores.is_empty() {
        return Err(OrchestratorError::EmptyInput("global_scores"));
    }
    let s_star = running_max(global_scores)?;
    debug_assert!(s_star.windows(2).all(|w| w[0] <= w[1]));
    let t = global_scores.len() - 1;
    if s_star[t] >= policy.gamma {
        return Ok(StopDecision::stop(StopReason::TargetSatisfied));
    }
    let patience = policy.patience as usize;
    if t >= patience {
        let improvement = (s_star[t] - s_star[t - patience]) as f64;
        if improvement <= policy.epsilon {
            return Ok(StopDecision::stop(StopReason::Saturated));
        }
    }
    if t >= policy.max_rounds as usize {
        return Ok(StopDecision::stop(StopReason::MaxIterations));
    }
    Ok(StopDecision::go_on())
}

/// Picks the winning candidate index for a finished score list.
pub fn select_best(
    global_scores: &[u8],
    strategy: SelectionStrategy,
    qa_means: Option<&[f64]>,
) -> Result<usize, OrchestratorError> {
    if global_scores.is_empty() {
        return Err(OrchestratorError::EmptyInput("global_scores"));
    }
    match strategy {
        SelectionStrategy::GlobalSelection => Ok(argmax_earliest(global_scores)),
        SelectionStrategy::LastIteration => Ok(global_scores.len() - 1),
        SelectionStrategy::AverageQa => {
            let qa_means = qa_means.ok_or(OrchestratorError::MissingQaMeans)?;
            if qa_means.len() != global_scores.len() {
                return Err(OrchestratorError::MissingQaMeans);
            }
            Ok(argmax_earliest(qa_means))
        }
    }
}

fn argmax_earliest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Rates one candidate against the original prompt (never the refined
/// one). Retries parsing failures up to the budget with the identical
/// request; every attempt is a real completion call.
pub fn global_rate(
    vlm: &dyn VlmClient,
    video: &VideoArtifact,
    conditions: &GenerationConditions,
    rater_retries: u32,
) -> Result<(GlobalScoreRecord, u32), OrchestratorError> {
    let template = match conditions.task_kind {
        TaskKind::TextToVideo => TemplateId::GlobalRateT2v,
        TaskKind::ImageToVideo => TemplateId::GlobalRateI2v,
    };
    let text = render_template(
        template,
        &[("original_prompt", conditions.original_prompt.as_str())],
    )
    .map_err(OrchestratorError::Agent)?;
    let mut request = CompletionRequest::new(RoleTag::GlobalRate, text)
        .with_attachment(MediaHandle::Video(video.locator.clone()));
    if conditions.task_kind == TaskKind::ImageToVideo {
        request = request.with_attachments(
            conditions
                .reference_images
                .iter()
                .map(|image| MediaHandle::Image(image.clone())),
        );
    }
    let mut responses = Vec::new();
    let mut attempts = 0u32;
    while attempts <= rater_retries {
        attempts += 1;
        let raw = request
            .validate()
            .and_then(|_| vlm.vlm_complete(&request))
            .map_err(OrchestratorError::Backend)?;
        match GlobalScoreRecord::from_raw(video.iteration_index, raw.clone()) {
            Ok(record) => return Ok((record, attempts)),
            Err(_) => responses.push(raw),
        }
    }
    Err(OrchestratorError::UnparsableRating {
        attempts,
        responses,
    })
}

/// Receives run progress; the persistence layer implements this to stream
/// events to disk while the loop runs.
pub trait RunObserver {
    fn on_generated(
        &mut self,
        _trajectory: &Trajectory,
        _iteration: u32,
        _prompt_used: &str,
        _seed: Option<u64>,
        _video: &VideoArtifact,
    ) -> Result<(), String> {
        Ok(())
    }
    fn on_rated(&mut self, _iteration: u32, _score: &GlobalScoreRecord) -> Result<(), String> {
        Ok(())
    }
    fn on_questioned(
        &mut self,
        _iteration: u32,
        _questions: &[Question],
        _qg_calls: u64,
    ) -> Result<(), String> {
        Ok(())
    }
    fn on_answered(&mut self, _iteration: u32, _qa_pairs: &[QAPair]) -> Result<(), String> {
        Ok(())
    }
    fn on_refined(
        &mut self,
        _iteration: u32,
        _refinement: &RefinementAnalysis,
    ) -> Result<(), String> {
        Ok(())
    }
    fn on_stopped(&mut self, _trajectory: &Trajectory) -> Result<(), String> {
        Ok(())
    }
    fn on_selected(&mut self, _trajectory: &Trajectory) -> Result<(), String> {
        Ok(())
    }
    fn on_error(&mut self, _iteration: u32, _message: &str) -> Result<(), String> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

fn observe<T>(result: Result<T, String>) -> Result<T, OrchestratorError> {
    result.map_err(OrchestratorError::Observer)
}

/// Generates the candidate for one iteration. A safety-rejected generation
/// is kept as a locatable placeholder (flagged `true`) so the candidate set
/// keeps its shape; it will carry a zero score without a rating call.
fn generate_candidate(
    config: &RunConfig,
    conditions: &GenerationConditions,
    prompt: &str,
    iteration: u32,
    seed: u64,
) -> Result<(VideoArtifact, bool), OrchestratorError> {
    match config
        .backends
        .video
        .generate_video(prompt, conditions, Some(seed))
    {
        Ok(mut video) => {
            video.iteration_index = iteration;
            Ok((video, false))
        }
        Err(BackendError::SafetyRejected(reason)) => {
            log::warn!("iteration {iteration} rejected by safety filter: {reason}");
            let video = VideoArtifact {
                locator: format!("rejected://safety/{iteration}"),
                generator_id: config.backends.video.generator_id(),
                seed: Some(seed),
                iteration_index: iteration,
            };
            Ok((video, true))
        }
        Err(other) => Err(OrchestratorError::Backend(other)),
    }
}

fn rate_candidate(
    config: &RunConfig,
    trajectory: &mut Trajectory,
    video: &VideoArtifact,
    conditions: &GenerationConditions,
    safety_rejected: bool,
) -> Result<GlobalScoreRecord, OrchestratorError> {
    if safety_rejected {
        return Ok(GlobalScoreRecord::from_raw(video.iteration_index, "0")?);
    }
    let (score, rate_calls) = global_rate(
        config.backends.vlm.as_ref(),
        video,
        conditions,
        config.rater_retries,
    )?;
    trajectory.ledger.global_rate_calls += rate_calls as u64;
    Ok(score)
}

/// Runs the full loop for one sample and returns the finished trajectory.
/// On an unrecoverable error the observer has already received every event
/// up to and including the failure, so partial state is persisted.
pub fn optimize(
    conditions: &GenerationConditions,
    config: &RunConfig,
    observer: &mut dyn RunObserver,
) -> Result<Trajectory, OrchestratorError> {
    conditions.validate()?;
    config.stop_policy.validate()?;
    let mut trajectory = Trajectory::new(conditions.clone(), RunMode::Optimize);
    let mut scores: Vec<u8> = Vec::new();
    let mut prompt = conditions.original_prompt.clone();

    let run = |trajectory: &mut Trajectory,
               scores: &mut Vec<u8>,
               prompt: &mut String,
               observer: &mut dyn RunObserver|
     -> Result<(), OrchestratorError> {
        for iteration in 0u32.. {
            let seed = seed_for(&config.run_id, conditions.sample_index, iteration);
            let (video, safety_rejected) =
                generate_candidate(config, conditions, prompt, iteration, seed)?;
            observe(observer.on_generated(trajectory, iteration, prompt, Some(seed), &video))?;
            let score = rate_candidate(config, trajectory, &video, conditions, safety_rejected)?;
            observe(observer.on_rated(iteration, &score))?;
            scores.push(score.score);

            let decision = check_stop(scores, &config.stop_policy)?;
            let mut record = IterationRecord {
                index: iteration,
                prompt_used: prompt.clone(),
                seed: Some(seed),
                video,
                questions: Vec::new(),
                qa_pairs: Vec::new(),
                refinement: None,
                global_score: score,
            };

            if decision.should_stop {
                trajectory.append_iteration(record)?;
                trajectory.set_stop(decision.reason.expect("stop carries a reason"));
                return Ok(());
            }

            if safety_rejected {
                // Nothing to analyze; retry the same prompt next round.
                trajectory.append_iteration(record)?;
                continue;
            }

            let ctx = AgentContext {
                conditions,
                current_prompt: prompt,
                current_video: &record.video,
                history: &trajectory.records,
                gs_in_the_loop: config.gs_in_the_loop,
                highlight_below: config.qa_highlight_threshold,
            };
            let vlm = config.backends.vlm.as_ref();

            let mut questions =
                agents::generate_questions(vlm, QuestionCategory::Alignment, &ctx)?;
            questions.extend(agents::generate_questions(
                vlm,
                QuestionCategory::VisualQuality,
                &ctx,
            )?);
            let mut qg_calls = 2u64;
            if conditions.task_kind == TaskKind::ImageToVideo {
                questions.extend(agents::generate_questions(
                    vlm,
                    QuestionCategory::ConditionFidelity,
                    &ctx,
                )?);
                qg_calls += conditions.k_img() as u64;
            }
            trajectory.ledger.question_gen_calls += qg_calls;
            observe(observer.on_questioned(iteration, &questions, qg_calls))?;

            let qa_pairs = agents::answer_questions(vlm, &record.video, &questions, &ctx)?;
            trajectory.ledger.qa_calls += 1;
            observe(observer.on_answered(iteration, &qa_pairs))?;

            let refinement = agents::refine_prompt(vlm, &ctx, &qa_pairs)?;
            trajectory.ledger.refine_calls += 1;
            observe(observer.on_refined(iteration, &refinement))?;

            *prompt = refinement.refined_prompt.clone();
            record.questions = questions;
            record.qa_pairs = qa_pairs;
            record.refinement = Some(refinement);
            trajectory.append_iteration(record)?;
        }
        unreachable!("loop exits via stop decision");
    };

    if let Err(error) = run(&mut trajectory, &mut scores, &mut prompt, observer) {
        let iteration = trajectory.records.len() as u32;
        let _ = observer.on_error(iteration, &error.to_string());
        return Err(error);
    }

    observe(observer.on_stopped(&trajectory))?;
    finish_selection(&mut trajectory, config.selection_strategy)?;
    observe(observer.on_selected(&trajectory))?;
    Ok(trajectory)
}

/// Best-of-N baseline: N candidates from the original prompt, one rating
/// each, no agent calls. The first candidate uses the fixed initial seed;
/// the rest draw from the run's seed stream.
pub fn best_of_n(
    conditions: &GenerationConditions,
    n: usize,
    config: &RunConfig,
    observer: &mut dyn RunObserver,
) -> Result<Trajectory, OrchestratorError> {
    if n == 0 {
        return Err(OrchestratorError::EmptyInput("n"));
    }
    conditions.validate()?;
    let mut trajectory = Trajectory::new(conditions.clone(), RunMode::BestOfN);
    let prompt = conditions.original_prompt.clone();

    let run = |trajectory: &mut Trajectory,
               observer: &mut dyn RunObserver|
     -> Result<(), OrchestratorError> {
        for candidate_index in 0..n as u32 {
            let seed = seed_for(&config.run_id, conditions.sample_index, candidate_index);
            let (video, safety_rejected) =
                generate_candidate(config, conditions, &prompt, candidate_index, seed)?;
            observe(observer.on_generated(
                trajectory,
                candidate_index,
                &prompt,
                Some(seed),
                &video,
            ))?;
            let score = rate_candidate(config, trajectory, &video, conditions, safety_rejected)?;
            observe(observer.on_rated(candidate_index, &score))?;
            trajectory.append_iteration(IterationRecord {
                index: candidate_index,
                prompt_used: prompt.clone(),
                seed: Some(seed),
                video,
                questions: Vec::new(),
                qa_pairs: Vec::new(),
                refinement: None,
                global_score: score,
            })?;
        }
        Ok(())
    };

    if let Err(error) = run(&mut trajectory, observer) {
        let iteration = trajectory.records.len() as u32;
        let _ = observer.on_error(iteration, &error.to_string());
        return Err(error);
    }

    trajectory.set_stop(StopReason::MaxIterations);
    observe(observer.on_stopped(&trajectory))?;
    finish_selection(&mut trajectory, SelectionStrategy::GlobalSelection)?;
    observe(observer.on_selected(&trajectory))?;
    Ok(trajectory)
}

fn finish_selection(
    trajectory: &mut Trajectory,
    strategy: SelectionStrategy,
) -> Result<(), OrchestratorError> {
    let scores = trajectory.global_scores();
    let qa_means: Vec<f64> = trajectory
        .qa_means()
        .into_iter()
        // Records without QA pairs (the halted candidate) sit below every
        // real mean so they are never picked by average-QA selection.
        .map(|m| m.unwrap_or(-1.0))
        .collect();
    let selected = select_best(&scores, strategy, Some(&qa_means))?;
    trajectory.set_selected(selected)?;
    Ok(())
}
