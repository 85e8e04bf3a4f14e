//! Agent calls: template rendering, completion, and response validation.
//!
//! Three agents drive one optimization round. Question generation probes the
//! prompt, the video, and each reference image; question answering scores
//! every question in a single call; prompt refinement turns the scored
//! feedback into the next prompt. All calls run at temperature 0.0, so a
//! malformed response is retried exactly once (it only helps against
//! transport truncation) and then surfaced as a typed error.

pub mod parse;
pub mod sim;
pub mod template;

use thiserror::Error;

use crate::backend::{BackendError, CompletionRequest, MediaHandle, RoleTag, VlmClient};
use crate::model::{
    validate_question, GenerationConditions, IterationRecord, QAPair, Question, QuestionCategory,
    RefinementAnalysis, TaskKind, VideoArtifact,
};
use parse::{parse_agent_json, AgentPayload};
use template::{render_template, TemplateId};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("{category:?} produced {actual} questions, expected {min}..={max}")]
    CountViolation {
        category: QuestionCategory,
        actual: usize,
        min: usize,
        max: usize,
    },
    #[error("question violates the required prefix: {0:?}")]
    PrefixViolation(String),
    #[error("{answers} answers for {questions} questions")]
    CountMismatch { questions: usize, answers: usize },
    #[error("missing template slots: {0:?}")]
    MissingSlot(Vec<String>),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Inputs one agent call sees: the fixed conditions, the current prompt and
/// video, and summaries of the previous rounds. Global scores stay out of
/// the history unless `gs_in_the_loop` is explicitly enabled.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub conditions: &'a GenerationConditions,
    pub current_prompt: &'a str,
    pub current_video: &'a VideoArtifact,
    pub history: &'a [IterationRecord],
    pub gs_in_the_loop: bool,
    /// When set, QA pairs scoring below this are annotated in the rendered
    /// refinement input. All pairs are passed either way; the template's
    /// own analysis isolates the low scorers.
    pub highlight_below: Option<u8>,
}

/// Allowed question counts per category, from the template instructions.
pub fn question_count_bounds(category: QuestionCategory) -> (usize, usize) {
    match category {
        QuestionCategory::Alignment => (5, 10),
        QuestionCategory::VisualQuality => (8, 10),
        QuestionCategory::ConditionFidelity => (5, 10),
    }
}

/// Renders the `{history}` slot: prompts and QA pairs of prior rounds, plus
/// global scores only when `gs_in_the_loop` is on.
pub fn render_history(history: &[IterationRecord], gs_in_the_loop: bool) -> String {
    if history.is_empty() {
        return "None.".into();
    }
    let mut out = String::new();
    for record in history {
        out.push_str(&format!("Iteration {}:\n", record.index));
        out.push_str(&format!("Prompt: {}\n", record.prompt_used));
        if record.qa_pairs.is_empty() {
            out.push_str("QA Pairs: (none)\n");
        } else {
            out.push_str("QA Pairs:\n");
            out.push_str(&format_qa_pairs(&record.qa_pairs, None));
        }
        if gs_in_the_loop {
            out.push_str(&format!("Global Score: {}\n", record.global_score.score));
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

/// Renders QA pairs as `Q: <question> A: <score>` lines, annotating pairs
/// under the highlight threshold when one is set.
pub fn format_qa_pairs(qa_pairs: &[QAPair], highlight_below: Option<u8>) -> String {
    let mut out = String::new();
    for pair in qa_pairs {
        out.push_str(&format!("Q: {} A: {}", pair.question.text, pair.score));
        if highlight_below.is_some_and(|t| pair.score < t) {
            out.push_str(" (low)");
        }
        out.push('\n');
    }
    out
}

/// Renders the `{questions}` slot as a numbered list.
pub fn format_questions(questions: &[Question]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {}", i + 1, q.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Completes a request and validates the response, retrying the identical
/// request once if validation fails.
fn complete_validated<T>(
    vlm: &dyn VlmClient,
    request: &CompletionRequest,
    mut validate: impl FnMut(&str) -> Result<T, AgentError>,
) -> Result<T, AgentError> {
    let raw = vlm.vlm_complete(request)?;
    match validate(&raw) {
        Ok(value) => Ok(value),
        Err(first_error) => {
            log::warn!(
                "{:?} response failed validation ({first_error}); retrying once",
                request.role_tag
            );
            let raw = vlm.vlm_complete(request)?;
            validate(&raw).map_err(|_| first_error)
        }
    }
}

/// Generates questions for one category. Issues one completion call, except
/// for condition fidelity which issues one call per reference image.
pub fn generate_questions(
    vlm: &dyn VlmClient,
    category: QuestionCategory,
    ctx: &AgentContext<'_>,
) -> Result<Vec<Question>, AgentError> {
    match category {
        QuestionCategory::Alignment => {
            let text = render_template(
                TemplateId::AlignmentQg,
                &[("t2v_prompt", ctx.current_prompt)],
            )?;
            let request = CompletionRequest::new(RoleTag::QuestionGen, text);
            question_call(vlm, &request, category, None)
        }
        QuestionCategory::VisualQuality => {
            let text = render_template(
                TemplateId::VisualQualityQg,
                &[("t2v_prompt", ctx.current_prompt)],
            )?;
            let request = CompletionRequest::new(RoleTag::QuestionGen, text)
                .with_attachment(MediaHandle::Video(ctx.current_video.locator.clone()));
            question_call(vlm, &request, category, None)
        }
        QuestionCategory::ConditionFidelity => {
            if ctx.conditions.reference_images.is_empty() {
                return Err(AgentError::EmptyInput("reference_images"));
            }
            let mut questions = Vec::new();
            for (index, image) in ctx.conditions.reference_images.iter().enumerate() {
                let text = render_template(
                    TemplateId::ConditionFidelityQg,
                    &[
                        ("t2v_prompt", ctx.current_prompt),
                        ("reference_image", image.as_str()),
                    ],
                )?;
                let request = CompletionRequest::new(RoleTag::QuestionGen, text)
                    .with_attachment(MediaHandle::Image(image.clone()));
                questions.extend(question_call(vlm, &request, category, Some(index))?);
            }
            Ok(questions)
        }
    }
}

fn question_call(
    vlm: &dyn VlmClient,
    request: &CompletionRequest,
    category: QuestionCategory,
    source_image_index: Option<usize>,
) -> Result<Vec<Question>, AgentError> {
    complete_validated(vlm, request, |raw| {
        let texts = match parse_agent_json(RoleTag::QuestionGen, raw)? {
            AgentPayload::Questions(texts) => texts,
            _ => unreachable!(),
        };
        let (min, max) = question_count_bounds(category);
        if !(min..=max).contains(&texts.len()) {
            return Err(AgentError::CountViolation {
                category,
                actual: texts.len(),
                min,
                max,
            });
        }
        let mut questions = Vec::with_capacity(texts.len());
        for text in texts {
            let question = Question {
                text,
                category,
                source_image_index,
            };
            if !validate_question(&question).is_empty() {
                return Err(AgentError::PrefixViolation(question.text));
            }
            questions.push(question);
        }
        Ok(questions)
    })
}

/// Scores every question against the video in one call. Answers are matched
/// to questions by position; a drifting echo of the question text is only
/// logged because deterministic templates fix the order.
pub fn answer_questions(
    vlm: &dyn VlmClient,
    video: &VideoArtifact,
    questions: &[Question],
    ctx: &AgentContext<'_>,
) -> Result<Vec<QAPair>, AgentError> {
    if questions.is_empty() {
        return Err(AgentError::EmptyInput("questions"));
    }
    let template = match ctx.conditions.task_kind {
        TaskKind::TextToVideo => TemplateId::QaT2v,
        TaskKind::ImageToVideo => TemplateId::QaI2v,
    };
    let listing = format_questions(questions);
    let text = render_template(template, &[("questions", listing.as_str())])?;
    let mut request = CompletionRequest::new(RoleTag::Qa, text)
        .with_attachment(MediaHandle::Video(video.locator.clone()));
    if ctx.conditions.task_kind == TaskKind::ImageToVideo {
        request = request.with_attachments(
            ctx.conditions
                .reference_images
                .iter()
                .map(|image| MediaHandle::Image(image.clone())),
        );
    }
    complete_validated(vlm, &request, |raw| {
        let answers = match parse_agent_json(RoleTag::Qa, raw)? {
            AgentPayload::Answers(answers) => answers,
            _ => unreachable!(),
        };
        if answers.len() != questions.len() {
            return Err(AgentError::CountMismatch {
                questions: questions.len(),
                answers: answers.len(),
            });
        }
        let pairs = questions
            .iter()
            .zip(answers)
            .map(|(question, answer)| {
                if answer.question.trim() != question.text.trim() {
                    log::warn!(
                        "echoed question text differs from sent text: {:?} vs {:?}",
                        answer.question,
                        question.text
                    );
                }
                QAPair {
                    question: question.clone(),
                    score: answer.score,
                }
            })
            .collect();
        Ok(pairs)
    })
}

/// Synthesizes the scored feedback into the next prompt. All QA pairs go
/// into the template; the template's own analysis isolates the low scorers.
pub fn refine_prompt(
    vlm: &dyn VlmClient,
    ctx: &AgentContext<'_>,
    qa_pairs: &[QAPair],
) -> Result<RefinementAnalysis, AgentError> {
    if qa_pairs.is_empty() {
        return Err(AgentError::EmptyInput("qa_pairs"));
    }
    let history = render_history(ctx.history, ctx.gs_in_the_loop);
    let qa_block = format_qa_pairs(qa_pairs, ctx.highlight_below);
    let mut slots = vec![
        ("history", history.as_str()),
        ("original_prompt", ctx.conditions.original_prompt.as_str()),
        ("cur_iter_prompt", ctx.current_prompt),
        ("cur_video", ctx.current_video.locator.as_str()),
        ("qa_pairs", qa_block.as_str()),
    ];
    let images_block = ctx.conditions.reference_images.join("\n");
    let template = match ctx.conditions.task_kind {
        TaskKind::TextToVideo => TemplateId::PrT2v,
        TaskKind::ImageToVideo => {
            slots.push(("reference_images", images_block.as_str()));
            TemplateId::PrI2v
        }
    };
    let text = render_template(template, &slots)?;
    let mut request = CompletionRequest::new(RoleTag::Refine, text)
        .with_attachment(MediaHandle::Video(ctx.current_video.locator.clone()));
    if ctx.conditions.task_kind == TaskKind::ImageToVideo {
        request = request.with_attachments(
            ctx.conditions
                .reference_images
                .iter()
                .map(|image| MediaHandle::Image(image.clone())),
        );
    }
    complete_validated(vlm, &request, |raw| {
        match parse_agent_json(RoleTag::Refine, raw)? {
            AgentPayload::Refinement(analysis) => Ok(analysis),
            _ => unreachable!(),
        }
    })
}
