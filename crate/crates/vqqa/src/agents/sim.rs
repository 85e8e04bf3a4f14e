//! Rule-based simulated agent suite.
//!
//! [`SimVlm`] answers every agent role deterministically from the rendered
//! request text and the scene encoded in the video attachment, producing the
//! same JSON shapes a hosted model would. The rules:
//!
//! - question generation asks one question per aspect of the rendered
//!   prompt (cycling aspects when the template demands more questions);
//! - question answering scores each question by the referenced aspect's
//!   fulfillment;
//! - refinement appends one `((aspect))` emphasis marker for the
//!   lowest-scoring aspect, which provably never lowers expected fulfillment;
//! - rating returns digits only;
//! - judges decide relevance and coverage by aspect-token overlap.

use serde_json::json;

use crate::backend::sim::{aspects_of, question_aspect, scene_from_locator, sim_answer, SimScene};
use crate::backend::{BackendError, CompletionRequest, MediaHandle, RoleTag, VlmClient};
use crate::model::{Question, QuestionCategory};

/// Deterministic stand-in for a hosted multimodal model.
#[derive(Debug, Default, Clone)]
pub struct SimVlm;

impl VlmClient for SimVlm {
    fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        request.validate()?;
        match request.role_tag {
            RoleTag::QuestionGen => respond_questions(request),
            RoleTag::Qa => respond_answers(request),
            RoleTag::Refine => respond_refinement(request),
            RoleTag::GlobalRate => respond_rating(request),
            RoleTag::Judge => respond_judge(request),
        }
    }
}

fn malformed(what: &str) -> BackendError {
    BackendError::MalformedRequest(what.to_string())
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = rest.find(end)?;
    Some(&rest[..to])
}

fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let from = text.rfind(marker)? + marker.len();
    Some(&text[from..])
}

fn video_scene(request: &CompletionRequest) -> Result<SimScene, BackendError> {
    let locator = request
        .attachments
        .iter()
        .find_map(|a| match a {
            MediaHandle::Video(locator) => Some(locator.as_str()),
            MediaHandle::Image(_) => None,
        })
        .ok_or_else(|| malformed("no video attachment"))?;
    scene_from_locator(locator)
}

/// Phrases one simulated question; the aspect rides between backticks so
/// the answering side can recover it.
pub fn sim_question_text(category: QuestionCategory, aspect: &str) -> String {
    match category {
        QuestionCategory::Alignment => {
            format!("On a scale of 0-100, how clearly is `{aspect}` shown?")
        }
        QuestionCategory::VisualQuality => {
            format!("On a scale of 0-100, how stable and artifact-free is `{aspect}`?")
        }
        QuestionCategory::ConditionFidelity => {
            format!("On a scale of 0-100, how faithfully is `{aspect}` preserved from the reference image?")
        }
    }
}

/// One question per prompt aspect, cycling aspects until the template's
/// minimum count is met and truncating at its maximum.
pub fn sim_questions(category: QuestionCategory, prompt: &str) -> Vec<String> {
    let aspects = aspects_of(prompt);
    if aspects.is_empty() {
        return Vec::new();
    }
    let (min, max) = crate::agents::question_count_bounds(category);
    let count = aspects.len().clamp(min, max);
    (0..count)
        .map(|i| sim_question_text(category, &aspects[i % aspects.len()]))
        .collect()
}

fn respond_questions(request: &CompletionRequest) -> Result<String, BackendError> {
    let text = &request.prompt_text;
    let (category, prompt) = if text.contains("Prompt Fidelity Evaluator") {
        let prompt = after(text, "for the following prompt: ")
            .ok_or_else(|| malformed("alignment prompt marker"))?;
        (QuestionCategory::Alignment, prompt)
    } else if text.contains("Video Defect Analyst") {
        let prompt = after(text, "\nPrompt: ").ok_or_else(|| malformed("vq prompt marker"))?;
        (QuestionCategory::VisualQuality, prompt)
    } else if text.contains("Reference Image Consistency & Quality Evaluator") {
        let prompt = between(text, "Text Prompt: ", "\nReference Image:")
            .ok_or_else(|| malformed("cf prompt marker"))?;
        (QuestionCategory::ConditionFidelity, prompt)
    } else {
        return Err(malformed("unrecognized question-generation template"));
    };
    let questions = sim_questions(category, prompt.trim());
    Ok(json!({ "questions": questions }).to_string())
}

fn listed_questions(block: &str) -> Vec<String> {
    block
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let dot = line.find(". ")?;
            line[..dot].parse::<usize>().ok()?;
            Some(line[dot + 2..].to_string())
        })
        .collect()
}

fn respond_answers(request: &CompletionRequest) -> Result<String, BackendError> {
    let block = after(&request.prompt_text, "Here are the quality assessment questions:\n")
        .ok_or_else(|| malformed("questions block"))?;
    let questions = listed_questions(block);
    if questions.is_empty() {
        return Err(malformed("no numbered questions"));
    }
    let scene = video_scene(request)?;
    let mut answers = Vec::with_capacity(questions.len());
    for text in questions {
        let probe = Question::alignment(text.clone());
        let score = sim_answer(&scene, &probe)?;
        answers.push(json!({ "question": text, "score": score }));
    }
    Ok(json!({ "answers": answers }).to_string())
}

fn parse_qa_lines(block: &str) -> Vec<(String, u8)> {
    block
        .lines()
        .filter_map(|line| {
            let line = line.trim().strip_prefix("Q: ")?;
            let at = line.rfind(" A: ")?;
            // The score may carry a trailing annotation like "(low)".
            let digits: String = line[at + 4..]
                .trim()
                .chars()
                .take_while(char::is_ascii_digit)
                .collect();
            let score: u8 = digits.parse().ok()?;
            Some((line[..at].to_string(), score))
        })
        .collect()
}

fn respond_refinement(request: &CompletionRequest) -> Result<String, BackendError> {
    let text = &request.prompt_text;
    let i2v = text.contains("[CURRENT ITERATION PROMPT]");
    let current_prompt = if i2v {
        between(text, "[CURRENT ITERATION PROMPT]\n", "\n[END CURRENT ITERATION PROMPT]")
    } else {
        between(text, "[CURRENT REFINED PROMPT]\n", "\n[END CURRENT REFINED PROMPT]")
    }
    .ok_or_else(|| malformed("current prompt block"))?
    .trim();
    let qa_block = between(text, "[QA PAIRS]\n", "[END QA PAIRS]")
        .ok_or_else(|| malformed("qa pairs block"))?;
    let pairs = parse_qa_lines(qa_block);
    let (weakest_question, weakest_score) = pairs
        .iter()
        .min_by_key(|(_, score)| *score)
        .cloned()
        .ok_or_else(|| malformed("no qa pairs"))?;
    let aspect = question_aspect(&weakest_question)
        .ok_or_else(|| BackendError::UnknownAspect(weakest_question.clone()))?
        .to_string();
    let refined_prompt = format!("{current_prompt}, (({aspect}))");

    let summary = format!(
        "Rule-based pass over {} scored questions; weakest aspect is `{aspect}` at {weakest_score}.",
        pairs.len()
    );
    let strategy = format!("Add one emphasis marker for the weakest aspect `{aspect}`.");
    let flaw = format!("`{aspect}` scores lowest in this round.");
    let payload = if i2v {
        json!({
            "analysis": {
                "historical_summary": summary,
                "vqa_failure_analysis": [{
                    "vqa_question": weakest_question,
                    "score": weakest_score,
                    "category": "Prompt Adherence",
                    "identified_flaw": flaw,
                    "refinement_action": format!("Emphasize `{aspect}` in the prompt."),
                }],
            },
            "refinement_strategy": strategy,
            "refined_prompt": refined_prompt,
        })
    } else {
        json!({
            "analysis": {
                "historical_summary": summary,
                "vqa_flaw_identification": [{
                    "vqa_pair": format!("Q: {weakest_question} A: {weakest_score}"),
                    "identified_flaw": flaw,
                    "prompt_correlation": format!("The prompt does not stress `{aspect}` enough."),
                }],
            },
            "refinement_strategy": strategy,
            "refined_prompt": refined_prompt,
        })
    };
    Ok(payload.to_string())
}

fn rated_prompt(text: &str) -> Result<&str, BackendError> {
    let rest = after(text, "match '").ok_or_else(|| malformed("rater prompt marker"))?;
    let end = rest
        .find("' and the provided reference images?")
        .or_else(|| rest.rfind("'?"))
        .ok_or_else(|| malformed("rater prompt terminator"))?;
    Ok(&rest[..end])
}

fn respond_rating(request: &CompletionRequest) -> Result<String, BackendError> {
    let original_prompt = rated_prompt(&request.prompt_text)?;
    let scene = video_scene(request)?;
    let aspects = aspects_of(original_prompt);
    if aspects.is_empty() {
        return Err(malformed("rated prompt has no aspects"));
    }
    let sum: f64 = aspects
        .iter()
        .map(|a| scene.aspects.get(a).copied().unwrap_or(0.0))
        .sum();
    let score = crate::backend::sim::score_from_fulfillment(sum / aspects.len() as f64);
    Ok(score.to_string())
}

fn aspect_overlap(needle: &str, haystack: &str) -> bool {
    let hay = aspects_of(haystack);
    match question_aspect(needle) {
        Some(aspect) => hay.contains(&aspect.to_lowercase()),
        None => aspects_of(needle).iter().any(|a| hay.contains(a)),
    }
}

fn respond_judge(request: &CompletionRequest) -> Result<String, BackendError> {
    let text = &request.prompt_text;
    if text.contains("You are a video quality auditor") {
        let analysis = after(text, "Expert analysis:\n").unwrap_or("");
        let problems: Vec<String> = analysis
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.trim_start_matches("- ").to_string())
            .collect();
        return Ok(json!({ "problems": problems }).to_string());
    }
    if text.contains("An AI model generated the following question") {
        let prompt = between(text, "based on this text prompt: \"", "\"")
            .ok_or_else(|| malformed("precision prompt"))?;
        let question = between(text, "to assess the video's quality:\n\"", "\"")
            .ok_or_else(|| malformed("precision question"))?;
        return Ok(json!({ "is_relevant": aspect_overlap(question, prompt) }).to_string());
    }
    if text.contains("A human evaluator found the following problem") {
        let problem = between(text, "problem in a generated video:\n\"", "\"")
            .ok_or_else(|| malformed("recall problem"))?;
        let block = after(text, "questions for that same video:\n")
            .ok_or_else(|| malformed("recall questions block"))?;
        let indices: Vec<usize> = listed_questions(block)
            .iter()
            .enumerate()
            .filter(|(_, q)| match question_aspect(q) {
                Some(aspect) => problem.to_lowercase().contains(&aspect.to_lowercase()),
                None => false,
            })
            .map(|(i, _)| i)
            .collect();
        return Ok(json!({ "indices": indices }).to_string());
    }
    if text.contains("An AI model detected the following problem") {
        let prompt = between(text, "based on this text prompt: \"", "\"")
            .ok_or_else(|| malformed("e2e prompt"))?;
        let problem = between(text, "detected the following problem in the generated video:\n\"", "\"")
            .ok_or_else(|| malformed("e2e problem"))?;
        return Ok(json!({ "is_relevant": aspect_overlap(problem, prompt) }).to_string());
    }
    Err(malformed("unrecognized judge template"))
}
