//! Extraction and schema validation of agent JSON responses.
//!
//! Agents are told to answer with a single JSON object, but real responses
//! arrive wrapped in markdown fences or trailed by prose. The parser takes
//! the first well-formed JSON object in the text, validates it against the
//! role's schema, and ignores everything after it. It never panics on
//! arbitrary input.

use serde_json::Value;

use crate::agents::AgentError;
use crate::backend::RoleTag;
use crate::model::{FlawItem, RefinementAnalysis};

/// A validated agent response.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentPayload {
    /// Question generation: the raw question strings.
    Questions(Vec<String>),
    /// Question answering: echoed text plus score, in response order.
    Answers(Vec<RawAnswer>),
    /// Prompt refinement, already mapped into the domain type.
    Refinement(RefinementAnalysis),
    /// Global rating: a bare integer.
    Rating(u8),
    /// Judge responses keep their shape; callers validate the key they need.
    Judge(Value),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAnswer {
    pub question: String,
    pub score: u8,
}

/// Parses and validates one agent response for the given role.
pub fn parse_agent_json(role: RoleTag, raw: &str) -> Result<AgentPayload, AgentError> {
    if role == RoleTag::GlobalRate {
        let score = crate::model::parse_bare_score(raw).ok_or_else(|| {
            AgentError::MalformedResponse(format!("rating is not a bare integer 0-100: {raw:?}"))
        })?;
        return Ok(AgentPayload::Rating(score));
    }
    let value = extract_first_json_object(raw).ok_or(AgentError::NoJsonFound)?;
    match role {
        RoleTag::QuestionGen => Ok(AgentPayload::Questions(validate_questions(&value)?)),
        RoleTag::Qa => Ok(AgentPayload::Answers(validate_answers(&value)?)),
        RoleTag::Refine => Ok(AgentPayload::Refinement(validate_refinement(&value)?)),
        RoleTag::Judge => Ok(AgentPayload::Judge(value)),
        RoleTag::GlobalRate => unreachable!("handled above"),
    }
}

/// Finds the first well-formed JSON object anywhere in the text. Markdown
/// fences and trailing prose fall out naturally: parsing starts at each `{`
/// and stops at the first success.
pub fn extract_first_json_object(raw: &str) -> Option<Value> {
    for (offset, _) in raw.char_indices().filter(|(_, c)| *c == '{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[offset..]).into_iter::<Value>();
        if let Some(Ok(value @ Value::Object(_))) = stream.next() {
            return Some(value);
        }
    }
    None
}

fn validate_questions(value: &Value) -> Result<Vec<String>, AgentError> {
    let list = value
        .get("questions")
        .ok_or_else(|| AgentError::MalformedResponse("missing \"questions\" key".into()))?
        .as_array()
        .ok_or_else(|| AgentError::MalformedResponse("\"questions\" is not a list".into()))?;
    let mut questions = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let text = item.as_str().ok_or_else(|| AgentError::SchemaViolation {
            path: format!("questions[{i}]"),
            message: "expected a string".into(),
        })?;
        questions.push(text.to_string());
    }
    Ok(questions)
}

fn validate_answers(value: &Value) -> Result<Vec<RawAnswer>, AgentError> {
    let list = value
        .get("answers")
        .ok_or_else(|| AgentError::MalformedResponse("missing \"answers\" key".into()))?
        .as_array()
        .ok_or_else(|| AgentError::MalformedResponse("\"answers\" is not a list".into()))?;
    let mut answers = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let question = item
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| AgentError::SchemaViolation {
                path: format!("answers[{i}].question"),
                message: "expected a string".into(),
            })?;
        let score = item
            .get("score")
            .and_then(Value::as_i64)
            .ok_or_else(|| AgentError::SchemaViolation {
                path: format!("answers[{i}].score"),
                message: "expected an integer".into(),
            })?;
        if !(0..=100).contains(&score) {
            return Err(AgentError::SchemaViolation {
                path: format!("answers[{i}].score"),
                message: format!("score {score} outside [0, 100]"),
            });
        }
        answers.push(RawAnswer {
            question: question.to_string(),
            score: score as u8,
        });
    }
    Ok(answers)
}

fn required_str<'a>(value: &'a Value, path: &str, key: &str) -> Result<&'a str, AgentError> {
    value
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| AgentError::SchemaViolation {
            path: format!("{path}.{key}"),
            message: "expected a string".into(),
        })
}

/// Accepts both refinement shapes: the text-to-video one nests
/// `vqa_flaw_identification` items under `analysis`, the image-to-video one
/// nests `vqa_failure_analysis` items carrying scores and categories.
fn validate_refinement(value: &Value) -> Result<RefinementAnalysis, AgentError> {
    let refined_prompt = value
        .get("refined_prompt")
        .and_then(Value::as_str)
        .ok_or_else(|| AgentError::MalformedResponse("missing \"refined_prompt\"".into()))?;
    if refined_prompt.trim().is_empty() {
        return Err(AgentError::MalformedResponse("\"refined_prompt\" is empty".into()));
    }
    let refinement_strategy = required_str(value, "$", "refinement_strategy")?;
    let analysis = value
        .get("analysis")
        .and_then(Value::as_object)
        .ok_or_else(|| AgentError::MalformedResponse("missing \"analysis\" block".into()))?;
    let historical_summary = analysis
        .get("historical_summary")
        .and_then(Value::as_str)
        .ok_or_else(|| AgentError::SchemaViolation {
            path: "analysis.historical_summary".into(),
            message: "expected a string".into(),
        })?;

    let mut flaw_items = Vec::new();
    if let Some(items) = analysis.get("vqa_flaw_identification") {
        let items = items.as_array().ok_or_else(|| AgentError::SchemaViolation {
            path: "analysis.vqa_flaw_identification".into(),
            message: "expected a list".into(),
        })?;
        for (i, item) in items.iter().enumerate() {
            let path = format!("analysis.vqa_flaw_identification[{i}]");
            flaw_items.push(FlawItem {
                vqa_pair_or_question: required_str(item, &path, "vqa_pair")?.to_string(),
                score: None,
                category: None,
                identified_flaw: required_str(item, &path, "identified_flaw")?.to_string(),
                action_or_correlation: required_str(item, &path, "prompt_correlation")?.to_string(),
            });
        }
    } else if let Some(items) = analysis.get("vqa_failure_analysis") {
        let items = items.as_array().ok_or_else(|| AgentError::SchemaViolation {
            path: "analysis.vqa_failure_analysis".into(),
            message: "expected a list".into(),
        })?;
        for (i, item) in items.iter().enumerate() {
            let path = format!("analysis.vqa_failure_analysis[{i}]");
            let score = item
                .get("score")
                .and_then(Value::as_i64)
                .ok_or_else(|| AgentError::SchemaViolation {
                    path: format!("{path}.score"),
                    message: "expected an integer".into(),
                })?;
            if !(0..=100).contains(&score) {
                return Err(AgentError::SchemaViolation {
                    path: format!("{path}.score"),
                    message: format!("score {score} outside [0, 100]"),
                });
            }
            flaw_items.push(FlawItem {
                vqa_pair_or_question: required_str(item, &path, "vqa_question")?.to_string(),
                score: Some(score as u8),
                category: Some(required_str(item, &path, "category")?.to_string()),
                identified_flaw: required_str(item, &path, "identified_flaw")?.to_string(),
                action_or_correlation: required_str(item, &path, "refinement_action")?.to_string(),
            });
        }
    } else {
        return Err(AgentError::MalformedResponse(
            "analysis block has neither \"vqa_flaw_identification\" nor \"vqa_failure_analysis\""
                .into(),
        ));
    }

    if flaw_items.is_empty() && refinement_strategy.trim().is_empty() {
        return Err(AgentError::MalformedResponse(
            "no flaw items and no refinement strategy".into(),
        ));
    }

    Ok(RefinementAnalysis {
        historical_summary: historical_summary.to_string(),
        flaw_items,
        refinement_strategy: refinement_strategy.to_string(),
        refined_prompt: refined_prompt.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fenced_and_bare_parse_identically() {
        let bare = r#"{"questions": ["On a scale of 0-100, how red is the car?"]}"#;
        let fenced = format!("```json\n{bare}\n```\nsome trailing prose");
        let a = parse_agent_json(RoleTag::QuestionGen, bare).unwrap();
        let b = parse_agent_json(RoleTag::QuestionGen, &fenced).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_key_is_malformed() {
        let raw = r#"{"question": ["On a scale of 0-100, how red is the car?"]}"#;
        assert!(matches!(
            parse_agent_json(RoleTag::QuestionGen, raw),
            Err(AgentError::MalformedResponse(_))
        ));
    }

    #[test]
    fn out_of_range_score_names_the_path() {
        let raw = r#"{"answers": [{"question": "q", "score": 150}]}"#;
        match parse_agent_json(RoleTag::Qa, raw) {
            Err(AgentError::SchemaViolation { path, .. }) => {
                assert_eq!(path, "answers[0].score");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rating_accepts_digits_only() {
        assert_eq!(
            parse_agent_json(RoleTag::GlobalRate, " 87 ").unwrap(),
            AgentPayload::Rating(87)
        );
        assert!(parse_agent_json(RoleTag::GlobalRate, "Score: 87").is_err());
    }

    #[test]
    fn refinement_requires_prompt_and_analysis() {
        let missing_prompt = r#"{"analysis": {"historical_summary": "s",
            "vqa_flaw_identification": []}, "refinement_strategy": "t"}"#;
        assert!(matches!(
            parse_agent_json(RoleTag::Refine, missing_prompt),
            Err(AgentError::MalformedResponse(_))
        ));

        let missing_analysis = r#"{"refinement_strategy": "t", "refined_prompt": "p"}"#;
        assert!(matches!(
            parse_agent_json(RoleTag::Refine, missing_analysis),
            Err(AgentError::MalformedResponse(_))
        ));
    }

    proptest! {
        #[test]
        fn parser_is_total(raw in ".{0,300}") {
            // Never panics; non-JSON inputs map to NoJsonFound.
            for role in [RoleTag::QuestionGen, RoleTag::Qa, RoleTag::Refine, RoleTag::Judge] {
                let _ = parse_agent_json(role, &raw);
            }
        }

        #[test]
        fn non_json_is_no_json_found(raw in "[a-zA-Z0-9 .,!?]{0,120}") {
            prop_assert!(matches!(
                parse_agent_json(RoleTag::Judge, &raw),
                Err(AgentError::NoJsonFound)
            ));
        }
    }
}
