//! Cost-model arithmetic and auditing, plus the question-quality metric
//! pipeline (precision, Q-recall, E2E-recall) over judge outputs.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::parse::{parse_agent_json, AgentPayload};
use crate::agents::template::{render_template, TemplateId};
use crate::agents::AgentError;
use crate::backend::{CompletionRequest, MediaHandle, RoleTag, VlmClient};
use crate::model::{CostLedger, Question, RunMode, StopReason, Trajectory, VideoArtifact};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("out of range: {0}")]
    RangeViolation(String),
    #[error("malformed judge response: {0}")]
    MalformedResponse(String),
    #[error("judge returned question index {index} for {len} questions")]
    IndexOutOfRange { index: i64, len: usize },
    #[error("invalid coverage inputs: {0}")]
    InvalidInputs(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Closed-form expected completion calls for `rounds` optimization rounds
/// and `k_img` reference images: `(5 + k) * T + 1`. `rounds` may be
/// fractional when plugging in an observed average.
pub fn expected_vlm_calls(rounds: f64, k_img: u32) -> Result<f64, AnalysisError> {
    if rounds.is_nan() || rounds < 0.0 {
        return Err(AnalysisError::RangeViolation(format!(
            "rounds {rounds} must be >= 0"
        )));
    }
    Ok((5.0 + k_img as f64) * rounds + 1.0)
}

/// Ledger audit for one completed trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub mode: RunMode,
    pub stop_reason: Option<StopReason>,
    /// Executed refinement rounds `T` (optimization) or candidate count
    /// (best-of-N).
    pub rounds: u64,
    pub k_img: usize,
    pub expected: CostLedger,
    pub actual: CostLedger,
    pub expected_total: u64,
    pub actual_total: u64,
    pub within_bound: bool,
    pub deviations: Vec<String>,
    pub notes: Vec<String>,
}

/// Recomputes the expected per-role call counts from the trajectory shape
/// and flags any ledger deviation. Report-only: nothing here fails.
pub fn audit_ledger(trajectory: &Trajectory) -> AuditReport {
    let k_img = trajectory.conditions.k_img();
    let actual = trajectory.ledger;
    let mut notes = Vec::new();

    let (rounds, expected) = match trajectory.mode {
        RunMode::Optimize => {
            let candidates = trajectory.records.len() as u64;
            let rounds = candidates.saturating_sub(1);
            let expected = CostLedger {
                question_gen_calls: (2 + k_img as u64) * rounds,
                qa_calls: rounds,
                refine_calls: rounds,
                global_rate_calls: candidates,
            };
            if trajectory
                .records
                .last()
                .is_some_and(|r| r.refinement.is_none())
            {
                notes.push(format!(
                    "final record {} stopped at its rating; no question/answer/refine calls were \
                     issued for it (its refined prompt would never be used)",
                    rounds
                ));
            }
            let rejected = trajectory
                .records
                .iter()
                .filter(|r| r.video.locator.starts_with("rejected://"))
                .count();
            if rejected > 0 {
                notes.push(format!(
                    "{rejected} candidate(s) were safety-rejected and carry zero scores without \
                     rating calls"
                ));
            }
            (rounds, expected)
        }
        RunMode::BestOfN => {
            let candidates = trajectory.records.len() as u64;
            let expected = CostLedger {
                question_gen_calls: 0,
                qa_calls: 0,
                refine_calls: 0,
                global_rate_calls: candidates,
            };
            (candidates, expected)
        }
    };

    let mut deviations = Vec::new();
    let pairs = [
        ("question_gen", expected.question_gen_calls, actual.question_gen_calls),
        ("qa", expected.qa_calls, actual.qa_calls),
        ("refine", expected.refine_calls, actual.refine_calls),
        ("global_rate", expected.global_rate_calls, actual.global_rate_calls),
    ];
    for (role, want, got) in pairs {
        if want != got {
            deviations.push(format!("{role}: expected {want}, ledger has {got}"));
        }
    }

    let expected_total = expected.total();
    let actual_total = actual.total();
    AuditReport {
        mode: trajectory.mode,
        stop_reason: trajectory.stop_reason,
        rounds,
        k_img,
        expected,
        actual,
        expected_total,
        actual_total,
        within_bound: actual_total <= expected_total,
        deviations,
        notes,
    }
}

fn judge_call(vlm: &dyn VlmClient, request: &CompletionRequest) -> Result<Value, AnalysisError> {
    let raw = vlm.vlm_complete(request).map_err(AgentError::Backend)?;
    match parse_agent_json(RoleTag::Judge, &raw)? {
        AgentPayload::Judge(value) => Ok(value),
        _ => unreachable!(),
    }
}

fn string_list(value: &Value, key: &str) -> Result<Vec<String>, AnalysisError> {
    let list = value
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| AnalysisError::MalformedResponse(format!("missing {key:?} list")))?;
    list.iter()
        .map(|item| {
            item.as_str()
                .map(str::to_string)
                .ok_or_else(|| AnalysisError::MalformedResponse(format!("non-string in {key:?}")))
        })
        .collect()
}

/// Extracts the ground-truth problem list from an expert critique,
/// deduplicating exact repeats while keeping first-occurrence order.
pub fn extract_gt_problems(
    vlm: &dyn VlmClient,
    analysis_text: &str,
) -> Result<Vec<String>, AnalysisError> {
    let text = render_template(
        TemplateId::JudgeGtExtraction,
        &[("analysis_text", analysis_text)],
    )?;
    let value = judge_call(vlm, &CompletionRequest::new(RoleTag::Judge, text))?;
    let mut problems = Vec::new();
    for problem in string_list(&value, "problems")? {
        if !problems.contains(&problem) {
            problems.push(problem);
        }
    }
    Ok(problems)
}

/// Alternative extraction path: ask the model to list flaws directly from
/// the video, without an expert critique.
pub fn direct_analysis_problems(
    vlm: &dyn VlmClient,
    video: &VideoArtifact,
    prompt: &str,
) -> Result<Vec<String>, AnalysisError> {
    let text = render_template(TemplateId::JudgeDirectAnalysis, &[("prompt", prompt)])?;
    let request = CompletionRequest::new(RoleTag::Judge, text)
        .with_attachment(MediaHandle::Video(video.locator.clone()));
    let value = judge_call(vlm, &request)?;
    string_list(&value, "problems")
}

fn required_bool(value: &Value, key: &str) -> Result<bool, AnalysisError> {
    value
        .get(key)
        .and_then(Value::as_bool)
        .ok_or_else(|| AnalysisError::MalformedResponse(format!("missing {key:?} boolean")))
}

/// Binary relevance judgment for one generated question.
pub fn judge_relevance(
    vlm: &dyn VlmClient,
    question: &Question,
    video_prompt: &str,
) -> Result<bool, AnalysisError> {
    let text = render_template(
        TemplateId::JudgePrecision,
        &[("video_prompt", video_prompt), ("question", question.text.as_str())],
    )?;
    let value = judge_call(vlm, &CompletionRequest::new(RoleTag::Judge, text))?;
    required_bool(&value, "is_relevant")
}

/// Binary relevance judgment for one directly detected problem.
pub fn judge_detected_problem(
    vlm: &dyn VlmClient,
    video_prompt: &str,
    detected_problem: &str,
) -> Result<bool, AnalysisError> {
    let text = render_template(
        TemplateId::JudgeE2eDirect,
        &[
            ("video_prompt", video_prompt),
            ("detected_problem", detected_problem),
        ],
    )?;
    let value = judge_call(vlm, &CompletionRequest::new(RoleTag::Judge, text))?;
    required_bool(&value, "is_relevant")
}

/// Asks the judge which questions would uncover the given problem.
/// Indices refer to the enumerated question list (0-based).
pub fn map_problem_to_questions(
    vlm: &dyn VlmClient,
    problem: &str,
    questions: &[Question],
) -> Result<Vec<usize>, AnalysisError> {
    if questions.is_empty() {
        return Err(AnalysisError::InvalidInputs("no questions to map against".into()));
    }
    let formatted = questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{i}. {}", q.text))
        .collect::<Vec<_>>()
        .join("\n");
    let text = render_template(
        TemplateId::JudgeQRecall,
        &[("problem", problem), ("formatted_questions", formatted.as_str())],
    )?;
    let value = judge_call(vlm, &CompletionRequest::new(RoleTag::Judge, text))?;
    let list = value
        .get("indices")
        .and_then(Value::as_array)
        .ok_or_else(|| AnalysisError::MalformedResponse("missing \"indices\" list".into()))?;
    let mut indices = Vec::with_capacity(list.len());
    for item in list {
        let index = item
            .as_i64()
            .ok_or_else(|| AnalysisError::MalformedResponse("non-integer index".into()))?;
        if index < 0 || index as usize >= questions.len() {
            return Err(AnalysisError::IndexOutOfRange {
                index,
                len: questions.len(),
            });
        }
        indices.push(index as usize);
    }
    Ok(indices)
}

/// Everything the coverage metrics need, already judged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageInputs {
    pub gt_problems: Vec<String>,
    pub questions: Vec<Question>,
    /// One relevance flag per question.
    pub relevance_flags: Vec<bool>,
    /// For each problem, the indices of questions that would uncover it.
    pub problem_to_question_indices: Vec<Vec<usize>>,
    /// One QA score per question, aligned by index.
    pub qa_scores: Vec<u8>,
    /// A problem counts as detected only when a covering question scored
    /// strictly below this.
    pub threshold: u8,
}

pub const DEFAULT_DETECTION_THRESHOLD: u8 = 60;

impl CoverageInputs {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.relevance_flags.len() != self.questions.len() {
            return Err(AnalysisError::InvalidInputs(format!(
                "{} relevance flags for {} questions",
                self.relevance_flags.len(),
                self.questions.len()
            )));
        }
        if self.qa_scores.len() != self.questions.len() {
            return Err(AnalysisError::InvalidInputs(format!(
                "{} qa scores for {} questions",
                self.qa_scores.len(),
                self.questions.len()
            )));
        }
        if self.problem_to_question_indices.len() != self.gt_problems.len() {
            return Err(AnalysisError::InvalidInputs(format!(
                "{} mappings for {} problems",
                self.problem_to_question_indices.len(),
                self.gt_problems.len()
            )));
        }
        if self.threshold > 100 {
            return Err(AnalysisError::InvalidInputs(format!(
                "threshold {} outside [0, 100]",
                self.threshold
            )));
        }
        for (p, indices) in self.problem_to_question_indices.iter().enumerate() {
            if let Some(&bad) = indices.iter().find(|&&i| i >= self.questions.len()) {
                return Err(AnalysisError::InvalidInputs(format!(
                    "problem {p} maps to question {bad} of {}",
                    self.questions.len()
                )));
            }
        }
        Ok(())
    }
}

/// Raw counts and the three headline fractions. A `None` metric marks a
/// degenerate denominator (no questions or no problems); the report states
/// which.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub total_questions: usize,
    pub relevant_questions: usize,
    pub total_problems: usize,
    pub covered_problems: usize,
    pub detected_problems: usize,
    pub threshold: u8,
    pub precision: Option<f64>,
    pub q_recall: Option<f64>,
    pub e2e_recall: Option<f64>,
    pub precision_pct: Option<f64>,
    pub q_recall_pct: Option<f64>,
    pub e2e_recall_pct: Option<f64>,
    pub degenerate: Vec<String>,
}

/// Computes precision, Q-recall, and E2E-recall. A score exactly equal to
/// the threshold does not count as detecting a flaw.
pub fn coverage_metrics(inputs: &CoverageInputs) -> Result<CoverageReport, AnalysisError> {
    inputs.validate()?;
    let total_questions = inputs.questions.len();
    let relevant_questions = inputs.relevance_flags.iter().filter(|&&f| f).count();
    let total_problems = inputs.gt_problems.len();

    let covered_problems = inputs
        .problem_to_question_indices
        .iter()
        .filter(|indices| !indices.is_empty())
        .count();
    let detected_problems = inputs
        .problem_to_question_indices
        .iter()
        .filter(|indices| {
            indices
                .iter()
                .any(|&i| inputs.qa_scores[i] < inputs.threshold)
        })
        .count();

    let mut degenerate = Vec::new();
    let precision = if total_questions == 0 {
        degenerate.push("precision: zero questions".to_string());
        None
    } else {
        Some(relevant_questions as f64 / total_questions as f64)
    };
    let (q_recall, e2e_recall) = if total_problems == 0 {
        degenerate.push("recall: zero problems".to_string());
        (None, None)
    } else {
        (
            Some(covered_problems as f64 / total_problems as f64),
            Some(detected_problems as f64 / total_problems as f64),
        )
    };

    Ok(CoverageReport {
        total_questions,
        relevant_questions,
        total_problems,
        covered_problems,
        detected_problems,
        threshold: inputs.threshold,
        precision,
        q_recall,
        e2e_recall,
        precision_pct: precision.map(|f| f * 100.0),
        q_recall_pct: q_recall.map(|f| f * 100.0),
        e2e_recall_pct: e2e_recall.map(|f| f * 100.0),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, VlmClient};
    use crate::model::QuestionCategory;
    use proptest::prelude::*;
    use std::sync::Mutex;

    struct FixedJudge {
        responses: Mutex<Vec<String>>,
    }

    impl FixedJudge {
        fn new(responses: &[&str]) -> Self {
            Self {
                responses: Mutex::new(responses.iter().rev().map(|s| s.to_string()).collect()),
            }
        }
    }

    impl VlmClient for FixedJudge {
        fn vlm_complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
            request.validate()?;
            self.responses
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| BackendError::Unavailable("no scripted response".into()))
        }
    }

    fn question(text: &str) -> Question {
        Question {
            text: text.into(),
            category: QuestionCategory::Alignment,
            source_image_index: None,
        }
    }

    #[test]
    fn cost_formula_values() {
        assert!((expected_vlm_calls(1.245, 0).unwrap() - 7.225).abs() < 1e-9);
        assert_eq!(expected_vlm_calls(0.0, 0).unwrap(), 1.0);
        assert_eq!(expected_vlm_calls(4.0, 1).unwrap(), 25.0);
        assert!(expected_vlm_calls(-1.0, 0).is_err());
        assert!(expected_vlm_calls(f64::NAN, 0).is_err());
    }

    #[test]
    fn cost_formula_is_affine() {
        for k in 0..4u32 {
            let slope = expected_vlm_calls(1.0, k).unwrap() - expected_vlm_calls(0.0, k).unwrap();
            assert_eq!(slope, 5.0 + k as f64);
            assert_eq!(expected_vlm_calls(0.0, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn gt_extraction_dedups() {
        let judge = FixedJudge::new(&[r#"{"problems": ["a", "a", "b"]}"#]);
        let problems = extract_gt_problems(&judge, "whatever").unwrap();
        assert_eq!(problems, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn gt_extraction_allows_empty() {
        let judge = FixedJudge::new(&[r#"{"problems": []}"#]);
        assert!(extract_gt_problems(&judge, "").unwrap().is_empty());
    }

    #[test]
    fn direct_analysis_lists_problems() {
        use crate::model::VideoArtifact;
        let judge =
            FixedJudge::new(&[r#"{"problems": ["the car is blue", "wheels warp"]}"#]);
        let video = VideoArtifact {
            locator: "test://v0".into(),
            generator_id: "test".into(),
            seed: None,
            iteration_index: 0,
        };
        let problems = direct_analysis_problems(&judge, &video, "a red car").unwrap();
        assert_eq!(problems.len(), 2);

        let judge = FixedJudge::new(&[r#"{"is_relevant": false}"#]);
        assert!(!judge_detected_problem(&judge, "a red car", "the car is blue").unwrap());
    }

    #[test]
    fn relevance_flags_parse() {
        let judge = FixedJudge::new(&[r#"{"is_relevant": true}"#, r#"{"nope": 1}"#]);
        let q = question("On a scale of 0-100, how red is the car?");
        assert!(judge_relevance(&judge, &q, "a red car").unwrap());
        assert!(matches!(
            judge_relevance(&judge, &q, "a red car"),
            Err(AnalysisError::MalformedResponse(_))
        ));
    }

    #[test]
    fn mapping_validates_indices() {
        let questions: Vec<Question> = (0..5)
            .map(|i| question(&format!("On a scale of 0-100, how clear is item {i}?")))
            .collect();
        let judge = FixedJudge::new(&[r#"{"indices": [0, 3]}"#]);
        assert_eq!(
            map_problem_to_questions(&judge, "item is blurry", &questions).unwrap(),
            vec![0, 3]
        );
        let judge = FixedJudge::new(&[r#"{"indices": []}"#]);
        assert!(map_problem_to_questions(&judge, "item is blurry", &questions)
            .unwrap()
            .is_empty());
        let judge = FixedJudge::new(&[r#"{"indices": [7]}"#]);
        assert!(matches!(
            map_problem_to_questions(&judge, "item is blurry", &questions),
            Err(AnalysisError::IndexOutOfRange { index: 7, len: 5 })
        ));
    }

    fn inputs(
        flags: Vec<bool>,
        mapping: Vec<Vec<usize>>,
        scores: Vec<u8>,
        threshold: u8,
    ) -> CoverageInputs {
        let questions = (0..flags.len())
            .map(|i| question(&format!("On a scale of 0-100, how clear is item {i}?")))
            .collect();
        CoverageInputs {
            gt_problems: (0..mapping.len()).map(|i| format!("problem {i}")).collect(),
            questions,
            relevance_flags: flags,
            problem_to_question_indices: mapping,
            qa_scores: scores,
            threshold,
        }
    }

    #[test]
    fn coverage_hand_computed() {
        // 4 questions, 3 relevant; 3 problems, 2 covered, 1 detected below 60.
        let report = coverage_metrics(&inputs(
            vec![true, true, true, false],
            vec![vec![0], vec![1, 2], vec![]],
            vec![55, 80, 61, 90],
            60,
        ))
        .unwrap();
        assert_eq!(report.precision, Some(0.75));
        assert!((report.q_recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.e2e_recall.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.precision_pct, Some(75.0));
    }

    #[test]
    fn boundary_score_does_not_detect() {
        let report = coverage_metrics(&inputs(
            vec![true],
            vec![vec![0]],
            vec![60],
            60,
        ))
        .unwrap();
        assert_eq!(report.detected_problems, 0);
        let report = coverage_metrics(&inputs(
            vec![true],
            vec![vec![0]],
            vec![59],
            60,
        ))
        .unwrap();
        assert_eq!(report.detected_problems, 1);
    }

    #[test]
    fn degenerate_denominators_reported() {
        let report = coverage_metrics(&inputs(vec![], vec![], vec![], 60)).unwrap();
        assert!(report.precision.is_none());
        assert!(report.q_recall.is_none());
        assert_eq!(report.degenerate.len(), 2);
    }

    #[test]
    fn tampered_ledger_is_flagged() {
        use crate::model::{
            GlobalScoreRecord, IterationRecord, RunMode, Trajectory, VideoArtifact,
        };
        let conditions =
            crate::model::GenerationConditions::text_to_video("a red car", 0).unwrap();
        let mut trajectory = Trajectory::new(conditions, RunMode::BestOfN);
        trajectory
            .append_iteration(IterationRecord {
                index: 0,
                prompt_used: "a red car".into(),
                seed: Some(17),
                video: VideoArtifact {
                    locator: "test://v0".into(),
                    generator_id: "test".into(),
                    seed: Some(17),
                    iteration_index: 0,
                },
                questions: Vec::new(),
                qa_pairs: Vec::new(),
                refinement: None,
                global_score: GlobalScoreRecord {
                    iteration_index: 0,
                    score: 50,
                    raw_response: "50".into(),
                },
            })
            .unwrap();
        trajectory.ledger.global_rate_calls = 1;
        assert!(audit_ledger(&trajectory).deviations.is_empty());

        trajectory.ledger.refine_calls = 7;
        let report = audit_ledger(&trajectory);
        assert_eq!(report.deviations.len(), 1);
        assert!(report.deviations[0].contains("refine"));
    }

    proptest! {
        #[test]
        fn e2e_recall_never_exceeds_q_recall(
            flags in proptest::collection::vec(any::<bool>(), 1..=8),
            seed_scores in proptest::collection::vec(0u8..=100, 8),
            mapping in proptest::collection::vec(
                proptest::collection::vec(0usize..8, 0..=4), 1..=6
            ),
            threshold in 0u8..=100,
        ) {
            let n = flags.len();
            let scores: Vec<u8> = seed_scores[..n].to_vec();
            let mapping: Vec<Vec<usize>> = mapping
                .into_iter()
                .map(|m| m.into_iter().map(|i| i % n).collect())
                .collect();
            let report = coverage_metrics(&inputs(flags.clone(), mapping.clone(), scores.clone(), threshold)).unwrap();
            prop_assert!(report.e2e_recall.unwrap() <= report.q_recall.unwrap() + 1e-12);
            for metric in [report.precision, report.q_recall, report.e2e_recall].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&metric));
            }

            // Independent counting oracle: walk problems one by one with
            // set semantics instead of iterator combinators.
            let mut covered = 0usize;
            let mut detected = 0usize;
            for indices in &mapping {
                let unique: std::collections::BTreeSet<usize> = indices.iter().copied().collect();
                if !unique.is_empty() {
                    covered += 1;
                }
                if unique.iter().any(|&i| scores[i] < threshold) {
                    detected += 1;
                }
            }
            let relevant = flags.iter().filter(|&&f| f).count();
            prop_assert_eq!(report.covered_problems, covered);
            prop_assert_eq!(report.detected_problems, detected);
            prop_assert_eq!(report.precision, Some(relevant as f64 / flags.len() as f64));
            prop_assert_eq!(report.q_recall, Some(covered as f64 / mapping.len() as f64));
            prop_assert_eq!(report.e2e_recall, Some(detected as f64 / mapping.len() as f64));
        }

        #[test]
        fn metrics_invariant_under_permutation(
            flags in proptest::collection::vec(any::<bool>(), 3..=6),
        ) {
            let n = flags.len();
            let scores: Vec<u8> = (0..n).map(|i| (i * 17 % 101) as u8).collect();
            let mapping: Vec<Vec<usize>> = vec![vec![0], vec![n - 1], vec![]];
            let base = coverage_metrics(&inputs(flags.clone(), mapping.clone(), scores.clone(), 60)).unwrap();

            // Permute problems (reverse); question order stays fixed
            // because the mapping indexes into it.
            let reversed_mapping: Vec<Vec<usize>> = mapping.into_iter().rev().collect();
            let permuted = coverage_metrics(&inputs(flags, reversed_mapping, scores, 60)).unwrap();
            prop_assert_eq!(base.q_recall, permuted.q_recall);
            prop_assert_eq!(base.e2e_recall, permuted.e2e_recall);
            prop_assert_eq!(base.precision, permuted.precision);
        }
    }
}
