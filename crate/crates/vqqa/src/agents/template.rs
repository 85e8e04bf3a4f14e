//! Prompt template assets and rendering.
//!
//! Templates ship as UTF-8 text files with `{name}` placeholders; literal
//! braces in the source text are escaped as `{{` and `}}`. A golden-hash
//! manifest pins every asset so edits cannot slip in silently.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::agents::AgentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    AlignmentQg,
    VisualQualityQg,
    ConditionFidelityQg,
    QaT2v,
    QaI2v,
    PrT2v,
    PrI2v,
    GlobalRateT2v,
    GlobalRateI2v,
    JudgeGtExtraction,
    JudgeDirectAnalysis,
    JudgePrecision,
    JudgeQRecall,
    JudgeE2eDirect,
}

pub const ALL_TEMPLATES: [TemplateId; 14] = [
    TemplateId::AlignmentQg,
    TemplateId::VisualQualityQg,
    TemplateId::ConditionFidelityQg,
    TemplateId::QaT2v,
    TemplateId::QaI2v,
    TemplateId::PrT2v,
    TemplateId::PrI2v,
    TemplateId::GlobalRateT2v,
    TemplateId::GlobalRateI2v,
    TemplateId::JudgeGtExtraction,
    TemplateId::JudgeDirectAnalysis,
    TemplateId::JudgePrecision,
    TemplateId::JudgeQRecall,
    TemplateId::JudgeE2eDirect,
];

impl TemplateId {
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::AlignmentQg => "qg_alignment.txt",
            TemplateId::VisualQualityQg => "qg_visual_quality.txt",
            TemplateId::ConditionFidelityQg => "qg_condition_fidelity.txt",
            TemplateId::QaT2v => "qa_t2v.txt",
            TemplateId::QaI2v => "qa_i2v.txt",
            TemplateId::PrT2v => "pr_t2v.txt",
            TemplateId::PrI2v => "pr_i2v.txt",
            TemplateId::GlobalRateT2v => "global_rate_t2v.txt",
            TemplateId::GlobalRateI2v => "global_rate_i2v.txt",
            TemplateId::JudgeGtExtraction => "judge_gt_extraction.txt",
            TemplateId::JudgeDirectAnalysis => "judge_direct_analysis.txt",
            TemplateId::JudgePrecision => "judge_precision.txt",
            TemplateId::JudgeQRecall => "judge_q_recall.txt",
            TemplateId::JudgeE2eDirect => "judge_e2e_direct.txt",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            TemplateId::AlignmentQg => include_str!("../../templates/qg_alignment.txt"),
            TemplateId::VisualQualityQg => include_str!("../../templates/qg_visual_quality.txt"),
            TemplateId::ConditionFidelityQg => {
                include_str!("../../templates/qg_condition_fidelity.txt")
            }
            TemplateId::QaT2v => include_str!("../../templates/qa_t2v.txt"),
            TemplateId::QaI2v => include_str!("../../templates/qa_i2v.txt"),
            TemplateId::PrT2v => include_str!("../../templates/pr_t2v.txt"),
            TemplateId::PrI2v => include_str!("../../templates/pr_i2v.txt"),
            TemplateId::GlobalRateT2v => include_str!("../../templates/global_rate_t2v.txt"),
            TemplateId::GlobalRateI2v => include_str!("../../templates/global_rate_i2v.txt"),
            TemplateId::JudgeGtExtraction => include_str!("../../templates/judge_gt_extraction.txt"),
            TemplateId::JudgeDirectAnalysis => {
                include_str!("../../templates/judge_direct_analysis.txt")
            }
            TemplateId::JudgePrecision => include_str!("../../templates/judge_precision.txt"),
            TemplateId::JudgeQRecall => include_str!("../../templates/judge_q_recall.txt"),
            TemplateId::JudgeE2eDirect => include_str!("../../templates/judge_e2e_direct.txt"),
        }
    }
}

const MANIFEST: &str = include_str!("../../templates/manifest.json");

/// Verifies every shipped template against the golden-hash manifest.
pub fn verify_template_manifest() -> Result<(), AgentError> {
    let manifest: BTreeMap<String, String> = serde_json::from_str(MANIFEST)
        .map_err(|e| AgentError::MalformedResponse(format!("template manifest: {e}")))?;
    for id in ALL_TEMPLATES {
        let expected = manifest.get(id.file_name()).ok_or_else(|| {
            AgentError::MalformedResponse(format!("{} missing from manifest", id.file_name()))
        })?;
        let actual = hex::encode(Sha256::digest(id.source().as_bytes()));
        if &actual != expected {
            return Err(AgentError::MalformedResponse(format!(
                "{} hash mismatch: {actual} != {expected}",
                id.file_name()
            )));
        }
    }
    Ok(())
}

/// Placeholder names a template declares.
pub fn placeholders(id: TemplateId) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    scan(id.source(), |name, _| {
        names.insert(name.to_string());
        Ok::<_, ()>(String::new())
    })
    .ok();
    names
}

/// Renders a template, substituting only at declared placeholders. `{{` and
/// `}}` become literal braces. Fails with the full list of unfilled
/// placeholder names.
pub fn render_template(id: TemplateId, slots: &[(&str, &str)]) -> Result<String, AgentError> {
    let mut missing = BTreeSet::new();
    let rendered = scan(id.source(), |name, _| {
        match slots.iter().find(|(slot, _)| *slot == name) {
            Some((_, value)) => Ok(value.to_string()),
            None => {
                missing.insert(name.to_string());
                Err(())
            }
        }
    });
    match rendered {
        Ok(text) if missing.is_empty() => Ok(text),
        _ => Err(AgentError::MissingSlot(missing.into_iter().collect())),
    }
}

/// Walks template text calling `fill` for each `{name}` placeholder. A
/// `fill` error marks the placeholder unfilled but the scan continues so
/// every missing name is collected.
fn scan<E>(
    source: &str,
    mut fill: impl FnMut(&str, ()) -> Result<String, E>,
) -> Result<String, E> {
    let bytes = source.as_bytes();
    let mut out = String::with_capacity(source.len());
    let mut i = 0;
    let mut failed = None;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                if let Some((name, end)) = placeholder_at(source, i) {
                    match fill(name, ()) {
                        Ok(value) => out.push_str(&value),
                        Err(e) => {
                            if failed.is_none() {
                                failed = Some(e);
                            }
                        }
                    }
                    i = end;
                } else {
                    out.push('{');
                    i += 1;
                }
            }
            _ => {
                let ch = source[i..].chars().next().unwrap();
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    match failed {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Recognizes `{name}` at byte offset `i`: a lowercase identifier between
/// single braces. Returns the name and the offset just past the `}`.
fn placeholder_at(source: &str, i: usize) -> Option<(&str, usize)> {
    let rest = &source[i + 1..];
    let end = rest.find('}')?;
    let name = &rest[..end];
    if name.is_empty() {
        return None;
    }
    let mut chars = name.chars();
    let first = chars.next().unwrap();
    if !(first.is_ascii_lowercase() || first == '_') {
        return None;
    }
    if !name
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    {
        return None;
    }
    Some((name, i + 1 + end + 1))
}
