//! Append-only JSONL event logging and exact replay.
//!
//! One file per `(run_id, sample_id)`. Each line is one [`RunEvent`] with a
//! strictly increasing sequence number; a trajectory is reconstructable
//! from its events field-for-field. JSONL keeps appends crash-tolerant and
//! isolates corruption to single lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{
    CostLedger, GenerationConditions, GlobalScoreRecord, IterationRecord, QAPair, Question,
    RefinementAnalysis, RunMode, StopReason, Trajectory, VideoArtifact,
};
use crate::orchestrator::RunObserver;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("sequence violation: expected {expected}, got {got}")]
    SequenceViolation { expected: u64, got: u64 },
    #[error("corrupt line {line}: {message}")]
    CorruptLine { line: usize, message: String },
    #[error("event stream is inconsistent: {0}")]
    Reconstruction(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Generated,
    Questioned,
    Answered,
    Refined,
    Rated,
    Stopped,
    Selected,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    pub sample_id: String,
    pub iteration: u32,
    pub event_kind: EventKind,
    pub payload: Value,
    pub monotonic_sequence: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratedPayload {
    conditions: GenerationConditions,
    mode: RunMode,
    prompt_used: String,
    seed: Option<u64>,
    video: VideoArtifact,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuestionedPayload {
    questions: Vec<Question>,
    qg_calls: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoppedPayload {
    reason: StopReason,
    ledger: CostLedger,
}

/// Streams run events to a writer, enforcing the append-only sequence.
/// Implements [`RunObserver`], so the optimization loop persists as it runs.
pub struct EventLogWriter<W: Write> {
    sink: W,
    run_id: String,
    sample_id: String,
    next_sequence: u64,
}

impl EventLogWriter<BufWriter<File>> {
    pub fn create(
        path: &Path,
        run_id: impl Into<String>,
        sample_id: impl Into<String>,
    ) -> Result<Self, PersistError> {
        let file = File::create(path)?;
        Ok(Self::new(BufWriter::new(file), run_id, sample_id))
    }
}

impl<W: Write> EventLogWriter<W> {
    pub fn new(sink: W, run_id: impl Into<String>, sample_id: impl Into<String>) -> Self {
        Self {
            sink,
            run_id: run_id.into(),
            sample_id: sample_id.into(),
            next_sequence: 0,
        }
    }

    /// Appends one newline-terminated event line. The sequence number must
    /// be exactly one past the previous event's.
    pub fn write_event(&mut self, event: &RunEvent) -> Result<(), PersistError> {
        if event.monotonic_sequence != self.next_sequence {
            return Err(PersistError::SequenceViolation {
                expected: self.next_sequence,
                got: event.monotonic_sequence,
            });
        }
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.sink.write_all(line.as_bytes())?;
        if matches!(
            event.event_kind,
            EventKind::Stopped | EventKind::Selected | EventKind::Error
        ) {
            self.sink.flush()?;
        }
        self.next_sequence += 1;
        Ok(())
    }

    fn emit(&mut self, iteration: u32, kind: EventKind, payload: Value) -> Result<(), String> {
        let event = RunEvent {
            run_id: self.run_id.clone(),
            sample_id: self.sample_id.clone(),
            iteration,
            event_kind: kind,
            payload,
            monotonic_sequence: self.next_sequence,
        };
        self.write_event(&event).map_err(|e| e.to_string())
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

fn to_value<T: Serialize>(value: &T) -> Result<Value, String> {
    serde_json::to_value(value).map_err(|e| e.to_string())
}

impl<W: Write> RunObserver for EventLogWriter<W> {
    fn on_generated(
        &mut self,
        trajectory: &Trajectory,
        iteration: u32,
        prompt_used: &str,
        seed: Option<u64>,
        video: &VideoArtifact,
    ) -> Result<(), String> {
        let payload = to_value(&GeneratedPayload {
            conditions: trajectory.conditions.clone(),
            mode: trajectory.mode,
            prompt_used: prompt_used.to_string(),
            seed,
            video: video.clone(),
        })?;
        self.emit(iteration, EventKind::Generated, payload)
    }

    fn on_rated(&mut self, iteration: u32, score: &GlobalScoreRecord) -> Result<(), String> {
        self.emit(iteration, EventKind::Rated, to_value(score)?)
    }

    fn on_questioned(
        &mut self,
        iteration: u32,
        questions: &[Question],
        qg_calls: u64,
    ) -> Result<(), String> {
        let payload = to_value(&QuestionedPayload {
            questions: questions.to_vec(),
            qg_calls,
        })?;
        self.emit(iteration, EventKind::Questioned, payload)
    }

    fn on_answered(&mut self, iteration: u32, qa_pairs: &[QAPair]) -> Result<(), String> {
        self.emit(
            iteration,
            EventKind::Answered,
            to_value(&qa_pairs.to_vec())?,
        )
    }

    fn on_refined(
        &mut self,
        iteration: u32,
        refinement: &RefinementAnalysis,
    ) -> Result<(), String> {
        self.emit(iteration, EventKind::Refined, to_value(refinement)?)
    }

    fn on_stopped(&mut self, trajectory: &Trajectory) -> Result<(), String> {
        let iteration = trajectory.records.len().saturating_sub(1) as u32;
        let payload = to_value(&StoppedPayload {
            reason: trajectory
                .stop_reason
                .ok_or("stopped event without stop reason")?,
            ledger: trajectory.ledger,
        })?;
        self.emit(iteration, EventKind::Stopped, payload)
    }

    fn on_selected(&mut self, trajectory: &Trajectory) -> Result<(), String> {
        let iteration = trajectory.records.len().saturating_sub(1) as u32;
        let selected = trajectory
            .selected_index
            .ok_or("selected event without index")?;
        self.emit(
            iteration,
            EventKind::Selected,
            serde_json::json!({ "selected_index": selected }),
        )
    }

    fn on_error(&mut self, iteration: u32, message: &str) -> Result<(), String> {
        self.emit(
            iteration,
            EventKind::Error,
            serde_json::json!({ "message": message }),
        )
    }
}

/// Result of replaying a log. `trajectory` is `None` for an empty file;
/// `partial` marks runs that never reached selection (crash, error event,
/// or truncated tail).
#[derive(Debug)]
pub struct LoadedRun {
    pub run_id: Option<String>,
    pub sample_id: Option<String>,
    pub trajectory: Option<Trajectory>,
    pub partial: bool,
    pub truncated_tail: bool,
    pub error_message: Option<String>,
    pub lines: usize,
}

/// Replays a JSONL event log back into a trajectory. A torn final line is
/// tolerated (the run is reported partial); corruption anywhere else is an
/// error naming the line.
pub fn load_run(source: impl Read) -> Result<LoadedRun, PersistError> {
    let reader = BufReader::new(source);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut loaded = LoadedRun {
        run_id: None,
        sample_id: None,
        trajectory: None,
        partial: false,
        truncated_tail: false,
        error_message: None,
        lines: lines.len(),
    };

    let mut pending: Option<PendingRecord> = None;
    let mut expected_sequence = 0u64;
    let mut saw_selected = false;

    for (index, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: RunEvent = match serde_json::from_str(line) {
            Ok(event) => event,
            Err(e) => {
                // A torn write leaves invalid JSON; only that is tolerated,
                // and only on the final line. A well-formed line that is
                // not an event is corruption wherever it sits.
                let is_torn = serde_json::from_str::<Value>(line).is_err();
                if is_torn && index + 1 == lines.len() {
                    loaded.truncated_tail = true;
                    loaded.partial = true;
                    break;
                }
                return Err(PersistError::CorruptLine {
                    line: index + 1,
                    message: e.to_string(),
                });
            }
        };
        if event.monotonic_sequence != expected_sequence {
            return Err(PersistError::CorruptLine {
                line: index + 1,
                message: format!(
                    "sequence {} where {} was expected",
                    event.monotonic_sequence, expected_sequence
                ),
            });
        }
        expected_sequence += 1;
        loaded.run_id.get_or_insert_with(|| event.run_id.clone());
        loaded
            .sample_id
            .get_or_insert_with(|| event.sample_id.clone());

        let line_error = |message: String| PersistError::CorruptLine {
            line: index + 1,
            message,
        };

        match event.event_kind {
            EventKind::Generated => {
                let payload: GeneratedPayload =
                    serde_json::from_value(event.payload).map_err(|e| line_error(e.to_string()))?;
                if loaded.trajectory.is_none() {
                    loaded.trajectory = Some(Trajectory::new(payload.conditions.clone(), payload.mode));
                }
                flush_pending(&mut pending, loaded.trajectory.as_mut())?;
                pending = Some(PendingRecord {
                    iteration: event.iteration,
                    prompt_used: payload.prompt_used,
                    seed: payload.seed,
                    video: payload.video,
                    questions: Vec::new(),
                    qa_pairs: Vec::new(),
                    refinement: None,
                    score: None,
                });
            }
            EventKind::Rated => {
                let score: GlobalScoreRecord =
                    serde_json::from_value(event.payload).map_err(|e| line_error(e.to_string()))?;
                let pending = pending
                    .as_mut()
                    .ok_or_else(|| line_error("rated before generated".into()))?;
                pending.score = Some(score);
            }
            EventKind::Questioned => {
                let payload: QuestionedPayload =
                    serde_json::from_value(event.payload).map_err(|e| line_error(e.to_string()))?;
                let trajectory = loaded
                    .trajectory
                    .as_mut()
                    .ok_or_else(|| line_error("questioned before generated".into()))?;
                trajectory.ledger.question_gen_calls += payload.qg_calls;
                let pending = pending
                    .as_mut()
                    .ok_or_else(|| line_error("questioned with no open record".into()))?;
                pending.questions = payload.questions;
            }
            EventKind::Answered => {
                let qa_pairs: Vec<QAPair> =
                    serde_json::from_value(event.payload).map_err(|e| line_error(e.to_string()))?;
                let trajectory = loaded
                    .trajectory
                    .as_mut()
                    .ok_or_else(|| line_error("answered before generated".into()))?;
                trajectory.ledger.qa_calls += 1;
                let pending = pending
                    .as_mut()
                    .ok_or_else(|| line_error("answered with no open record".into()))?;
                pending.qa_pairs = qa_pairs;
            }
            EventKind::Refined => {
                let refinement: RefinementAnalysis =
                    serde_json::from_value(event.payload).map_err(|e| line_error(e.to_string()))?;
                let trajectory = loaded
                    .trajectory
                    .as_mut()
                    .ok_or_else(|| line_error("refined before generated".into()))?;
                trajectory.ledger.refine_calls += 1;
                let pending = pending
                    .as_mut()
                    .ok_or_else(|| line_error("refined with no open record".into()))?;
                pending.refinement = Some(refinement);
            }
            EventKind::Stopped => {
                let payload: StoppedPayload =
                    serde_json::from_value(event.payload).map_err(|e| line_error(e.to_string()))?;
                flush_pending(&mut pending, loaded.trajectory.as_mut())?;
                let trajectory = loaded
                    .trajectory
                    .as_mut()
                    .ok_or_else(|| line_error("stopped before generated".into()))?;
                trajectory.set_stop(payload.reason);
                // The authoritative ledger (includes rating retries, which
                // per-event replay cannot see).
                trajectory.ledger = payload.ledger;
            }
            EventKind::Selected => {
                let selected = event
                    .payload
                    .get("selected_index")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| line_error("selected event without selected_index".into()))?;
                let trajectory = loaded
                    .trajectory
                    .as_mut()
                    .ok_or_else(|| line_error("selected before generated".into()))?;
                trajectory
                    .set_selected(selected as usize)
                    .map_err(|e| line_error(e.to_string()))?;
                saw_selected = true;
            }
            EventKind::Error => {
                let message = event
                    .payload
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or("unknown error")
                    .to_string();
                loaded.error_message = Some(message);
                loaded.partial = true;
            }
        }
    }

    if pending.is_some() {
        // The run died mid-iteration; keep what completed.
        flush_pending(&mut pending, loaded.trajectory.as_mut())?;
        loaded.partial = true;
    }
    if !saw_selected {
        loaded.partial = true;
    }
    Ok(loaded)
}

struct PendingRecord {
    iteration: u32,
    prompt_used: String,
    seed: Option<u64>,
    video: VideoArtifact,
    questions: Vec<Question>,
    qa_pairs: Vec<QAPair>,
    refinement: Option<RefinementAnalysis>,
    score: Option<GlobalScoreRecord>,
}

fn flush_pending(
    pending: &mut Option<PendingRecord>,
    trajectory: Option<&mut Trajectory>,
) -> Result<(), PersistError> {
    let Some(record) = pending.take() else {
        return Ok(());
    };
    let Some(score) = record.score else {
        // Generated but never rated: drop the torn record.
        return Ok(());
    };
    let trajectory =
        trajectory.ok_or_else(|| PersistError::Reconstruction("record without trajectory".into()))?;
    // Restore rate-call accounting for replays that never reach the
    // Stopped event (its ledger snapshot overrides this when present).
    trajectory.ledger.global_rate_calls += 1;
    trajectory
        .append_iteration(IterationRecord {
            index: record.iteration,
            prompt_used: record.prompt_used,
            seed: record.seed,
            video: record.video,
            questions: record.questions,
            qa_pairs: record.qa_pairs,
            refinement: record.refinement,
            global_score: score,
        })
        .map_err(|e| PersistError::Reconstruction(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn event(sequence: u64, kind: EventKind, payload: Value) -> RunEvent {
        RunEvent {
            run_id: "run".into(),
            sample_id: "s0".into(),
            iteration: 0,
            event_kind: kind,
            payload,
            monotonic_sequence: sequence,
        }
    }

    #[test]
    fn two_appends_round_trip() {
        let mut writer = EventLogWriter::new(Vec::new(), "run", "s0");
        writer
            .write_event(&event(0, EventKind::Error, json!({"message": "a"})))
            .unwrap();
        writer
            .write_event(&event(1, EventKind::Error, json!({"message": "b"})))
            .unwrap();
        let bytes = writer.into_inner();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let parsed: RunEvent = serde_json::from_str(line).unwrap();
            assert_eq!(parsed.run_id, "run");
        }
    }

    #[test]
    fn out_of_order_sequence_rejected() {
        let mut writer = EventLogWriter::new(Vec::new(), "run", "s0");
        let err = writer
            .write_event(&event(5, EventKind::Error, json!({"message": "a"})))
            .unwrap_err();
        assert!(matches!(
            err,
            PersistError::SequenceViolation { expected: 0, got: 5 }
        ));
    }

    #[test]
    fn empty_file_is_an_empty_run() {
        let loaded = load_run(std::io::Cursor::new("")).unwrap();
        assert!(loaded.trajectory.is_none());
        assert!(loaded.partial);
        assert_eq!(loaded.lines, 0);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let mut writer = EventLogWriter::new(Vec::new(), "run", "s0");
        writer
            .write_event(&event(0, EventKind::Error, json!({"message": "a"})))
            .unwrap();
        writer
            .write_event(&event(1, EventKind::Error, json!({"message": "b"})))
            .unwrap();
        let mut text = String::from_utf8(writer.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        text = format!("{}\n{{corrupt\n{}\n", lines[0], lines[1]);
        let err = load_run(std::io::Cursor::new(text)).unwrap_err();
        assert!(matches!(err, PersistError::CorruptLine { line: 2, .. }));
    }

    #[test]
    fn well_formed_non_event_line_is_corrupt_even_at_the_tail() {
        let err = load_run(std::io::Cursor::new("[55, 80, 61]\n")).unwrap_err();
        assert!(matches!(err, PersistError::CorruptLine { line: 1, .. }));
    }

    #[test]
    fn truncated_tail_is_tolerated() {
        let mut writer = EventLogWriter::new(Vec::new(), "run", "s0");
        writer
            .write_event(&event(0, EventKind::Error, json!({"message": "a"})))
            .unwrap();
        let mut text = String::from_utf8(writer.into_inner()).unwrap();
        text.push_str("{\"run_id\": \"run\", \"trunc");
        let loaded = load_run(std::io::Cursor::new(text)).unwrap();
        assert!(loaded.truncated_tail);
        assert!(loaded.partial);
    }
}
