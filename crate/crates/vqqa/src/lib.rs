//! Closed-loop, black-box test-time optimizer for video generation.
//!
//! The engine evaluates a generated video through dynamic question-answering,
//! turns low-scoring answers into a prompt update, selects the best candidate
//! with a holistic global rater, and halts on a patience-based convergence
//! rule. Every component is pluggable: video generation and multimodal
//! completion sit behind the [`backend`] traits, and a fully deterministic
//! simulated backend supports offline verification of the whole loop.
//!
//! Module map:
//! - [`model`] — domain types (conditions, trajectories, QA pairs, ledgers)
//!   and pure bookkeeping shared by everything else.
//! - [`backend`] — capability traits, the simulated backend, and the HTTP
//!   adapter.
//! - [`agents`] — prompt templates, agent calls (question generation,
//!   question answering, prompt refinement), and response parsing.
//! - [`orchestrator`] — the optimization loop, global rating, stopping
//!   rules, candidate selection, and the best-of-N baseline.
//! - [`analysis`] — cost-model arithmetic/auditing and the question-quality
//!   metric pipeline (precision / Q-recall / E2E-recall).
//! - [`persistence`] — append-only JSONL event logs with exact replay.

pub mod agents;
pub mod analysis;
pub mod backend;
pub mod model;
pub mod orchestrator;
pub mod persistence;
