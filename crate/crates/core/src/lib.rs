//! Event-sourced runtime for LLM agents.
//!
//! Every agent session is recorded as a [`Tape`](tape::Tape): an immutable,
//! append-only list of typed steps. The tape is both the audit log and the
//! full resumable state, so a run can be continued, replayed or forked from
//! any intermediate tape.

pub mod tape;
pub mod llm;
pub mod agent;
pub mod components;
pub mod environment;
pub mod orchestrator;
pub mod optimize;
pub mod scenario;
