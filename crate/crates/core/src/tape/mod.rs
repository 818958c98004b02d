//! Steps, tapes, the step-kind registry, canonical documents and diffs.

pub mod builtin;
pub mod codec;
mod diff;
mod error;
mod record;
mod registry;
mod step;

pub use codec::{DecodeMode, TAPE_FILE_EXTENSION};
pub use diff::{diff, diff_with, step_differences, DiffEntry, DiffOptions, DiffReport};
pub use error::TapeError;
pub use record::{agent_metadata, Tape, TapeMetadata};
pub(crate) use record::now_iso;
pub use registry::{FieldSpec, FieldType, PayloadSchema, StepKind, StepRegistry, BUILTIN_KINDS};
pub use step::{new_id, Step, StepCategory, StepMetadata};
