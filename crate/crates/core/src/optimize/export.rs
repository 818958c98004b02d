use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::OptimizeError;
use crate::agent::{make_training_text, Agent, TrainingSample};
use crate::llm::{CallDb, LlmOutput, Prompt};
use crate::tape::Tape;

pub const REJECTS_SUFFIX: &str = ".rejects.json";

/// One line of an exported training file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub prompt_text: String,
    pub completion_text: String,
    pub source_tape_id: String,
    pub source_prompt_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub tape_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportSummary {
    pub written: usize,
    pub rejected: Vec<Rejection>,
    pub rejects_path: PathBuf,
}

/// Sidecar file listing the tapes an export left out.
pub fn rejects_path(destination: &Path) -> PathBuf {
    let mut name = destination.as_os_str().to_owned();
    name.push(REJECTS_SUFFIX);
    PathBuf::from(name)
}

/// Chat-formatted prompt text: tool schemas first when present, then one
/// block per message headed by its role.
pub fn prompt_text(prompt: &Prompt) -> String {
    let mut blocks = Vec::new();
    if !prompt.tools.is_empty() {
        blocks.push(format!("<|tools|>\n{}", json!(prompt.tools)));
    }
    for message in &prompt.messages {
        let mut block = format!("<|{}|>\n{}", message.role.as_str(), message.content);
        for call in &message.tool_calls {
            block.push('\n');
            block.push_str(&json!({"name": call.tool_name, "arguments": call.arguments}).to_string());
        }
        blocks.push(block);
    }
    blocks.join("\n")
}

/// The output text, followed by one JSON line per tool call.
pub fn completion_text(output: &LlmOutput) -> String {
    let mut lines: Vec<String> = output.content.iter().cloned().collect();
    lines.extend(
        output
            .tool_calls
            .iter()
            .map(|c| json!({"name": c.tool_name, "arguments": c.arguments}).to_string()),
    );
    lines.join("\n")
}

/// Output equality up to tool call ids, which delegation steps do not keep.
fn same_output(a: &LlmOutput, b: &LlmOutput) -> bool {
    a.content_str() == b.content_str()
        && a.tool_calls.len() == b.tool_calls.len()
        && a.tool_calls
            .iter()
            .zip(&b.tool_calls)
            .all(|(x, y)| x.tool_name == y.tool_name && x.arguments == y.arguments)
}

fn validated(agent: &Agent, tape: &Tape, db: &CallDb) -> Result<Vec<TrainingSample>, String> {
    let samples = make_training_text(agent, tape, Some(db)).map_err(|e| e.to_string())?;
    for sample in &samples {
        let id = &sample.prompt.id;
        let record = db
            .find(id)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("prompt `{id}` has no recorded call"))?;
        if !same_output(&record.output, &sample.output) {
            return Err(format!("steps of prompt `{id}` disagree with the recorded output"));
        }
    }
    Ok(samples)
}

/// Writes one record per validated LLM call to `destination` as
/// newline-delimited JSON. Tapes that fail validation are skipped whole and
/// listed in the sidecar report.
pub fn export_training_data(
    agent: &Agent,
    tapes: &[Tape],
    db: &CallDb,
    destination: &Path,
) -> Result<ExportSummary, OptimizeError> {
    let mut lines = String::new();
    let mut written = 0;
    let mut rejected = Vec::new();
    for tape in tapes {
        match validated(agent, tape, db) {
            Ok(samples) => {
                for sample in samples {
                    let record = ExportRecord {
                        prompt_text: prompt_text(&sample.prompt),
                        completion_text: completion_text(&sample.output),
                        source_tape_id: sample.source_tape_id,
                        source_prompt_id: sample.prompt.id,
                    };
                    lines.push_str(&serde_json::to_string(&record).expect("records serialize"));
                    lines.push('\n');
                    written += 1;
                }
            }
            Err(error) => rejected.push(Rejection {
                tape_id: tape.id().to_string(),
                error,
            }),
        }
    }
    let io = |path: &Path, e: std::io::Error| OptimizeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::write(destination, lines).map_err(|e| io(destination, e))?;
    let sidecar = rejects_path(destination);
    let report = serde_json::to_string_pretty(&rejected).expect("rejections serialize");
    fs::write(&sidecar, report).map_err(|e| io(&sidecar, e))?;
    Ok(ExportSummary {
        written,
        rejected,
        rejects_path: sidecar,
    })
}
