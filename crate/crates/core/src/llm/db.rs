use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::error::LlmError;
use super::prompt::{LlmOutput, Prompt};

pub const DB_PATH_ENV: &str = "TAPEAGENTS_DB_PATH";
pub const DEFAULT_DB_PATH: &str = "./llm_calls.sqlite";

const SCHEMA: &str = "CREATE TABLE IF NOT EXISTS llm_calls (
    prompt_id TEXT PRIMARY KEY,
    model TEXT,
    prompt_json TEXT NOT NULL,
    output_json TEXT NOT NULL,
    input_tokens INTEGER,
    output_tokens INTEGER,
    created_at TEXT
)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCallRecord {
    pub prompt_id: String,
    pub model: String,
    pub prompt: Prompt,
    pub output: LlmOutput,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// ISO-8601 UTC timestamp.
    pub created_at: String,
}

/// SQLite-backed store of every LLM call, keyed by prompt id.
///
/// Writes are serialized through one connection.
pub struct CallDb {
    conn: Mutex<Connection>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for CallDb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CallDb").field("path", &self.path).finish()
    }
}

impl CallDb {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|e| LlmError::Config(format!("{}: {e}", parent.display())))?;
        }
        let conn = Connection::open(path)?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn open_in_memory() -> Result<Self, LlmError> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            path: None,
        })
    }

    /// Opens the database named by `TAPEAGENTS_DB_PATH`, or the default path.
    pub fn open_default() -> Result<Self, LlmError> {
        Self::open(default_path())
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Stores a call. Recording the same prompt id again is accepted only
    /// when prompt and output are unchanged.
    pub fn record(&self, record: &LlmCallRecord) -> Result<(), LlmError> {
        if let Some(existing) = self.find(&record.prompt_id)? {
            if existing.prompt.content_eq(&record.prompt) && existing.output == record.output {
                return Ok(());
            }
            return Err(LlmError::DuplicatePromptId(record.prompt_id.clone()));
        }
        let prompt_json = serde_json::to_string(&record.prompt)?;
        let output_json = serde_json::to_string(&record.output)?;
        let conn = self.conn();
        let result = conn.execute(
            "INSERT INTO llm_calls
                (prompt_id, model, prompt_json, output_json, input_tokens, output_tokens, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                record.prompt_id,
                record.model,
                prompt_json,
                output_json,
                record.input_tokens as i64,
                record.output_tokens as i64,
                record.created_at,
            ],
        );
        match result {
            Ok(_) => Ok(()),
            Err(rusqlite::Error::SqliteFailure(e, _))
                if e.code == rusqlite::ErrorCode::ConstraintViolation =>
            {
                Err(LlmError::DuplicatePromptId(record.prompt_id.clone()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn get(&self, prompt_id: &str) -> Result<LlmCallRecord, LlmError> {
        self.find(prompt_id)?
            .ok_or_else(|| LlmError::NotFound(prompt_id.to_string()))
    }

    pub fn find(&self, prompt_id: &str) -> Result<Option<LlmCallRecord>, LlmError> {
        let conn = self.conn();
        let row = conn
            .query_row(
                "SELECT prompt_id, model, prompt_json, output_json, input_tokens, output_tokens, created_at
                 FROM llm_calls WHERE prompt_id = ?1",
                [prompt_id],
                raw_row,
            )
            .optional()?;
        row.map(RawRow::into_record).transpose()
    }

    pub fn contains(&self, prompt_id: &str) -> Result<bool, LlmError> {
        let conn = self.conn();
        let found: Option<i64> = conn
            .query_row("SELECT 1 FROM llm_calls WHERE prompt_id = ?1", [prompt_id], |r| r.get(0))
            .optional()?;
        Ok(found.is_some())
    }

    /// All records ordered by timestamp, then insertion order.
    pub fn list(&self) -> Result<Vec<LlmCallRecord>, LlmError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT prompt_id, model, prompt_json, output_json, input_tokens, output_tokens, created_at
             FROM llm_calls ORDER BY created_at, rowid",
        )?;
        let rows = stmt.query_map([], raw_row)?.collect::<Result<Vec<_>, _>>()?;
        rows.into_iter().map(RawRow::into_record).collect()
    }

    pub fn count(&self) -> Result<usize, LlmError> {
        let conn = self.conn();
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM llm_calls", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    /// Records for the given ids, in the given order.
    pub fn get_many<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<LlmCallRecord>, LlmError> {
        ids.into_iter().map(|id| self.get(id)).collect()
    }
}

pub fn default_path() -> PathBuf {
    std::env::var_os(DB_PATH_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DB_PATH))
}

struct RawRow {
    prompt_id: String,
    model: Option<String>,
    prompt_json: String,
    output_json: String,
    input_tokens: Option<i64>,
    output_tokens: Option<i64>,
    created_at: Option<String>,
}

fn raw_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<RawRow> {
    Ok(RawRow {
        prompt_id: row.get(0)?,
        model: row.get(1)?,
        prompt_json: row.get(2)?,
        output_json: row.get(3)?,
        input_tokens: row.get(4)?,
        output_tokens: row.get(5)?,
        created_at: row.get(6)?,
    })
}

impl RawRow {
    fn into_record(self) -> Result<LlmCallRecord, LlmError> {
        Ok(LlmCallRecord {
            prompt: serde_json::from_str(&self.prompt_json)?,
            output: serde_json::from_str(&self.output_json)?,
            prompt_id: self.prompt_id,
            model: self.model.unwrap_or_default(),
            input_tokens: self.input_tokens.unwrap_or(0).max(0) as u64,
            output_tokens: self.output_tokens.unwrap_or(0).max(0) as u64,
            created_at: self.created_at.unwrap_or_default(),
        })
    }
}
