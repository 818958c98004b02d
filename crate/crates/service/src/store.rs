//! Directory-backed tape store: one canonical file per tape plus an index.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tapes::agent::AgentConfig;
use tapes::environment::EnvConfig;
use tapes::orchestrator::{FinishReason, LoopConfig};
use tapes::tape::codec::{deserialize, serialize};
use tapes::tape::{
    DecodeMode, FieldSpec, FieldType, Step, StepKind, StepRegistry, Tape, TapeError, TAPE_FILE_EXTENSION,
};
use thiserror::Error;
use tracing::warn;

pub const STORE_DIR_ENV: &str = "TAPE_STORE_DIR";
pub const DEFAULT_STORE_DIR: &str = "./tapes";
pub const INDEX_FILE: &str = "index.json";
const RUNS_DIR: &str = "runs";
const RUN_EXTENSION: &str = ".run.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no tape with id `{0}`")]
    NotFound(String),
    #[error("no run manifest for tape `{0}`")]
    NoManifest(String),
    #[error("`{0}` is not a valid tape id")]
    BadId(String),
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// One row of the store index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// File name relative to the store root.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub author: String,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

/// How a stored tape was produced, so it can be resumed or replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tape_id: String,
    pub input_tape_id: String,
    pub agent: AgentConfig,
    pub env: EnvConfig,
    pub loop_config: LoopConfig,
    pub reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct TapeStore {
    root: PathBuf,
    registry: StepRegistry,
    writes: Mutex<()>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(io(&tmp))?;
    file.write_all(bytes).map_err(io(&tmp))?;
    file.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

impl TapeStore {
    /// Opens the store at `root`, creating the directory if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(Self {
            root,
            registry: StepRegistry::default(),
            writes: Mutex::new(()),
        })
    }

    /// The store named by `TAPE_STORE_DIR`, or `./tapes`.
    pub fn open_default() -> Result<Self, StoreError> {
        Self::open(std::env::var_os(STORE_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_STORE_DIR), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tape_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}{TAPE_FILE_EXTENSION}"))
    }

    fn manifest_path(&self, id: &str) -> PathBuf {
        self.root.join(RUNS_DIR).join(format!("{id}{RUN_EXTENSION}"))
    }

    pub fn save(&self, tape: &Tape) -> Result<IndexEntry, StoreError> {
        check_id(tape.id())?;
        let path = self.tape_path(tape.id());
        {
            let _guard = self.writes.lock().unwrap_or_else(|p| p.into_inner());
            write_atomic(&path, &serialize(tape))?;
        }
        Ok(entry(tape, &path))
    }

    pub fn load(&self, id: &str) -> Result<Tape, StoreError> {
        check_id(id)?;
        let path = self.tape_path(id);
        if !path.exists() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        read_tape(&self.registry, &path)
    }

    pub fn contains(&self, id: &str) -> bool {
        check_id(id).is_ok() && self.tape_path(id).exists()
    }

    /// Index entries sorted by creation time, rebuilt from the files.
    pub fn list(&self) -> Result<Vec<IndexEntry>, StoreError> {
        let mut entries = Vec::new();
        for dirent in fs::read_dir(&self.root).map_err(io(&self.root))? {
            let path = dirent.map_err(io(&self.root))?.path();
            let is_tape = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(TAPE_FILE_EXTENSION) && !n.starts_with('.'));
            if !is_tape {
                continue;
            }
            match read_tape(&self.registry, &path) {
                Ok(tape) => entries.push(entry(&tape, &path)),
                Err(error) => warn!(%error, "skipping unreadable tape file"),
            }
        }
        entries.sort_by(|a, b| (&a.created_at, &a.id).cmp(&(&b.created_at, &b.id)));
        let index = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&entries).expect("index serializes");
        let _guard = self.writes.lock().unwrap_or_else(|p| p.into_inner());
        write_atomic(&index, text.as_bytes())?;
        Ok(entries)
    }

    /// Saves a revision of tape `id` with step `index` replaced.
    pub fn fork(&self, id: &str, index: usize, replacement: Step, author: &str) -> Result<Tape, StoreError> {
        let tape = self.load(id)?;
        let mut registry = self.registry.clone();
        if !registry.contains(&replacement.kind) {
            // custom kinds are accepted as they are, as in lenient decoding
            let fields = replacement
                .payload
                .keys()
                .map(|k| FieldSpec::optional(k, FieldType::Any))
                .collect();
            registry.register(StepKind::new(&replacement.kind, replacement.category, fields))?;
        }
        let child = tape.fork(&registry, index, replacement, author)?;
        self.save(&child)?;
        Ok(child)
    }

    pub fn children(&self, id: &str) -> Result<Vec<String>, StoreError> {
        Ok(self
            .list()?
            .into_iter()
            .filter(|e| e.parent_id.as_deref() == Some(id))
            .map(|e| e.id)
            .collect())
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        check_id(&manifest.tape_id)?;
        let path = self.manifest_path(&manifest.tape_id);
        let dir = self.root.join(RUNS_DIR);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        let _guard = self.writes.lock().unwrap_or_else(|p| p.into_inner());
        write_atomic(&path, text.as_bytes())
    }

    pub fn manifest(&self, id: &str) -> Result<RunManifest, StoreError> {
        check_id(id)?;
        let path = self.manifest_path(id);
        if !path.exists() {
            return Err(StoreError::NoManifest(id.to_string()));
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            message: e.to_string(),
        })
    }
}

fn entry(tape: &Tape, path: &Path) -> IndexEntry {
    let meta = tape.metadata();
    IndexEntry {
        id: meta.id.clone(),
        path: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        parent_id: meta.parent_id.clone(),
        author: meta.author.clone(),
        steps: tape.len(),
        created_at: meta.created_at.clone(),
    }
}

/// Reads one tape file; unknown step kinds are kept as they are.
pub fn read_tape(registry: &StepRegistry, path: &Path) -> Result<Tape, StoreError> {
    let bytes = fs::read(path).map_err(io(path))?;
    deserialize(registry, &bytes, DecodeMode::Lenient).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// All tape files directly inside `dir`, in file-name order.
pub fn read_tape_dir(registry: &StepRegistry, dir: &Path) -> Result<Vec<Tape>, StoreError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(TAPE_FILE_EXTENSION) && !n.starts_with('.'))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_tape(registry, p)).collect()
}
