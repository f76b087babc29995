//! On-disk persistence of run records.
//!
//! A run is stored as `<run_id>.json` next to a `<run_id>.exec.json`
//! sidecar holding its [`ExecutionStats`]. Saving the same complete run
//! again rewrites identical bytes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use super::{ExecutionStats, RunRecord};

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0:?} not found")]
    NotFound(String),
    #[error("invalid run id {0:?}")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed run file: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn pretty<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("run records serialize");
    bytes.push(b'\n');
    bytes
}

fn sidecar_path(run_path: &Path) -> PathBuf {
    let stem = run_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    run_path.with_file_name(format!("{stem}.exec.json"))
}

/// Writes the run document to `path` and its execution stats to the sidecar.
pub fn write_run_file(path: &Path, record: &RunRecord) -> Result<(), StoreError> {
    write_atomic(path, &pretty(record))?;
    write_atomic(&sidecar_path(path), &pretty(&record.execution))
}

/// Reads a run document, plus its sidecar when one exists.
pub fn read_run_file(path: &Path) -> Result<RunRecord, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut record: RunRecord = serde_json::from_slice(&bytes).map_err(|source| StoreError::Malformed {
        path: path.to_path_buf(),
        source,
    })?;
    let side = sidecar_path(path);
    if let Ok(bytes) = fs::read(&side) {
        record.execution = serde_json::from_slice::<ExecutionStats>(&bytes)
            .map_err(|source| StoreError::Malformed { path: side, source })?;
    }
    Ok(record)
}

/// A directory of run records with an index of ids in creation order.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    index_lock: Mutex<()>,
}

impl RunStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(RunStore {
            dir,
            index_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        let ok = !run_id.is_empty()
            && run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(StoreError::InvalidId(run_id.to_string()));
        }
        Ok(self.dir.join(format!("{run_id}.json")))
    }

    fn read_index(&self) -> Result<Vec<String>, StoreError> {
        let path = self.dir.join(INDEX_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| StoreError::Malformed { path, source }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn save(&self, record: &RunRecord) -> Result<PathBuf, StoreError> {
        let path = self.path_for(&record.run_id)?;
        write_run_file(&path, record)?;
        let _guard = self.index_lock.lock().expect("index lock");
        let mut ids = self.read_index()?;
        if !ids.contains(&record.run_id) {
            ids.push(record.run_id.clone());
            write_atomic(&self.dir.join(INDEX_FILE), &pretty(&ids))?;
        }
        Ok(path)
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.path_for(run_id).map(|p| p.is_file()).unwrap_or(false)
    }

    pub fn load(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let path = self.path_for(run_id)?;
        if !path.is_file() {
            return Err(StoreError::NotFound(run_id.to_string()));
        }
        read_run_file(&path)
    }

    /// Run ids in the order they were first saved.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let _guard = self.index_lock.lock().expect("index lock");
        self.read_index()
    }
}
