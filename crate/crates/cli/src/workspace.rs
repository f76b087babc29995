//! File-backed workspace shared by the CLI and the service.
//!
//! ```text
//! <root>/codebooks/<id>/versions.json    version history, oldest first
//! <root>/codebooks/<id>/<version>.json   one immutable document per version
//! <root>/runs/                           run records (see RunStore)
//! <root>/cache/                          response cache
//! <root>/passages.jsonl                  default corpus for new runs
//! <root>/gold.csv                        gold labels for reports
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use coda_core::codebook::{parse_codebook, Codebook, CodebookError};
use coda_core::corpus::{load_gold, load_passages, CorpusError, GoldError, GoldLabels, Passage};
use coda_core::experiment::{write_atomic, RunStore, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WORKSPACE_ENV: &str = "CODA_WORKSPACE";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("unknown codebook {0:?}")]
    UnknownCodebook(String),
    #[error("codebook {id:?} has no version {version:?}")]
    UnknownVersion { id: String, version: String },
    #[error("invalid codebook id {0:?} (use lowercase letters, digits, '-' and '_')")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{0}")]
    Codebook(#[from] CodebookError),
    #[error("{0}")]
    Gold(#[from] GoldError),
    #[error("{0}")]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionEntry {
    pub version: String,
    pub created: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    runs: RunStore,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

fn valid_version(v: &str) -> bool {
    !v.is_empty() && v.bytes().all(|b| b.is_ascii_hexdigit())
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, WorkspaceError> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

impl Workspace {
    /// Opens `root`, creating the directory layout if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        for sub in ["codebooks", "cache"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let runs = RunStore::open(root.join("runs"))?;
        Ok(Workspace { root, runs })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs(&self) -> &RunStore {
        &self.runs
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn codebook_dir(&self, id: &str) -> Result<PathBuf, WorkspaceError> {
        if !valid_id(id) {
            return Err(WorkspaceError::InvalidId(id.to_string()));
        }
        Ok(self.root.join("codebooks").join(id))
    }

    pub fn codebook_ids(&self) -> Result<Vec<String>, WorkspaceError> {
        let dir = self.root.join("codebooks");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("versions.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Version history of a codebook, oldest first. A version that was
    /// restored by a later edit appears again at that point.
    pub fn versions(&self, id: &str) -> Result<Vec<VersionEntry>, WorkspaceError> {
        let path = self.codebook_dir(id)?.join("versions.json");
        let bytes = read_optional(&path)?.ok_or_else(|| WorkspaceError::UnknownCodebook(id.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| WorkspaceError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    pub fn latest(&self, id: &str) -> Result<Codebook, WorkspaceError> {
        let versions = self.versions(id)?;
        let last = versions
            .last()
            .ok_or_else(|| WorkspaceError::UnknownCodebook(id.to_string()))?;
        self.codebook(id, &last.version)
    }

    pub fn codebook(&self, id: &str, version: &str) -> Result<Codebook, WorkspaceError> {
        let unknown = || WorkspaceError::UnknownVersion {
            id: id.to_string(),
            version: version.to_string(),
        };
        if !valid_version(version) {
            return Err(unknown());
        }
        let dir = self.codebook_dir(id)?;
        if !dir.join("versions.json").is_file() {
            return Err(WorkspaceError::UnknownCodebook(id.to_string()));
        }
        let path = dir.join(format!("{version}.json"));
        let bytes = read_optional(&path)?.ok_or_else(unknown)?;
        let cb = parse_codebook(&bytes)?;
        if cb.version != version {
            return Err(WorkspaceError::Corrupt {
                path,
                message: format!("content hashes to {}", cb.version),
            });
        }
        Ok(cb)
    }

    /// Finds the codebook that has `version`, preferring `hint`.
    pub fn find_version(&self, hint: Option<&str>, version: &str) -> Result<(String, Codebook), WorkspaceError> {
        if let Some(id) = hint {
            if let Ok(cb) = self.codebook(id, version) {
                return Ok((id.to_string(), cb));
            }
        }
        for id in self.codebook_ids()? {
            if let Ok(cb) = self.codebook(&id, version) {
                return Ok((id, cb));
            }
        }
        Err(WorkspaceError::UnknownVersion {
            id: hint.unwrap_or("*").to_string(),
            version: version.to_string(),
        })
    }

    /// Stores `cb` as the newest version of codebook `id`. Storing the
    /// current latest version again is a no-op.
    pub fn store_version(&self, id: &str, cb: &Codebook, parent: Option<&str>) -> Result<VersionEntry, WorkspaceError> {
        let dir = self.codebook_dir(id)?;
        let mut versions = match self.versions(id) {
            Ok(v) => v,
            Err(WorkspaceError::UnknownCodebook(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        if let Some(last) = versions.last() {
            if last.version == cb.version {
                return Ok(last.clone());
            }
        }
        write_atomic(
            &dir.join(format!("{}.json", cb.version)),
            cb.to_document_json().as_bytes(),
        )?;
        let entry = VersionEntry {
            version: cb.version.clone(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            parent: parent.map(String::from),
        };
        versions.push(entry.clone());
        let mut index = serde_json::to_vec_pretty(&versions).expect("version index serializes");
        index.push(b'\n');
        write_atomic(&dir.join("versions.json"), &index)?;
        Ok(entry)
    }

    pub fn gold(&self) -> Result<Option<GoldLabels>, WorkspaceError> {
        match read_optional(&self.root.join("gold.csv"))? {
            Some(bytes) => Ok(Some(load_gold(&bytes)?)),
            None => Ok(None),
        }
    }

    pub fn passages(&self) -> Result<Option<Vec<Passage>>, WorkspaceError> {
        match read_optional(&self.root.join("passages.jsonl"))? {
            Some(bytes) => Ok(Some(load_passages(&bytes)?)),
            None => Ok(None),
        }
    }
}
