//! Content-addressed response cache.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompting::{ChatMessage, ChatRequest};

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
}

/// SHA-256 (hex) over model, ordered role-tagged messages, temperature and
/// top_p.
pub fn cache_key(req: &ChatRequest) -> String {
    let material = KeyMaterial {
        model: &req.model,
        messages: &req.messages,
        temperature: req.temperature,
        top_p: req.top_p,
    };
    let bytes = serde_json::to_vec(&material).expect("chat requests serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub model: String,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    request: ChatRequest,
    response: CachedResponse,
}

/// Response cache, either purely in memory or backed by one JSON file per key
/// (`<dir>/<key>.json`, holding the request and the response).
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, CachedResponse>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir: Some(dir),
            memory: Mutex::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<CachedResponse>> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.path(key) else {
            return Ok(None);
        };
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let file: CacheFile =
            serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), file.response.clone());
        Ok(Some(file.response))
    }

    /// Stores a response. Disk writes go to a temporary file that is then
    /// renamed into place, so readers never see a partial entry.
    pub fn put(&self, key: &str, request: &ChatRequest, response: CachedResponse) -> std::io::Result<()> {
        if let (Some(dir), Some(path)) = (&self.dir, self.path(key)) {
            let file = CacheFile {
                key: key.to_string(),
                request: request.clone(),
                response: response.clone(),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            serde_json::to_writer_pretty(&mut tmp, &file).map_err(std::io::Error::other)?;
            tmp.write_all(b"\n")?;
            tmp.persist(path).map_err(|e| e.error)?;
        }
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), response);
        Ok(())
    }
}
