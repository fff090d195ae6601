use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::ChatResponse;

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    digest: String,
    response: ChatResponse,
}

/// Response cache keyed by request digest.
///
/// On disk it is an append-only JSONL file of `{digest, response}` records;
/// later records for the same digest win. Reads take a shared lock, writes
/// are serialized.
#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, ChatResponse>>,
    file: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
        }
    }

    /// Opens (creating if needed) a cache file and loads every record in it.
    ///
    /// A torn final line, as left by a crash mid-write, is skipped.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        if path.exists() {
            let raw = std::fs::read(path)?;
            torn_tail = raw.last().is_some_and(|b| *b != b'\n');
            for (lineno, line) in BufReader::new(raw.as_slice()).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(rec.digest, rec.response);
                    }
                    Err(err) => {
                        tracing::warn!(path = %path.display(), line = lineno + 1, "skipping unreadable cache record: {err}");
                    }
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if torn_tail {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            file: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<ChatResponse> {
        self.entries
            .read()
            .expect("cache lock")
            .get(digest)
            .cloned()
    }

    pub fn put(&self, digest: &str, response: &ChatResponse) -> std::io::Result<()> {
        let mut stored = response.clone();
        stored.from_cache = false;
        let mut file = self.file.lock().expect("cache file lock");
        if let Some(f) = file.as_mut() {
            let record = CacheRecord {
                digest: digest.to_owned(),
                response: stored.clone(),
            };
            let mut line = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(digest.to_owned(), stored);
        Ok(())
    }
}
