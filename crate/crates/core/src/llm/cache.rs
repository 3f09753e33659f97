use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, LlmError};

pub fn sha256_hex(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// Hash of everything that can change a completion.
pub fn cache_key(req: &CompletionRequest, model_id: &str) -> String {
    let material = serde_json::json!([
        req.prompt,
        req.stop,
        req.max_tokens,
        req.temperature,
        model_id
    ]);
    sha256_hex(material.to_string().as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    model: String,
    prompt_hash: String,
    response: String,
}

/// In-memory map backed by one JSON file per key when a directory is given.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: &Path) -> Result<Self, LlmError> {
        fs::create_dir_all(dir).map_err(|e| LlmError::Cache {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(ResponseCache {
            dir: Some(dir.to_path_buf()),
            memory: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, LlmError> {
        if let Some(hit) = self.memory.lock().unwrap().get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.entry_path(key) else {
            return Ok(None);
        };
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(LlmError::Cache {
                    path,
                    message: e.to_string(),
                })
            }
        };
        let entry: Entry = serde_json::from_str(&text).map_err(|e| LlmError::Cache {
            path: path.clone(),
            message: e.to_string(),
        })?;
        self.memory
            .lock()
            .unwrap()
            .insert(key.to_string(), entry.response.clone());
        Ok(Some(entry.response))
    }

    pub fn put(
        &self,
        key: &str,
        req: &CompletionRequest,
        model_id: &str,
        response: &str,
    ) -> Result<(), LlmError> {
        self.memory
            .lock()
            .unwrap()
            .insert(key.to_string(), response.to_string());
        let (Some(dir), Some(path)) = (self.dir.as_ref(), self.entry_path(key)) else {
            return Ok(());
        };
        let cache_err = |message: String| LlmError::Cache {
            path: path.clone(),
            message,
        };
        let entry = Entry {
            key: key.to_string(),
            model: model_id.to_string(),
            prompt_hash: prompt_hash(&req.prompt),
            response: response.to_string(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| cache_err(e.to_string()))?;
        serde_json::to_writer_pretty(&mut tmp, &entry).map_err(|e| cache_err(e.to_string()))?;
        tmp.write_all(b"\n").map_err(|e| cache_err(e.to_string()))?;
        tmp.persist(&path).map_err(|e| cache_err(e.to_string()))?;
        Ok(())
    }
}
