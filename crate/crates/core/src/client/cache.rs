//! Content-addressed on-disk response cache: one file per request digest,
//! holding the stored response plus the request fingerprint. Long runs
//! against paid backends resume from here.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{ClientError, ModelResponse};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request_fingerprint: String,
    backend_id: String,
    model_name: String,
    response: ModelResponse,
}

pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: PathBuf) -> Result<ResponseCache, ClientError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| ClientError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(ResponseCache { dir })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Look up a stored response. Corrupt entries read as misses.
    pub fn get(&self, key: &str) -> Option<ModelResponse> {
        let raw = std::fs::read_to_string(self.path_for(key)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&raw).ok()?;
        if entry.request_fingerprint != key {
            return None;
        }
        let mut response = entry.response;
        response.from_cache = true;
        Some(response)
    }

    /// Store a response. Written to a temp file then renamed, so concurrent
    /// writers of the same key land whole files; values for one key are
    /// equal by construction, so last-write-wins is benign.
    pub fn put(
        &self,
        key: &str,
        backend_id: &str,
        model_name: &str,
        response: &ModelResponse,
    ) -> Result<(), ClientError> {
        let entry = CacheEntry {
            request_fingerprint: key.to_string(),
            backend_id: backend_id.to_string(),
            model_name: model_name.to_string(),
            response: response.clone(),
        };
        let body = serde_json::to_string(&entry)
            .map_err(|e| ClientError::Cache(format!("serialize entry: {e}")))?;
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, body)
            .map_err(|e| ClientError::Cache(format!("write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, self.path_for(key))
            .map_err(|e| ClientError::Cache(format!("rename into place: {e}")))?;
        Ok(())
    }

    /// Number of stored entries.
    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|entries| {
                entries
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().map(|x| x == "json").unwrap_or(false))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
