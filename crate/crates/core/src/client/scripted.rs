//! Deterministic rule-based backend: the first rule whose substrings all
//! appear in the request's text wins. No network, no cache; every call is
//! recorded for assertions.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ClientError, ModelResponse};

/// One matcher/reply pair. An empty `contains_all` matches every prompt;
/// the rule list must end with such a default.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScriptedRule {
    #[serde(default)]
    pub contains_all: Vec<String>,
    pub reply: String,
}

impl ScriptedRule {
    fn matches(&self, prompt: &str) -> bool {
        self.contains_all.iter().all(|needle| prompt.contains(needle))
    }
}

/// One recorded call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub has_image: bool,
}

#[derive(Deserialize)]
struct RulesFile {
    #[serde(default = "default_true")]
    supports_images: bool,
    rules: Vec<ScriptedRule>,
}

fn default_true() -> bool {
    true
}

pub struct ScriptedBackend {
    id: String,
    supports_images: bool,
    rules: Vec<ScriptedRule>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl ScriptedBackend {
    pub fn new(
        id: &str,
        supports_images: bool,
        rules: Vec<ScriptedRule>,
    ) -> Result<ScriptedBackend, ClientError> {
        if rules.is_empty() {
            return Err(ClientError::NoRules(format!("{id}: rule list is empty")));
        }
        if !rules.last().unwrap().contains_all.is_empty() {
            return Err(ClientError::NoRules(format!(
                "{id}: last rule must be an unconditional default"
            )));
        }
        Ok(ScriptedBackend {
            id: id.to_string(),
            supports_images,
            rules,
            transcript: Mutex::new(Vec::new()),
        })
    }

    pub fn from_rules_file(id: &str, path: &Path) -> Result<ScriptedBackend, ClientError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            ClientError::NoRules(format!("{id}: cannot read {}: {e}", path.display()))
        })?;
        let file: RulesFile = serde_json::from_str(&raw)
            .map_err(|e| ClientError::NoRules(format!("{id}: {}: {e}", path.display())))?;
        ScriptedBackend::new(id, file.supports_images, file.rules)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn supports_images(&self) -> bool {
        self.supports_images
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ModelResponse, ClientError> {
        let has_image = request.has_image();
        if has_image && !self.supports_images {
            return Err(ClientError::ImageNotSupported { backend: self.id.clone() });
        }
        let prompt = request.text_content();
        self.transcript
            .lock()
            .unwrap()
            .push(TranscriptEntry { prompt: prompt.clone(), has_image });
        let reply = self
            .rules
            .iter()
            .find(|rule| rule.matches(&prompt))
            .map(|rule| rule.reply.clone())
            .unwrap_or_default();
        Ok(ModelResponse {
            text: reply,
            latency_ms: 0,
            token_usage: None,
            backend_id: self.id.clone(),
            from_cache: false,
        })
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.transcript.lock().unwrap().len()
    }
}
