//! Model backend abstraction.
//!
//! Every model call in the pipeline goes through [`Backend`], with two
//! implementations: [`RemoteBackend`] speaking the de-facto chat-completions
//! HTTP shape, and [`MockBackend`], a deterministic fixture-driven stand-in
//! used by all gating tests. The mock never fabricates output: anything it
//! cannot derive from its fixtures is a hard `FixtureMiss`.

mod mock;
mod remote;

pub use mock::MockBackend;
pub use remote::RemoteBackend;

use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::estimate_tokens;

/// Which pipeline stage a backend call serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Extract,
    Similarity,
    Decompose,
    Reason,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Extract => "extract",
            OpKind::Similarity => "similarity",
            OpKind::Decompose => "decompose",
            OpKind::Reason => "reason",
        }
    }
}

/// Text-only completion request. `inputs` carries the structured operation
/// inputs that the prompt embeds (e.g. the two descriptions of a similarity
/// call), so the mock backend can act on them without re-parsing prose.
#[derive(Debug, Clone, Serialize)]
pub struct TextRequest {
    pub op: OpKind,
    pub prompt: String,
    pub inputs: Vec<String>,
}

/// Multi-image completion request.
#[derive(Debug, Clone, Serialize)]
pub struct MultimodalRequest {
    pub op: OpKind,
    pub prompt: String,
    pub image_refs: Vec<String>,
}

/// Canonical hash of a call's logical inputs; stable across processes.
pub fn canonical_hash(op: OpKind, prompt: &str, images: &[String], inputs: &[String]) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        op: &'static str,
        prompt: &'a str,
        images: &'a [String],
        inputs: &'a [String],
    }
    let json = serde_json::to_string(&Canonical {
        op: op.as_str(),
        prompt,
        images,
        inputs,
    })
    .expect("canonical request encoding cannot fail");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(digest)
}

/// Short form of the canonical hash used as a fixture key.
pub fn short_hash(full: &str) -> &str {
    &full[..16.min(full.len())]
}

/// Audit record appended for every backend call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendCallRecord {
    pub op: OpKind,
    pub prompt_hash: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency_ms: u64,
    pub attempts: u32,
    pub outcome: String,
}

/// Thread-safe call log owned by each backend instance.
#[derive(Debug, Default)]
pub struct CallLog {
    records: Mutex<Vec<BackendCallRecord>>,
}

impl CallLog {
    pub fn append(&self, record: BackendCallRecord) {
        self.records.lock().expect("call log poisoned").push(record);
    }

    pub fn snapshot(&self) -> Vec<BackendCallRecord> {
        self.records.lock().expect("call log poisoned").clone()
    }

    /// Line-delimited JSON rendering of the log.
    pub fn to_jsonl(&self) -> String {
        self.snapshot()
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub(crate) fn record_call(
    log: &CallLog,
    op: OpKind,
    hash: &str,
    prompt: &str,
    outcome: &Result<String>,
    attempts: u32,
    started: std::time::Instant,
) {
    let (completion_tokens, outcome_str) = match outcome {
        Ok(text) => (estimate_tokens(text), "ok".to_string()),
        Err(e) => (0, format!("error: {e}")),
    };
    log.append(BackendCallRecord {
        op,
        prompt_hash: short_hash(hash).to_string(),
        prompt_tokens: estimate_tokens(prompt),
        completion_tokens,
        latency_ms: started.elapsed().as_millis() as u64,
        attempts,
        outcome: outcome_str,
    });
}

/// Uniform interface over the remote provider and the deterministic mock.
pub trait Backend: Send + Sync {
    fn complete_text(&self, req: &TextRequest) -> Result<String>;
    fn complete_multimodal(&self, req: &MultimodalRequest) -> Result<String>;
    /// Context window in tokens, when the profile declares one.
    fn context_limit_tokens(&self) -> Option<usize>;
    /// Snapshot of every call made through this instance.
    fn records(&self) -> Vec<BackendCallRecord>;
    fn kind(&self) -> &'static str;
}

/// Declarative backend configuration, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendProfile {
    Mock {
        /// Directory holding the mock's fixtures (scene surrogates, lexicon).
        fixture_dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scripted_answers: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context_limit_tokens: Option<usize>,
    },
    RemoteHttp {
        /// Full URL of the chat-completions endpoint.
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the API key.
        #[serde(default = "default_auth_env")]
        auth_token_env: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context_limit_tokens: Option<usize>,
    },
}

fn default_auth_env() -> String {
    "MODEL_API_KEY".to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    2
}

/// Instantiate the backend a profile describes.
pub fn build_backend(profile: &BackendProfile) -> Result<Box<dyn Backend>> {
    match profile {
        BackendProfile::Mock {
            fixture_dir,
            scripted_answers,
            context_limit_tokens,
        } => Ok(Box::new(MockBackend::new(
            fixture_dir.clone(),
            scripted_answers.clone(),
            *context_limit_tokens,
        )?)),
        BackendProfile::RemoteHttp {
            endpoint,
            model,
            auth_token_env,
            timeout_secs,
            max_retries,
            context_limit_tokens,
        } => {
            if endpoint.is_empty() || model.is_empty() {
                return Err(Error::InvalidArgument(
                    "remote backend requires endpoint and model".into(),
                ));
            }
            Ok(Box::new(RemoteBackend::new(
                endpoint.clone(),
                model.clone(),
                auth_token_env.clone(),
                *timeout_secs,
                *max_retries,
                *context_limit_tokens,
            )))
        }
    }
}
