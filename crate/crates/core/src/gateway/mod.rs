//! Model access behind a narrow trait.
//!
//! Synthesis code never talks to a model directly; it builds requests out of
//! context items and hands them to a [`Gateway`]. The mock implementation is
//! a pure function of the request and a seed, which is what the test suite
//! and the fixture generator run against. The HTTP implementation adapts the
//! same trait to a remote endpoint with retry and admission control.

pub mod admission;
pub mod http;
pub mod mock;

use crate::types::ModelTag;
use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// What kind of thing a context item is. Frame references stand in for
/// visual input; captions and other text ride along as text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextItemKind {
    FrameRef,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextItem {
    pub kind: ContextItemKind,
    pub payload: String,
}

impl ContextItem {
    pub fn frame(payload: impl Into<String>) -> Self {
        ContextItem {
            kind: ContextItemKind::FrameRef,
            payload: payload.into(),
        }
    }

    pub fn caption(payload: impl Into<String>) -> Self {
        ContextItem {
            kind: ContextItemKind::Caption,
            payload: payload.into(),
        }
    }
}

/// Short stable content digest used for request and record identifiers.
pub(crate) fn digest16(parts: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Counts the visual items in a context. Score records carry this so the
/// reference-context contract can be audited after the fact.
pub fn frame_count(items: &[ContextItem]) -> u64 {
    items
        .iter()
        .filter(|i| i.kind == ContextItemKind::FrameRef)
        .count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// Task prompt. The first line names the task (`TASK: <name>`), which the
    /// mock dispatches on.
    pub prompt: String,
    pub context_items: Vec<ContextItem>,
    pub max_tokens: u32,
    pub seed: u64,
}

impl GenerateRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens is zero".into()));
        }
        if self.context_items.iter().any(|i| i.payload.is_empty()) {
            return Err(GatewayError::InvalidRequest(
                "context item with empty payload".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context_items: Vec<ContextItem>,
    pub response: String,
    pub model_tag: ModelTag,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.response.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty response".into()));
        }
        if self.context_items.is_empty() {
            return Err(GatewayError::InvalidRequest("empty context".into()));
        }
        if self.context_items.iter().any(|i| i.payload.is_empty()) {
            return Err(GatewayError::InvalidRequest(
                "context item with empty payload".into(),
            ));
        }
        Ok(())
    }
}

/// Rate and retry policy for remote gateways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayPolicy {
    pub max_concurrent: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for GatewayPolicy {
    fn default() -> Self {
        GatewayPolicy {
            max_concurrent: 4,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 250,
        }
    }
}

impl GatewayPolicy {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Delay before retry attempt `k` (1-based): base * 2^(k-1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrent == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_concurrent must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

pub trait Gateway: Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<String, GatewayError>;
    fn score(&self, req: &ScoreRequest) -> Result<crate::types::ScoreRecord, GatewayError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation_rejects_degenerate_inputs() {
        let bad = GenerateRequest {
            prompt: "  ".into(),
            context_items: vec![],
            max_tokens: 16,
            seed: 0,
        };
        assert!(matches!(
            bad.validate(),
            Err(GatewayError::InvalidRequest(_))
        ));

        let bad = ScoreRequest {
            context_items: vec![],
            response: "an answer".into(),
            model_tag: ModelTag::Policy,
        };
        assert!(matches!(
            bad.validate(),
            Err(GatewayError::InvalidRequest(_))
        ));

        let ok = ScoreRequest {
            context_items: vec![ContextItem::frame("clip-a#f0")],
            response: "an answer".into(),
            model_tag: ModelTag::Reference,
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn frame_count_ignores_text_items() {
        let items = vec![
            ContextItem::caption("a query"),
            ContextItem::frame("c#f0"),
            ContextItem::frame("c#f1"),
        ];
        assert_eq!(frame_count(&items), 2);
    }

    #[test]
    fn backoff_doubles_per_attempt() {
        let policy = GatewayPolicy {
            backoff_base_ms: 100,
            ..GatewayPolicy::default()
        };
        assert_eq!(policy.backoff(1), Duration::from_millis(100));
        assert_eq!(policy.backoff(2), Duration::from_millis(200));
        assert_eq!(policy.backoff(3), Duration::from_millis(400));
    }
}
