//! Render → complete → parse with format retries.
//!
//! A format violation (unparseable payload, wrong shape, out-of-range value)
//! triggers a fresh request that bypasses the cache read; content violations
//! are final. The fresh response overwrites the cache entry, so a re-run
//! replays the response that finally parsed.

use thiserror::Error;

use crate::llm::{CachePolicy, ChatRequest, Completer, LlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// The payload's shape is wrong; asking again may fix it.
    Format,
    /// The payload parsed but says something unacceptable.
    Content,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind:?} violation: {message}")]
pub struct ParseViolation {
    pub kind: ViolationKind,
    pub message: String,
}

impl ParseViolation {
    pub fn format(message: impl Into<String>) -> Self {
        Self {
            kind: ViolationKind::Format,
            message: message.into(),
        }
    }

    pub fn content(message: impl Into<String>) -> Self {
        Self {
            kind: ViolationKind::Content,
            message: message.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        self.kind == ViolationKind::Format
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Upstream(#[from] LlmError),
    #[error("{violation} after {attempts} attempt(s)")]
    Unparseable {
        violation: ParseViolation,
        raw: String,
        attempts: u32,
    },
}

impl StageError {
    pub fn raw_payload(&self) -> Option<&str> {
        match self {
            StageError::Unparseable { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub raw: String,
    /// Format retries spent before this value parsed.
    pub retries: u32,
}

pub async fn complete_parsed<T, F>(
    client: &dyn Completer,
    req: &ChatRequest,
    format_retries: u32,
    parse: F,
) -> Result<Parsed<T>, StageError>
where
    F: Fn(&str) -> Result<T, ParseViolation>,
{
    let mut attempt = 0;
    loop {
        let policy = if attempt == 0 {
            CachePolicy::Use
        } else {
            CachePolicy::Refresh
        };
        let completion = client.complete_with(req, policy).await?;
        match parse(&completion.text) {
            Ok(value) => {
                return Ok(Parsed {
                    value,
                    raw: completion.text,
                    retries: attempt,
                })
            }
            Err(violation) => {
                tracing::debug!(tag = %req.request_tag, attempt, "parse failure: {violation}");
                if !violation.is_retryable() || attempt >= format_retries {
                    return Err(StageError::Unparseable {
                        violation,
                        raw: completion.text,
                        attempts: attempt + 1,
                    });
                }
            }
        }
        attempt += 1;
    }
}


#[cfg(test)]
mod tests {
    use super::testing::Scripted;
    use super::*;

    fn parse_int(s: &str) -> Result<i64, ParseViolation> {
        if s == "bad" {
            return Err(ParseViolation::content("bad"));
        }
        s.trim().parse().map_err(|_| ParseViolation::format("not an int"))
    }

    #[tokio::test]
    async fn retries_format_violations_with_refresh() {
        let client = Scripted::new(["garbage", "42"]);
        let req = ChatRequest::new("m", "p", "t");
        let out = complete_parsed(&client, &req, 2, parse_int).await.unwrap();
        assert_eq!(out.value, 42);
        assert_eq!(out.retries, 1);
        let seen = client.seen.lock().unwrap();
        assert_eq!(seen[0].1, CachePolicy::Use);
        assert_eq!(seen[1].1, CachePolicy::Refresh);
    }

    #[tokio::test]
    async fn content_violations_are_final() {
        let client = Scripted::new(["bad", "1"]);
        let req = ChatRequest::new("m", "p", "t");
        let err = complete_parsed(&client, &req, 3, parse_int).await.unwrap_err();
        assert_eq!(err.raw_payload(), Some("bad"));
        assert_eq!(client.calls(), 1);
    }

    #[tokio::test]
    async fn exhaustion_keeps_last_payload() {
        let client = Scripted::new(["x", "y"]);
        let req = ChatRequest::new("m", "p", "t");
        match complete_parsed(&client, &req, 1, parse_int).await.unwrap_err() {
            StageError::Unparseable { raw, attempts, .. } => {
                assert_eq!(raw, "y");
                assert_eq!(attempts, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
