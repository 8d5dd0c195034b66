use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TransportFailure {
    pub message: String,
    /// Network faults, 429 and 5xx are worth retrying; other 4xx are not.
    pub retryable: bool,
}

impl TransportFailure {
    fn for_status(status: u16, body: &str) -> Self {
        TransportFailure {
            message: format!("HTTP {status}: {body}"),
            retryable: status == 429 || status >= 500,
        }
    }
}

/// JSON-over-HTTP POST.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Value, TransportFailure>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Value, TransportFailure> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| TransportFailure {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| TransportFailure {
            message: e.to_string(),
            retryable: true,
        })?;
        if status >= 400 {
            return Err(TransportFailure::for_status(status, &text));
        }
        serde_json::from_str(&text).map_err(|e| TransportFailure {
            message: format!("response is not JSON: {e}"),
            retryable: false,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
struct Interaction {
    request: Value,
    #[serde(default)]
    response: Value,
    #[serde(default)]
    status: Option<u16>,
    /// Simulated network failure message.
    #[serde(default)]
    error: Option<String>,
    /// How many times this entry may answer; unlimited when absent.
    #[serde(default)]
    max_uses: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct Fixture {
    interactions: Vec<Interaction>,
}

/// Answers requests from recorded request/response pairs.
///
/// A request matches an entry when its JSON body is equal to the recorded
/// one; the URL is not compared. Entries are tried in file order, skipping
/// those whose `max_uses` is spent.
#[derive(Debug)]
pub struct ReplayTransport {
    interactions: Vec<Interaction>,
    state: Mutex<ReplayState>,
}

#[derive(Debug, Default)]
struct ReplayState {
    uses: Vec<usize>,
    requests: Vec<Value>,
}

impl ReplayTransport {
    pub fn from_json(json: &str) -> Result<Self> {
        let fixture: Fixture = serde_json::from_str(json)?;
        let uses = vec![0; fixture.interactions.len()];
        Ok(ReplayTransport {
            interactions: fixture.interactions,
            state: Mutex::new(ReplayState {
                uses,
                requests: Vec::new(),
            }),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Bodies of all requests seen so far.
    pub fn requests(&self) -> Vec<Value> {
        self.state.lock().unwrap_or_else(|p| p.into_inner()).requests.clone()
    }
}

impl Transport for ReplayTransport {
    fn post_json(&self, _url: &str, body: &Value, _bearer: Option<&str>) -> Result<Value, TransportFailure> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        state.requests.push(body.clone());
        let hit = self.interactions.iter().enumerate().find(|(i, it)| {
            it.request == *body && it.max_uses.is_none_or(|max| state.uses[*i] < max)
        });
        let Some((idx, it)) = hit else {
            return Err(TransportFailure {
                message: format!("no recorded response for request {body}"),
                retryable: false,
            });
        };
        state.uses[idx] += 1;
        if let Some(msg) = &it.error {
            return Err(TransportFailure {
                message: msg.clone(),
                retryable: true,
            });
        }
        match it.status {
            Some(s) if s >= 400 => Err(TransportFailure::for_status(s, &it.response.to_string())),
            _ => Ok(it.response.clone()),
        }
    }
}

/// Runs `call` up to `1 + max_retries` times while failures are retryable.
pub(crate) fn with_retries<T>(
    max_retries: usize,
    backoff: Duration,
    mut call: impl FnMut() -> Result<T, TransportFailure>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match call() {
            Ok(v) => return Ok(v),
            Err(f) if f.retryable && attempt <= max_retries => {
                log::warn!("request failed (attempt {attempt}): {}", f.message);
                if !backoff.is_zero() {
                    std::thread::sleep(backoff.saturating_mul(1 << (attempt - 1).min(6)));
                }
            }
            Err(f) => {
                return Err(Error::Transport {
                    attempts: attempt,
                    message: f.message,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn replay_matches_body_and_counts_uses() {
        let t = ReplayTransport::from_json(
            r#"{"interactions":[
                {"request":{"a":1},"error":"connection reset","max_uses":1},
                {"request":{"a":1},"response":{"ok":true}}
            ]}"#,
        )
        .unwrap();
        let first = t.post_json("u", &json!({"a":1}), None);
        assert!(first.unwrap_err().retryable);
        assert_eq!(t.post_json("u", &json!({"a":1}), None).unwrap(), json!({"ok":true}));
        assert!(!t.post_json("u", &json!({"a":2}), None).unwrap_err().retryable);
        assert_eq!(t.requests().len(), 3);
    }

    #[test]
    fn retries_then_succeeds() {
        let mut n = 0;
        let out = with_retries(2, Duration::ZERO, || {
            n += 1;
            if n < 3 {
                Err(TransportFailure {
                    message: "down".into(),
                    retryable: true,
                })
            } else {
                Ok(n)
            }
        })
        .unwrap();
        assert_eq!(out, 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let mut n = 0;
        let err = with_retries(1, Duration::ZERO, || -> Result<(), TransportFailure> {
            n += 1;
            Err(TransportFailure {
                message: "down".into(),
                retryable: true,
            })
        })
        .unwrap_err();
        assert_eq!(n, 2);
        assert!(matches!(err, Error::Transport { attempts: 2, .. }));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let mut n = 0;
        let err = with_retries(5, Duration::ZERO, || -> Result<(), TransportFailure> {
            n += 1;
            Err(TransportFailure::for_status(400, "bad request"))
        })
        .unwrap_err();
        assert_eq!(n, 1);
        assert!(matches!(err, Error::Transport { attempts: 1, .. }));
        assert!(TransportFailure::for_status(503, "").retryable);
        assert!(TransportFailure::for_status(429, "").retryable);
    }
}
