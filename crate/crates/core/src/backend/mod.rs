//! Next-token probability sources.
//!
//! A [`LanguageModel`] returns, for a prompt whose answer position is the
//! next token, the probability mass of each requested surface form. Three
//! implementations ship: [`MockBackend`] (pure, offline, deterministic),
//! [`CompletionBackend`] (HTTP completion endpoint with logprobs) and the
//! chat-style [`InstructClient`], which produces a numeric score rather than
//! a distribution.

mod completion;
mod instruct;
mod mock;
mod transport;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use completion::CompletionBackend;
pub use instruct::{parse_score_reply, InstructClient, FORMAT_INSTRUCTIONS, HUMAN_PROMPT, SYSTEM_PROMPT};
pub use mock::{fnv1a64, mock_distribution, MockBackend, MOCK_MULTI_TOKEN_CHARS, MOCK_NORMALIZER};
pub use transport::{ReplayTransport, Transport, TransportFailure, UreqTransport};

/// Probability mass the model assigns to one surface as the next token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbe {
    pub surface: String,
    pub probability: f64,
    pub status: VocabStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabStatus {
    SingleToken,
    MultiToken,
    Absent,
}

/// Tokenizer classification of each queried surface, in query order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabReport {
    entries: Vec<(String, VocabStatus)>,
}

impl VocabReport {
    /// Builds a report; later duplicates of a surface are ignored so that
    /// every surface appears once.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, VocabStatus)>) -> Self {
        let mut out: Vec<(String, VocabStatus)> = Vec::new();
        for (s, st) in entries {
            if !out.iter().any(|(seen, _)| *seen == s) {
                out.push((s, st));
            }
        }
        VocabReport { entries: out }
    }

    pub fn entries(&self) -> &[(String, VocabStatus)] {
        &self.entries
    }

    pub fn status(&self, surface: &str) -> Option<VocabStatus> {
        self.entries.iter().find(|(s, _)| s == surface).map(|(_, st)| *st)
    }

    pub fn with_status(&self, status: VocabStatus) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, st)| *st == status)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn absent(&self) -> Vec<&str> {
        self.with_status(VocabStatus::Absent)
    }

    pub fn multi_token(&self) -> Vec<&str> {
        self.with_status(VocabStatus::MultiToken)
    }
}

/// Spelling variants whose masses are summed for one verbalizer surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceVariants {
    /// Only the surface as written.
    Exact,
    /// `word`, ` word`, `Word` and ` Word`, deduplicated.
    #[default]
    SpaceAndCase,
}

impl SurfaceVariants {
    pub fn expand(self, surface: &str) -> Vec<String> {
        let mut out = vec![surface.to_string()];
        if self == SurfaceVariants::SpaceAndCase && !surface.is_empty() {
            let bare = surface.trim_start();
            let cap = capitalize(bare);
            for v in [bare.to_string(), format!(" {bare}"), cap.clone(), format!(" {cap}")] {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// A source of next-token probabilities.
pub trait LanguageModel: Send + Sync {
    /// One probe per requested surface, in request order.
    fn next_token_mass(&self, prompt: &str, surfaces: &[String]) -> Result<Vec<TokenProbe>>;

    fn vocab_check(&self, surfaces: &[String]) -> Result<VocabReport>;

    /// Number of backend tokens in `text`.
    fn count_tokens(&self, text: &str) -> Result<usize>;

    /// Context budget in tokens, when known.
    fn context_size(&self) -> Option<usize>;

    /// Whether the answer slot may sit anywhere in the prompt (masked LM).
    /// Generative backends only predict the final position.
    fn supports_cloze(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

/// Settings for the HTTP completion and chat clients.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: usize,
    pub top_logprobs: usize,
    /// Never serialized; read from the environment by [`BackendConfig::load_auth`].
    #[serde(skip)]
    pub auth_token: Option<String>,
    /// Environment variable holding the bearer token.
    pub auth_env: String,
    /// Endpoint accepting `{model, prompt}` and returning `{tokens: [...]}`.
    pub tokenize_url: Option<String>,
    pub context_size: Option<usize>,
    /// Minimum spacing between two requests of one client.
    #[serde(with = "duration_secs")]
    pub min_request_interval: Duration,
    #[serde(with = "duration_secs")]
    pub retry_backoff: Duration,
    pub variants: SurfaceVariants,
    /// Fall back to an echo-mode logprob query for surfaces missing from
    /// the top-k list. When false such surfaces are an error.
    pub explicit_logprobs: bool,
    /// Sampling temperature for chat requests; omitted when `None`.
    pub temperature: Option<f64>,
}

pub const DEFAULT_AUTH_ENV: &str = "PROMPTSENT_API_TOKEN";

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "http://127.0.0.1:8000/v1/completions".into(),
            model_name: "meta-llama/Llama-3.1-8B".into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            top_logprobs: 20,
            auth_token: None,
            auth_env: DEFAULT_AUTH_ENV.into(),
            tokenize_url: None,
            context_size: None,
            min_request_interval: Duration::ZERO,
            retry_backoff: Duration::from_millis(250),
            variants: SurfaceVariants::SpaceAndCase,
            explicit_logprobs: true,
            temperature: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_logprobs < 1 {
            return Err(crate::Error::invalid("top_logprobs must be at least 1"));
        }
        if self.endpoint_url.is_empty() {
            return Err(crate::Error::invalid("endpoint_url is empty"));
        }
        Ok(())
    }

    /// Reads the bearer token from `auth_env` if that variable is set.
    pub fn load_auth(mut self) -> Self {
        if self.auth_token.is_none() {
            self.auth_token = std::env::var(&self.auth_env).ok().filter(|t| !t.is_empty());
        }
        self
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !(secs >= 0.0 && secs.is_finite()) {
            return Err(serde::de::Error::custom("duration must be a non-negative number of seconds"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

/// Spaces requests of one client at least `interval` apart.
#[derive(Debug)]
pub(crate) struct RateLimiter {
    interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub(crate) fn new(interval: Duration) -> Self {
        RateLimiter {
            interval,
            last: Mutex::new(None),
        }
    }

    pub(crate) fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.interval {
                std::thread::sleep(self.interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}
