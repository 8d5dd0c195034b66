//! HTTP completion endpoint with logprobs.
//!
//! Top-k read: `POST {model, prompt, max_tokens: 1, logprobs: k, echo: false}`
//! and take `choices[0].logprobs.top_logprobs[0]`, a `{token: logprob}` map.
//!
//! Surfaces missing from the top-k list are read explicitly by echoing
//! `prompt + surface` with `max_tokens: 0, logprobs: 1, echo: true`; the
//! logprob of the first echoed token starting at or after the end of the
//! prompt is the first-sub-token probability of the surface.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};

use super::transport::with_retries;
use super::{BackendConfig, LanguageModel, RateLimiter, TokenProbe, Transport, UreqTransport, VocabReport, VocabStatus};
use crate::error::{Error, Result};

pub struct CompletionBackend {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    limiter: RateLimiter,
}

struct EchoRead {
    token: String,
    logprob: f64,
    tokens_after_prompt: usize,
}

fn malformed(what: &str) -> Error {
    Error::Transport {
        attempts: 1,
        message: format!("unexpected response shape: {what}"),
    }
}

impl CompletionBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let transport = Arc::new(UreqTransport::new(config.timeout));
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        config.validate()?;
        let limiter = RateLimiter::new(config.min_request_interval);
        Ok(CompletionBackend {
            config,
            transport,
            limiter,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value> {
        with_retries(self.config.max_retries, self.config.retry_backoff, || {
            self.limiter.wait();
            self.transport.post_json(url, body, self.config.auth_token.as_deref())
        })
    }

    fn top_logprobs(&self, prompt: &str) -> Result<BTreeMap<String, f64>> {
        let body = json!({
            "model": self.config.model_name,
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.config.top_logprobs,
            "echo": false,
        });
        let resp = self.post(&self.config.endpoint_url, &body)?;
        let top = resp
            .pointer("/choices/0/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or_else(|| malformed("missing choices[0].logprobs.top_logprobs[0]"))?;
        top.iter()
            .map(|(tok, lp)| {
                lp.as_f64()
                    .map(|lp| (tok.clone(), lp))
                    .ok_or_else(|| malformed("non-numeric logprob"))
            })
            .collect()
    }

    fn echo_read(&self, prompt: &str, surface: &str) -> Result<EchoRead> {
        let body = json!({
            "model": self.config.model_name,
            "prompt": format!("{prompt}{surface}"),
            "max_tokens": 0,
            "logprobs": 1,
            "echo": true,
        });
        let resp = self.post(&self.config.endpoint_url, &body)?;
        let lp = resp.pointer("/choices/0/logprobs").ok_or_else(|| malformed("missing logprobs"))?;
        let unsupported = || Error::Unsupported("explicit logprob queries (echo with token offsets)".into());
        let tokens = lp.get("tokens").and_then(Value::as_array).ok_or_else(unsupported)?;
        let logprobs = lp.get("token_logprobs").and_then(Value::as_array).ok_or_else(unsupported)?;
        let offsets = lp.get("text_offset").and_then(Value::as_array).ok_or_else(unsupported)?;
        if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
            return Err(malformed("echo arrays differ in length"));
        }
        let prompt_len = prompt.chars().count() as u64;
        let offsets: Vec<u64> = offsets
            .iter()
            .map(|o| o.as_u64().ok_or_else(|| malformed("non-integer text_offset")))
            .collect::<Result<_>>()?;
        let first = offsets
            .iter()
            .position(|&o| o >= prompt_len)
            .ok_or_else(|| malformed("echo returned no token after the prompt"))?;
        if offsets[first] != prompt_len {
            return Err(Error::Unsupported(format!(
                "surface `{surface}` merges with the final prompt token"
            )));
        }
        let token = tokens[first].as_str().ok_or_else(|| malformed("non-string token"))?;
        let logprob = logprobs[first]
            .as_f64()
            .ok_or_else(|| malformed("missing logprob for the answer token"))?;
        Ok(EchoRead {
            token: token.to_string(),
            logprob,
            tokens_after_prompt: tokens.len() - first,
        })
    }

    fn tokenize(&self, text: &str) -> Result<usize> {
        let url = self
            .config
            .tokenize_url
            .as_deref()
            .ok_or_else(|| Error::Unsupported("a tokenize endpoint".into()))?;
        let body = json!({
            "model": self.config.model_name,
            "prompt": text,
            "add_special_tokens": false,
        });
        let resp = self.post(url, &body)?;
        if let Some(tokens) = resp.get("tokens").and_then(Value::as_array) {
            Ok(tokens.len())
        } else if let Some(n) = resp.get("count").and_then(Value::as_u64) {
            Ok(n as usize)
        } else {
            Err(malformed("tokenize response has neither tokens nor count"))
        }
    }

    fn check_context(&self, prompt: &str) -> Result<()> {
        if let (Some(context_size), Some(_)) = (self.config.context_size, &self.config.tokenize_url) {
            let prompt_tokens = self.tokenize(prompt)?;
            if prompt_tokens > context_size {
                return Err(Error::ContextOverflow {
                    prompt_tokens,
                    context_size,
                });
            }
        }
        Ok(())
    }
}

fn rank(s: VocabStatus) -> u8 {
    match s {
        VocabStatus::Absent => 0,
        VocabStatus::MultiToken => 1,
        VocabStatus::SingleToken => 2,
    }
}

impl LanguageModel for CompletionBackend {
    fn next_token_mass(&self, prompt: &str, surfaces: &[String]) -> Result<Vec<TokenProbe>> {
        if prompt.is_empty() {
            return Err(Error::invalid("prompt is empty"));
        }
        if surfaces.is_empty() {
            return Err(Error::invalid("no surfaces requested"));
        }
        self.check_context(prompt)?;
        let top = self.top_logprobs(prompt)?;

        let mut probes = Vec::with_capacity(surfaces.len());
        for surface in surfaces {
            // first-token text -> probability, so two variants sharing a
            // first token are not double counted
            let mut mass: BTreeMap<String, f64> = BTreeMap::new();
            let mut status = VocabStatus::Absent;
            for variant in self.config.variants.expand(surface) {
                if variant.trim().is_empty() {
                    continue;
                }
                if let Some(lp) = top.get(&variant) {
                    mass.insert(variant.clone(), lp.exp());
                    status = VocabStatus::SingleToken;
                } else if self.config.explicit_logprobs {
                    let read = self.echo_read(prompt, &variant)?;
                    let st = if read.tokens_after_prompt == 1 {
                        VocabStatus::SingleToken
                    } else {
                        VocabStatus::MultiToken
                    };
                    if rank(st) > rank(status) {
                        status = st;
                    }
                    mass.entry(read.token).or_insert(read.logprob.exp());
                } else {
                    return Err(Error::Unsupported(format!(
                        "logprob for `{variant}` outside the top {} (explicit queries disabled)",
                        self.config.top_logprobs
                    )));
                }
            }
            let p: f64 = mass.values().sum();
            if !p.is_finite() {
                return Err(malformed("non-finite probability"));
            }
            probes.push(TokenProbe {
                surface: surface.clone(),
                probability: p.clamp(0.0, 1.0),
                status,
            });
        }
        Ok(probes)
    }

    fn vocab_check(&self, surfaces: &[String]) -> Result<VocabReport> {
        if self.config.tokenize_url.is_none() {
            return Err(Error::Unsupported("a tokenize endpoint".into()));
        }
        let mut entries = Vec::with_capacity(surfaces.len());
        for s in surfaces {
            let bare = s.trim();
            let status = if bare.is_empty() {
                VocabStatus::Absent
            } else {
                let counts = [self.tokenize(bare)?, self.tokenize(&format!(" {bare}"))?];
                if counts.contains(&1) {
                    VocabStatus::SingleToken
                } else if counts.iter().all(|&c| c == 0) {
                    VocabStatus::Absent
                } else {
                    VocabStatus::MultiToken
                }
            };
            entries.push((s.clone(), status));
        }
        Ok(VocabReport::from_entries(entries))
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        self.tokenize(text)
    }

    fn context_size(&self) -> Option<usize> {
        self.config.context_size
    }

    fn describe(&self) -> String {
        format!("completion({} @ {})", self.config.model_name, self.config.endpoint_url)
    }
}
