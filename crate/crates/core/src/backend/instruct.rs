//! Chat-style scoring: the model is asked for a single number in [-1, 1].
//!
//! Request: `POST {model, messages: [{role, content}, ...]}`; reply read from
//! `choices[0].message.content`. The format instruction is appended to the
//! user message. Replies that are not a bare decimal number in range are
//! retried, never clamped.

use std::sync::Arc;

use serde_json::{json, Value};

use super::transport::with_retries;
use super::{BackendConfig, RateLimiter, Transport, UreqTransport};
use crate::corpus::Document;
use crate::error::{Error, Result};

pub const SYSTEM_PROMPT: &str = "You are a helpful assistant. Analyze the letter of recommendation submitted by the user and assess how positive the letter writer is regarding the ability level and future prospects of the job market candidate. Take into account that letter writers tend to be overly optimistic regarding job market candidates. Only give the maximum score to candidates deemed exceptional. Most candidates should get a medium score (around 0).";

pub const HUMAN_PROMPT: &str = "Below is a letter of recommendation for a job market candidate: [X]";

pub const FORMAT_INSTRUCTIONS: &str = "The only admissible output is a floating point number between -1 and 1.";

/// Accepts optional surrounding whitespace, an optional sign, one or more
/// digits and an optional fractional part. Returns `None` for anything else
/// or for values outside [-1, 1].
pub fn parse_score_reply(reply: &str) -> Option<f64> {
    let s = reply.trim();
    let unsigned = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match unsigned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (unsigned, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    let v: f64 = s.parse().ok()?;
    (-1.0..=1.0).contains(&v).then_some(v)
}

pub struct InstructClient {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    limiter: RateLimiter,
    system_prompt: String,
    human_template: String,
    format_instructions: String,
}

impl InstructClient {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let transport = Arc::new(UreqTransport::new(config.timeout));
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        config.validate()?;
        Ok(InstructClient {
            limiter: RateLimiter::new(config.min_request_interval),
            config,
            transport,
            system_prompt: SYSTEM_PROMPT.to_string(),
            human_template: HUMAN_PROMPT.to_string(),
            format_instructions: FORMAT_INSTRUCTIONS.to_string(),
        })
    }

    pub fn with_prompts(mut self, system_prompt: impl Into<String>, human_template: impl Into<String>) -> Result<Self> {
        let human_template = human_template.into();
        if human_template.matches("[X]").count() != 1 {
            return Err(Error::Template("human prompt needs exactly one [X] slot".into()));
        }
        self.system_prompt = system_prompt.into();
        self.human_template = human_template;
        Ok(self)
    }

    pub fn request_body(&self, doc: &Document) -> Value {
        let user = format!(
            "{}\n\n{}",
            self.human_template.replace("[X]", &doc.text),
            self.format_instructions
        );
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": user},
            ],
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    /// Score for one document; retried up to `max_retries` times on
    /// malformed replies.
    pub fn score(&self, doc: &Document) -> Result<f64> {
        let body = self.request_body(doc);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let resp = with_retries(self.config.max_retries, self.config.retry_backoff, || {
                self.limiter.wait();
                self.transport
                    .post_json(&self.config.endpoint_url, &body, self.config.auth_token.as_deref())
            })?;
            let content = resp
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Transport {
                    attempts: attempt,
                    message: "unexpected response shape: missing choices[0].message.content".into(),
                })?;
            if let Some(v) = parse_score_reply(content) {
                return Ok(v);
            }
            log::warn!("doc {}: inadmissible reply {content:?} (attempt {attempt})", doc.id);
            last = content.to_string();
        }
        Err(Error::ReplyFormat { attempts, raw: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReplayTransport;
    use std::time::Duration;

    #[test]
    fn parser_accepts_bare_numbers_only() {
        assert_eq!(parse_score_reply("0.8"), Some(0.8));
        assert_eq!(parse_score_reply("-1.0"), Some(-1.0));
        assert_eq!(parse_score_reply("  +0.25\n"), Some(0.25));
        assert_eq!(parse_score_reply("1"), Some(1.0));
        assert_eq!(parse_score_reply("0"), Some(0.0));
        assert_eq!(parse_score_reply("The score is 0.5."), None);
        assert_eq!(parse_score_reply("0.5."), None);
        assert_eq!(parse_score_reply(".5"), None);
        assert_eq!(parse_score_reply("1."), None);
        assert_eq!(parse_score_reply("1.2"), None);
        assert_eq!(parse_score_reply("-3"), None);
        assert_eq!(parse_score_reply("1e-1"), None);
        assert_eq!(parse_score_reply("nan"), None);
        assert_eq!(parse_score_reply(""), None);
    }

    fn client(fixture: &str, retries: usize) -> (InstructClient, Arc<ReplayTransport>) {
        let t = Arc::new(ReplayTransport::from_json(fixture).unwrap());
        let cfg = BackendConfig {
            model_name: "chat".into(),
            max_retries: retries,
            retry_backoff: Duration::ZERO,
            ..BackendConfig::default()
        };
        (InstructClient::with_transport(cfg, t.clone()).unwrap(), t)
    }

    fn fixture_for(doc: &Document, replies: &[&str]) -> String {
        let c = client(r#"{"interactions":[]}"#, 0).0;
        let req = c.request_body(doc);
        let items: Vec<String> = replies
            .iter()
            .map(|r| {
                format!(
                    r#"{{"request":{req},"max_uses":1,"response":{{"choices":[{{"message":{{"role":"assistant","content":{}}}}}]}}}}"#,
                    serde_json::to_string(r).unwrap()
                )
            })
            .collect();
        format!(r#"{{"interactions":[{}]}}"#, items.join(","))
    }

    #[test]
    fn request_carries_prompts() {
        let doc = Document::new("L1", "She is great.", "C1");
        let (c, _) = client(r#"{"interactions":[]}"#, 0);
        let body = c.request_body(&doc);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], SYSTEM_PROMPT);
        let user = body["messages"][1]["content"].as_str().unwrap();
        assert!(user.starts_with("Below is a letter of recommendation for a job market candidate: She is great."));
        assert!(user.ends_with(FORMAT_INSTRUCTIONS));
        assert!(body.get("temperature").is_none());
    }

    #[test]
    fn retries_malformed_reply() {
        let doc = Document::new("L1", "text", "C1");
        let (c, t) = client(&fixture_for(&doc, &["The score is 0.5.", "0.5"]), 2);
        assert_eq!(c.score(&doc).unwrap(), 0.5);
        assert_eq!(t.requests().len(), 2);
    }

    #[test]
    fn gives_up_with_raw_reply() {
        let doc = Document::new("L1", "text", "C1");
        let (c, _) = client(&fixture_for(&doc, &["great!", "1.5"]), 1);
        match c.score(&doc) {
            Err(Error::ReplyFormat { attempts, raw }) => {
                assert_eq!(attempts, 2);
                assert_eq!(raw, "1.5");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_human_prompt_needs_slot() {
        let (c, _) = client(r#"{"interactions":[]}"#, 0);
        assert!(c.with_prompts("sys", "no slot").is_err());
    }
}
