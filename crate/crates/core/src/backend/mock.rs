//! Deterministic offline backend.
//!
//! The probability of `surface` after `prompt` is `u / 8`, where `u` in
//! `(0, 1]` comes from a 64-bit FNV-1a digest of the UTF-8 bytes
//! `seed ‖ 0x1F ‖ prompt ‖ 0x1F ‖ surface` (seed written in decimal):
//! `u = (digest mod 2^53) / 2^53`, with 0 replaced by `2^-53`.
//!
//! The mock is not a normalized distribution: a verbalizer with more than
//! eight surfaces can receive a total mass above 1.
//!
//! Its tokenizer is word-level. A surface longer than
//! [`MOCK_MULTI_TOKEN_CHARS`] characters, or containing whitespace, counts as
//! several tokens; its probe still uses the digest of the whole surface.

use crate::backend::{LanguageModel, TokenProbe, VocabReport, VocabStatus};
use crate::error::{Error, Result};

pub const MOCK_NORMALIZER: f64 = 8.0;
pub const MOCK_MULTI_TOKEN_CHARS: usize = 12;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SEPARATOR: u8 = 0x1F;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn mock_distribution(prompt: &str, surface: &str, seed: u64) -> f64 {
    let mut buf = Vec::with_capacity(prompt.len() + surface.len() + 24);
    buf.extend_from_slice(seed.to_string().as_bytes());
    buf.push(SEPARATOR);
    buf.extend_from_slice(prompt.as_bytes());
    buf.push(SEPARATOR);
    buf.extend_from_slice(surface.as_bytes());
    let digest = fnv1a64(&buf);
    let scale = (1u64 << 53) as f64;
    let mut u = (digest % (1u64 << 53)) as f64 / scale;
    if u == 0.0 {
        u = 1.0 / scale;
    }
    u / MOCK_NORMALIZER
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    context_size: usize,
    cloze: bool,
}

impl MockBackend {
    pub const DEFAULT_CONTEXT: usize = 8192;

    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            context_size: Self::DEFAULT_CONTEXT,
            cloze: false,
        }
    }

    pub fn with_context_size(mut self, tokens: usize) -> Self {
        self.context_size = tokens;
        self
    }

    /// Acts as a masked LM, accepting a `[MASK]` anywhere in the prompt.
    pub fn with_cloze(mut self, cloze: bool) -> Self {
        self.cloze = cloze;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn classify(surface: &str) -> VocabStatus {
        let trimmed = surface.trim();
        if trimmed.is_empty() {
            VocabStatus::Absent
        } else if trimmed.split_whitespace().count() > 1 || trimmed.chars().count() > MOCK_MULTI_TOKEN_CHARS {
            VocabStatus::MultiToken
        } else {
            VocabStatus::SingleToken
        }
    }

    fn tokens(text: &str) -> usize {
        text.split_whitespace()
            .map(|w| w.chars().count().div_ceil(MOCK_MULTI_TOKEN_CHARS))
            .sum()
    }
}

impl LanguageModel for MockBackend {
    fn next_token_mass(&self, prompt: &str, surfaces: &[String]) -> Result<Vec<TokenProbe>> {
        if prompt.is_empty() {
            return Err(Error::invalid("prompt is empty"));
        }
        if surfaces.is_empty() {
            return Err(Error::invalid("no surfaces requested"));
        }
        let prompt_tokens = Self::tokens(prompt);
        if prompt_tokens > self.context_size {
            return Err(Error::ContextOverflow {
                prompt_tokens,
                context_size: self.context_size,
            });
        }
        Ok(surfaces
            .iter()
            .map(|s| {
                let status = Self::classify(s);
                let probability = match status {
                    VocabStatus::Absent => 0.0,
                    _ => mock_distribution(prompt, s, self.seed),
                };
                TokenProbe {
                    surface: s.clone(),
                    probability,
                    status,
                }
            })
            .collect())
    }

    fn vocab_check(&self, surfaces: &[String]) -> Result<VocabReport> {
        Ok(VocabReport::from_entries(
            surfaces.iter().map(|s| (s.clone(), Self::classify(s))),
        ))
    }

    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(Self::tokens(text))
    }

    fn context_size(&self) -> Option<usize> {
        Some(self.context_size)
    }

    fn supports_cloze(&self) -> bool {
        self.cloze
    }

    fn describe(&self) -> String {
        format!("mock(seed={})", self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Second implementation of the digest, written from the published
    /// FNV-1a definition without sharing code with the backend.
    fn reference_mock(prompt: &str, surface: &str, seed: u64) -> f64 {
        let mut h: u64 = 14695981039346656037;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(1099511628211);
            }
        };
        feed(format!("{seed}").as_bytes());
        feed(&[31]);
        feed(prompt.as_bytes());
        feed(&[31]);
        feed(surface.as_bytes());
        let m = h & ((1u64 << 53) - 1);
        let u = if m == 0 { 2f64.powi(-53) } else { m as f64 * 2f64.powi(-53) };
        u / 8.0
    }

    #[test]
    fn fnv_known_vectors() {
        // standard FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn two_probes_bounded() {
        let m = MockBackend::new(7);
        let probes = m.next_token_mass("p", &strings(&["good", "bad"])).unwrap();
        assert_eq!(probes.len(), 2);
        let sum: f64 = probes.iter().map(|p| p.probability).sum();
        assert!(sum <= 1.0);
    }

    #[test]
    fn repeated_surfaces_identical() {
        let m = MockBackend::new(3);
        let s = strings(&["great", "poor", "great", "poor"]);
        let probes = m.next_token_mass("Some prompt", &s).unwrap();
        assert_eq!(probes[0].probability, probes[2].probability);
        assert_eq!(probes[1].probability, probes[3].probability);
    }

    #[test]
    fn vocab_rules() {
        let m = MockBackend::new(0);
        let r = m
            .vocab_check(&strings(&["excellent", "counterintuitively-long-compound", "", "labor market"]))
            .unwrap();
        assert_eq!(r.status("excellent"), Some(VocabStatus::SingleToken));
        assert_eq!(r.status("counterintuitively-long-compound"), Some(VocabStatus::MultiToken));
        assert_eq!(r.status(""), Some(VocabStatus::Absent));
        assert_eq!(r.status("labor market"), Some(VocabStatus::MultiToken));
        // exactly twelve characters is still one token
        assert_eq!(MockBackend::classify("abcdefghijkl"), VocabStatus::SingleToken);
        assert_eq!(MockBackend::classify("abcdefghijklm"), VocabStatus::MultiToken);
    }

    #[test]
    fn absent_surface_is_flagged_not_silent() {
        let m = MockBackend::new(0);
        let probes = m.next_token_mass("x", &strings(&["", "ok"])).unwrap();
        assert_eq!(probes[0].status, VocabStatus::Absent);
        assert_eq!(probes[0].probability, 0.0);
        assert_eq!(probes[1].status, VocabStatus::SingleToken);
    }

    #[test]
    fn context_overflow_reports_counts() {
        let m = MockBackend::new(0).with_context_size(3);
        match m.next_token_mass("one two three four", &strings(&["a"])) {
            Err(Error::ContextOverflow {
                prompt_tokens,
                context_size,
            }) => {
                assert_eq!(prompt_tokens, 4);
                assert_eq!(context_size, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let m = MockBackend::new(0);
        assert!(m.next_token_mass("", &strings(&["a"])).is_err());
        assert!(m.next_token_mass("p", &[]).is_err());
    }

    #[test]
    fn ten_thousand_values_in_range() {
        let mut state = 0x9e3779b97f4a7c15u64;
        for i in 0..10_000u64 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let prompt = format!("prompt {i} {state:x}");
            let v = mock_distribution(&prompt, &format!("w{}", state >> 40), state);
            assert!(v > 0.0 && v <= 0.125, "{v}");
        }
    }

    proptest! {
        #[test]
        fn matches_reference_digest(prompt in ".{0,40}", surface in ".{0,12}", seed in any::<u64>()) {
            let a = mock_distribution(&prompt, &surface, seed);
            prop_assert_eq!(a, reference_mock(&prompt, &surface, seed));
            prop_assert_eq!(a, mock_distribution(&prompt, &surface, seed));
        }

        #[test]
        fn surface_set_mass_bound(prompt in "[a-z ]{1,30}", surfaces in proptest::collection::vec("[a-z]{1,10}", 1..20)) {
            let probes = MockBackend::new(42).next_token_mass(&prompt, &surfaces).unwrap();
            let sum: f64 = probes.iter().map(|p| p.probability).sum();
            prop_assert!(sum <= surfaces.len() as f64 / 8.0);
            for p in probes {
                prop_assert!(p.probability > 0.0 && p.probability <= 0.125);
            }
        }
    }
}
