//! Prompt-based label probabilities.
//!
//! A document is wrapped in a template, the backend is asked for the
//! next-token mass of every verbalizer surface, and each label receives the
//! summed mass of its surfaces. Polarity and net-standout are differences of
//! two label masses; classification is the argmax.
//!
//! For prefix templates the `[MASK]` slot is dropped and trailing whitespace
//! is stripped, so the answer is the next token after the rendered text.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{LanguageModel, VocabReport, VocabStatus};
use crate::corpus::{chunk, ChunkUnit, Corpus, Document};
use crate::error::{Error, Result};

pub const INPUT_SLOT: &str = "[X]";
pub const MASK_SLOT: &str = "[MASK]";

/// Tokens kept free when a long document is split to fit the context.
pub const CONTEXT_MARGIN: usize = 16;

pub const POSITIVE: &str = "positive";
pub const NEGATIVE: &str = "negative";
pub const STANDOUT: &str = "standout";
pub const GRINDSTONE: &str = "grindstone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    /// Answer position is the final token (generative models).
    Prefix,
    /// `[MASK]` may sit anywhere (masked language models).
    Cloze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
    kind: TemplateKind,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, kind: TemplateKind) -> Result<Self> {
        let text = text.into();
        if text.matches(INPUT_SLOT).count() != 1 {
            return Err(Error::Template(format!("`{text}` must contain exactly one {INPUT_SLOT}")));
        }
        let masks = text.matches(MASK_SLOT).count();
        match kind {
            TemplateKind::Prefix => {
                if masks > 1 || (masks == 1 && !text.trim_end().ends_with(MASK_SLOT)) {
                    return Err(Error::Template(format!(
                        "prefix template `{text}` may only end with {MASK_SLOT}"
                    )));
                }
            }
            TemplateKind::Cloze => {
                if masks != 1 {
                    return Err(Error::Template(format!(
                        "cloze template `{text}` needs exactly one {MASK_SLOT}"
                    )));
                }
            }
        }
        Ok(PromptTemplate { text, kind })
    }

    pub fn prefix(text: impl Into<String>) -> Result<Self> {
        Self::new(text, TemplateKind::Prefix)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    /// True when the mask is (or is implicitly) the last token.
    pub fn mask_is_terminal(&self) -> bool {
        let t = self.text.trim_end();
        !t.contains(MASK_SLOT) || (t.ends_with(MASK_SLOT) && t.matches(MASK_SLOT).count() == 1)
    }

    /// Template text with the slot markers removed, used to size chunks.
    pub fn scaffold(&self) -> String {
        self.text.replace(INPUT_SLOT, "").replace(MASK_SLOT, "")
    }

    /// Fills `[X]` with `input`. Terminal masks are dropped (with trailing
    /// whitespace); a non-terminal mask is kept for cloze-capable backends
    /// and rejected otherwise.
    pub fn render(&self, input: &str, backend_supports_cloze: bool) -> Result<String> {
        let (before, after) = self
            .text
            .split_once(INPUT_SLOT)
            .expect("validated template has an input slot");
        if self.mask_is_terminal() {
            let after = after.trim_end();
            let after = after.strip_suffix(MASK_SLOT).unwrap_or(after).trim_end();
            let before = before.strip_suffix(MASK_SLOT).unwrap_or(before);
            let rendered = format!("{before}{input}{after}");
            return Ok(rendered.trim_end().to_string());
        }
        if !backend_supports_cloze {
            return Err(Error::Unsupported(
                "cloze prompts with a non-terminal [MASK] on a prefix-only backend".into(),
            ));
        }
        Ok(format!("{before}{input}{after}"))
    }
}

pub fn render_prompt(template: &PromptTemplate, doc: &Document, backend: &dyn LanguageModel) -> Result<String> {
    template.render(&doc.text, backend.supports_cloze())
}

/// Label → permissible answer surfaces. Labels iterate in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<String>>", into = "BTreeMap<String, Vec<String>>")]
pub struct Verbalizer {
    labels: BTreeMap<String, Vec<String>>,
}

impl TryFrom<BTreeMap<String, Vec<String>>> for Verbalizer {
    type Error = Error;

    fn try_from(labels: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Verbalizer("no labels".into()));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (label, surfaces) in &labels {
            if surfaces.is_empty() {
                return Err(Error::Verbalizer(format!("label `{label}` has no surfaces")));
            }
            for s in surfaces {
                if let Some(prev) = owner.insert(s, label) {
                    if prev != label {
                        return Err(Error::Verbalizer(format!(
                            "surface `{s}` appears under both `{prev}` and `{label}`"
                        )));
                    }
                    return Err(Error::Verbalizer(format!("surface `{s}` repeated under `{label}`")));
                }
            }
        }
        Ok(Verbalizer { labels })
    }
}

impl From<Verbalizer> for BTreeMap<String, Vec<String>> {
    fn from(v: Verbalizer) -> Self {
        v.labels
    }
}

impl Verbalizer {
    pub fn new<L, S>(labels: impl IntoIterator<Item = (L, Vec<S>)>) -> Result<Self>
    where
        L: Into<String>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (l, ss) in labels {
            let l = l.into();
            if map.contains_key(&l) {
                return Err(Error::Verbalizer(format!("label `{l}` defined twice")));
            }
            map.insert(l, ss.into_iter().map(Into::into).collect());
        }
        Self::try_from(map)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn surfaces(&self, label: &str) -> Option<&[String]> {
        self.labels.get(label).map(Vec::as_slice)
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.contains_key(label)
    }

    /// Every (label, surface) pair in label order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.labels
            .iter()
            .flat_map(|(l, ss)| ss.iter().map(move |s| (l.as_str(), s.as_str())))
    }

    pub fn all_surfaces(&self) -> Vec<String> {
        self.pairs().map(|(_, s)| s.to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mass per label, as read from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    masses: BTreeMap<String, f64>,
    /// Summed mass before any renormalization.
    total_mass: f64,
    renormalized: bool,
}

impl LabelDistribution {
    /// Raw masses; renormalize with [`LabelDistribution::renormalize`].
    pub fn from_masses(masses: BTreeMap<String, f64>) -> Result<Self> {
        if masses.values().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::invalid("label masses must be finite and non-negative"));
        }
        let total_mass = masses.values().sum();
        Ok(LabelDistribution {
            masses,
            total_mass,
            renormalized: false,
        })
    }

    pub fn renormalize(mut self) -> Result<Self> {
        if self.renormalized {
            return Ok(self);
        }
        if self.total_mass <= 0.0 {
            return Err(Error::DegenerateDistribution);
        }
        for m in self.masses.values_mut() {
            *m /= self.total_mass;
        }
        self.renormalized = true;
        Ok(self)
    }

    pub fn mass(&self, label: &str) -> Option<f64> {
        self.masses.get(label).copied()
    }

    pub fn masses(&self) -> &BTreeMap<String, f64> {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_renormalized(&self) -> bool {
        self.renormalized
    }

    fn require(&self, label: &str) -> Result<f64> {
        self.mass(label).ok_or_else(|| Error::MissingLabel(label.to_string()))
    }

    /// `mass(a) - mass(b)`.
    pub fn difference(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.require(a)? - self.require(b)?)
    }

    /// Unweighted mean of several distributions over the same labels.
    pub fn mean(parts: &[LabelDistribution]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no distributions to average"))?;
        let n = parts.len() as f64;
        let mut masses = BTreeMap::new();
        for label in first.masses.keys() {
            let mut sum = 0.0;
            for p in parts {
                sum += p.require(label)?;
            }
            masses.insert(label.clone(), sum / n);
        }
        Ok(LabelDistribution {
            masses,
            total_mass: parts.iter().map(|p| p.total_mass).sum::<f64>() / n,
            renormalized: first.renormalized,
        })
    }
}

/// Positive minus negative label mass.
pub fn polarity(dist: &LabelDistribution) -> Result<f64> {
    dist.difference(POSITIVE, NEGATIVE)
}

/// Standout minus grindstone label mass; sign is kept.
pub fn net_standout(dist: &LabelDistribution) -> Result<f64> {
    dist.difference(STANDOUT, GRINDSTONE)
}

/// Label with the largest mass; exact ties go to the lexicographically
/// smallest label.
pub fn classify(dist: &LabelDistribution) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, &m) in &dist.masses {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((label, m));
        }
    }
    best.map(|(l, _)| l)
}

/// Eq.-style label mass: sum of surface probabilities per label.
pub fn label_probabilities(
    backend: &dyn LanguageModel,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    doc: &Document,
    renormalize: bool,
) -> Result<LabelDistribution> {
    let prompt = render_prompt(template, doc, backend)?;
    masses_for_prompt(backend, &prompt, verbalizer, renormalize)
}

fn masses_for_prompt(
    backend: &dyn LanguageModel,
    prompt: &str,
    verbalizer: &Verbalizer,
    renormalize: bool,
) -> Result<LabelDistribution> {
    let pairs: Vec<(&str, &str)> = verbalizer.pairs().collect();
    let surfaces: Vec<String> = pairs.iter().map(|(_, s)| s.to_string()).collect();
    let probes = backend.next_token_mass(prompt, &surfaces)?;
    if probes.len() != surfaces.len() {
        return Err(Error::invalid(format!(
            "backend returned {} probes for {} surfaces",
            probes.len(),
            surfaces.len()
        )));
    }
    let absent: Vec<String> = probes
        .iter()
        .filter(|p| p.status == VocabStatus::Absent)
        .map(|p| p.surface.clone())
        .collect();
    if !absent.is_empty() {
        return Err(Error::AbsentSurfaces(absent));
    }
    let mut masses: BTreeMap<String, f64> = verbalizer.labels().map(|l| (l.to_string(), 0.0)).collect();
    for ((label, _), probe) in pairs.iter().zip(&probes) {
        *masses.get_mut(*label).expect("label from verbalizer") += probe.probability;
    }
    let dist = LabelDistribution::from_masses(masses)?;
    if renormalize {
        dist.renormalize()
    } else {
        Ok(dist)
    }
}

/// Prompt-spec file contents: template, verbalizer and options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub name: String,
    pub template: String,
    pub kind: TemplateKind,
    pub labels: Verbalizer,
    #[serde(default)]
    pub renormalize: bool,
}

pub const BUNDLED_SPECS: [(&str, &str); 4] = [
    ("sentiment", include_str!("../data/prompts/sentiment.toml")),
    ("sex", include_str!("../data/prompts/sex.toml")),
    ("field", include_str!("../data/prompts/field.toml")),
    ("personality", include_str!("../data/prompts/personality.toml")),
];

impl PromptSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: PromptSpec = toml::from_str(s).map_err(|e| Error::Serialization(format!("prompt spec: {e}")))?;
        spec.template()?;
        Ok(spec)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: PromptSpec = serde_json::from_str(s)?;
        spec.template()?;
        Ok(spec)
    }

    /// Loads TOML, or JSON when the extension is `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    /// One of `sentiment`, `sex`, `field`, `personality`.
    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED_SPECS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::invalid(format!("no bundled prompt spec named `{name}`")))?;
        Self::from_toml_str(text)
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        PromptTemplate::new(self.template.clone(), self.kind)
    }

    pub fn verbalizer(&self) -> &Verbalizer {
        &self.labels
    }

    pub fn has_polarity(&self) -> bool {
        self.labels.has_label(POSITIVE) && self.labels.has_label(NEGATIVE)
    }

    pub fn has_net_standout(&self) -> bool {
        self.labels.has_label(STANDOUT) && self.labels.has_label(GRINDSTONE)
    }
}

/// Result of scoring one document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocumentScore {
    pub id: String,
    pub candidate_id: String,
    pub word_count: usize,
    pub distribution: LabelDistribution,
    /// 1 unless the document had to be split to fit the context.
    pub n_chunks: usize,
}

/// Scores documents with one prompt spec against one backend.
pub struct Scorer<'a> {
    backend: &'a dyn LanguageModel,
    template: PromptTemplate,
    verbalizer: Verbalizer,
    renormalize: bool,
}

impl<'a> Scorer<'a> {
    /// Validates the template against the backend and checks the
    /// verbalizer vocabulary when the backend can tokenize. Absent surfaces
    /// are an error; multi-token ones are logged.
    pub fn new(backend: &'a dyn LanguageModel, spec: &PromptSpec) -> Result<Self> {
        let template = spec.template()?;
        if !template.mask_is_terminal() && !backend.supports_cloze() {
            return Err(Error::Unsupported(
                "cloze prompts with a non-terminal [MASK] on a prefix-only backend".into(),
            ));
        }
        match backend.vocab_check(&spec.labels.all_surfaces()) {
            Ok(report) => check_vocab(&report)?,
            Err(Error::Unsupported(what)) => {
                log::info!("{}: vocabulary not checked (no {what})", backend.describe());
            }
            Err(e) => return Err(e),
        }
        Ok(Scorer {
            backend,
            template,
            verbalizer: spec.labels.clone(),
            renormalize: spec.renormalize,
        })
    }

    pub fn with_renormalize(mut self, renormalize: bool) -> Self {
        self.renormalize = renormalize;
        self
    }

    pub fn verbalizer(&self) -> &Verbalizer {
        &self.verbalizer
    }

    pub fn score(&self, doc: &Document) -> Result<DocumentScore> {
        let prompt = self.template.render(&doc.text, self.backend.supports_cloze())?;
        let (distribution, n_chunks) = match self.overflow(&prompt)? {
            None => (masses_for_prompt(self.backend, &prompt, &self.verbalizer, self.renormalize)?, 1),
            Some(context) => self.score_chunked(&doc.text, context)?,
        };
        Ok(DocumentScore {
            id: doc.id.clone(),
            candidate_id: doc.candidate_id.clone(),
            word_count: doc.word_count,
            distribution,
            n_chunks,
        })
    }

    /// Returns the context size when `prompt` does not fit in it.
    fn overflow(&self, prompt: &str) -> Result<Option<usize>> {
        let Some(context) = self.backend.context_size() else {
            return Ok(None);
        };
        match self.backend.count_tokens(prompt) {
            Ok(n) if n > context => Ok(Some(context)),
            Ok(_) | Err(Error::Unsupported(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Splits the text into word chunks sized to the context budget and
    /// averages the chunk distributions.
    fn score_chunked(&self, text: &str, context: usize) -> Result<(LabelDistribution, usize)> {
        let scaffold_tokens = self.backend.count_tokens(&self.template.scaffold())?;
        let budget = context.saturating_sub(scaffold_tokens + CONTEXT_MARGIN);
        if budget == 0 {
            return Err(Error::ContextOverflow {
                prompt_tokens: scaffold_tokens + CONTEXT_MARGIN,
                context_size: context,
            });
        }
        let mut units = budget;
        let prompts = loop {
            let prompts: Vec<String> = chunk(text, units, ChunkUnit::Word)
                .iter()
                .map(|c| self.template.render(c, self.backend.supports_cloze()))
                .collect::<Result<_>>()?;
            let mut worst = 0;
            for p in &prompts {
                worst = worst.max(self.backend.count_tokens(p)?);
            }
            if worst <= context {
                break prompts;
            }
            if units == 1 {
                return Err(Error::ContextOverflow {
                    prompt_tokens: worst,
                    context_size: context,
                });
            }
            let shrunk = units * context / worst;
            units = shrunk.clamp(1, units - 1);
        };
        log::debug!("scoring in {} chunks of ≤ {units} words", prompts.len());
        let parts: Vec<LabelDistribution> = prompts
            .iter()
            .map(|p| masses_for_prompt(self.backend, p, &self.verbalizer, self.renormalize))
            .collect::<Result<_>>()?;
        Ok((LabelDistribution::mean(&parts)?, parts.len()))
    }

    /// Scores every document on `jobs` threads; output follows corpus order.
    pub fn score_corpus(&self, corpus: &Corpus, jobs: usize) -> Result<Vec<DocumentScore>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| corpus.documents().par_iter().map(|d| self.score(d)).collect())
    }
}

fn check_vocab(report: &VocabReport) -> Result<()> {
    let absent = report.absent();
    if !absent.is_empty() {
        return Err(Error::AbsentSurfaces(absent.into_iter().map(String::from).collect()));
    }
    let multi = report.multi_token();
    if !multi.is_empty() {
        log::warn!("verbalizer has multi-token surfaces: {multi:?}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{mock_distribution, MockBackend};
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text, "c")
    }

    fn dist(pairs: &[(&str, f64)]) -> LabelDistribution {
        LabelDistribution::from_masses(pairs.iter().map(|(l, m)| (l.to_string(), *m)).collect()).unwrap()
    }

    #[test]
    fn renders_sentiment_template() {
        let spec = PromptSpec::bundled("sentiment").unwrap();
        let t = spec.template().unwrap();
        assert_eq!(
            t.render("T.", false).unwrap(),
            "T. In summary, this job market candidate is"
        );
        let id = PromptTemplate::prefix("[X]").unwrap();
        assert_eq!(id.render("abc", false).unwrap(), "abc");
    }

    #[test]
    fn cloze_on_prefix_backend_is_rejected() {
        let t = PromptTemplate::new("[X] is [MASK].", TemplateKind::Cloze).unwrap();
        let backend = MockBackend::new(1);
        assert!(matches!(render_prompt(&t, &doc("a"), &backend), Err(Error::Unsupported(_))));
        let cloze_backend = MockBackend::new(1).with_cloze(true);
        assert_eq!(render_prompt(&t, &doc("a"), &cloze_backend).unwrap(), "a is [MASK].");
        // a mask-last cloze template behaves like a prefix one
        let last = PromptTemplate::new("[X] so [MASK]", TemplateKind::Cloze).unwrap();
        assert_eq!(render_prompt(&last, &doc("a"), &backend).unwrap(), "a so");
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::prefix("no slot").is_err());
        assert!(PromptTemplate::prefix("[X] [X]").is_err());
        assert!(PromptTemplate::prefix("[X] [MASK] later").is_err());
        assert!(PromptTemplate::prefix("[X] ends [MASK]  ").is_ok());
        assert!(PromptTemplate::new("[X] none", TemplateKind::Cloze).is_err());
        // doc text containing a slot marker is inserted verbatim
        let t = PromptTemplate::prefix("[X] end [MASK]").unwrap();
        assert_eq!(t.render("has [MASK] inside", false).unwrap(), "has [MASK] inside end");
    }

    #[test]
    fn verbalizer_invariants() {
        assert!(Verbalizer::new([("a", vec!["x"]), ("b", vec!["x"])]).is_err());
        assert!(Verbalizer::new([("a", Vec::<String>::new())]).is_err());
        assert!(Verbalizer::new([("a", vec!["x"]), ("a", vec!["y"])]).is_err());
        assert!(Verbalizer::new([("a", vec!["x", "x"])]).is_err());
        let v = Verbalizer::new([("b", vec!["y"]), ("a", vec!["x", "z"])]).unwrap();
        assert_eq!(v.labels().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(v.all_surfaces(), vec!["x", "z", "y"]);
    }

    #[test]
    fn bundled_specs_match_tables() {
        let s = PromptSpec::bundled("sentiment").unwrap();
        assert_eq!(s.labels.surfaces(POSITIVE).unwrap().len(), 22);
        assert_eq!(s.labels.surfaces(NEGATIVE).unwrap().len(), 16);
        assert_eq!(&s.labels.surfaces(POSITIVE).unwrap()[..3], ["excellent", "outstanding", "exceptional"]);
        assert!(!s.renormalize);
        let p = PromptSpec::bundled("personality").unwrap();
        assert_eq!(&p.labels.surfaces(STANDOUT).unwrap()[..3], ["ability", "research", "creativity"]);
        assert_eq!(p.labels.surfaces(GRINDSTONE).unwrap().len(), 21);
        assert!(p.has_net_standout() && !p.has_polarity());
        let f = PromptSpec::bundled("field").unwrap();
        assert_eq!(f.labels.len(), 5);
        assert_eq!(PromptSpec::bundled("sex").unwrap().labels.len(), 2);
        assert!(PromptSpec::bundled("nope").is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = PromptSpec::bundled("sex").unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(PromptSpec::from_json_str(&json).unwrap(), s);
    }

    #[test]
    fn two_label_masses_match_mock() {
        let backend = MockBackend::new(5);
        let v = Verbalizer::new([(POSITIVE, vec!["a"]), (NEGATIVE, vec!["b"])]).unwrap();
        let t = PromptTemplate::prefix("[X] so [MASK]").unwrap();
        let d = label_probabilities(&backend, &t, &v, &doc("text"), false).unwrap();
        let a = mock_distribution("text so", "a", 5);
        let b = mock_distribution("text so", "b", 5);
        assert_eq!(d.mass(POSITIVE), Some(a));
        assert_eq!(d.mass(NEGATIVE), Some(b));
        assert_eq!(d.total_mass(), a + b);
        assert_eq!(polarity(&d).unwrap(), a - b);
    }

    #[test]
    fn single_label_renormalizes_to_one() {
        let backend = MockBackend::new(5);
        let v = Verbalizer::new([("only", vec!["a", "b"])]).unwrap();
        let t = PromptTemplate::prefix("[X]").unwrap();
        let d = label_probabilities(&backend, &t, &v, &doc("x"), true).unwrap();
        assert_eq!(d.mass("only"), Some(1.0));
        assert!(d.is_renormalized());
    }

    #[test]
    fn zero_mass_renormalize_errors() {
        let d = dist(&[("a", 0.0), ("b", 0.0)]);
        assert!(matches!(d.renormalize(), Err(Error::DegenerateDistribution)));
    }

    #[test]
    fn score_differences() {
        assert!((polarity(&dist(&[(POSITIVE, 0.6), (NEGATIVE, 0.4)])).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(polarity(&dist(&[(POSITIVE, 0.3), (NEGATIVE, 0.3)])).unwrap(), 0.0);
        assert!(matches!(polarity(&dist(&[(POSITIVE, 0.3)])), Err(Error::MissingLabel(_))));
        assert!((net_standout(&dist(&[(STANDOUT, 0.3), (GRINDSTONE, 0.1)])).unwrap() - 0.2).abs() < 1e-15);
        assert!(net_standout(&dist(&[(STANDOUT, 0.1), (GRINDSTONE, 0.245)])).unwrap() < 0.0);
        assert!(net_standout(&dist(&[(STANDOUT, 0.1)])).is_err());
    }

    #[test]
    fn classify_argmax_and_ties() {
        assert_eq!(classify(&dist(&[("applied", 0.5), ("macro", 0.2), ("finance", 0.3)])), Some("applied"));
        assert_eq!(classify(&dist(&[("b", 0.1), ("a", 0.1)])), Some("a"));
        let d = dist(&[("x", 0.02), ("y", 0.05), ("z", 0.01)]);
        assert_eq!(classify(&d), classify(&d.clone().renormalize().unwrap()));
    }

    #[test]
    fn long_documents_are_chunked() {
        // scaffold " verdict: " is 1 token; budget = 40 - 1 - 16 = 23 words
        let backend = MockBackend::new(9).with_context_size(40);
        let spec = PromptSpec {
            name: "t".into(),
            template: "[X] verdict: [MASK]".into(),
            kind: TemplateKind::Prefix,
            labels: Verbalizer::new([(POSITIVE, vec!["good"]), (NEGATIVE, vec!["bad"])]).unwrap(),
            renormalize: false,
        };
        let scorer = Scorer::new(&backend, &spec).unwrap();
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let s = scorer.score(&doc(&text)).unwrap();
        assert_eq!(s.n_chunks, 3);
        let chunks = chunk(&text, 23, ChunkUnit::Word);
        let mean = |surface: &str| {
            chunks
                .iter()
                .map(|c| mock_distribution(&format!("{c} verdict:"), surface, 9))
                .sum::<f64>()
                / 3.0
        };
        assert!((s.distribution.mass(POSITIVE).unwrap() - mean("good")).abs() < 1e-15);
        assert!((s.distribution.mass(NEGATIVE).unwrap() - mean("bad")).abs() < 1e-15);
        // short documents are not chunked
        assert_eq!(scorer.score(&doc("short text")).unwrap().n_chunks, 1);
    }

    #[test]
    fn absent_surface_fails_scorer() {
        let backend = MockBackend::new(1);
        let spec = PromptSpec {
            name: "t".into(),
            template: "[X]".into(),
            kind: TemplateKind::Prefix,
            labels: Verbalizer::new([("a", vec!["x", " "])]).unwrap(),
            renormalize: false,
        };
        assert!(matches!(Scorer::new(&backend, &spec), Err(Error::AbsentSurfaces(_))));
    }

    #[test]
    fn corpus_scores_keep_order() {
        let backend = MockBackend::new(42);
        let spec = PromptSpec::bundled("sex").unwrap();
        let docs: Vec<Document> = (0..40)
            .map(|i| Document::new(format!("L{i}"), format!("letter number {i}"), "C"))
            .collect();
        let corpus = Corpus::new(docs).unwrap();
        let scorer = Scorer::new(&backend, &spec).unwrap();
        let parallel = scorer.score_corpus(&corpus, 4).unwrap();
        let serial = scorer.score_corpus(&corpus, 1).unwrap();
        assert_eq!(parallel, serial);
        assert!(parallel.iter().zip(corpus.iter()).all(|(s, d)| s.id == d.id));
    }

    proptest! {
        #[test]
        fn additivity_over_surface_partitions(
            surfaces in proptest::collection::btree_set("[a-z]{1,10}", 2..12),
            cut in 1usize..11,
            text in "[a-z ]{1,40}",
        ) {
            let surfaces: Vec<String> = surfaces.into_iter().collect();
            let cut = cut.min(surfaces.len() - 1);
            let backend = MockBackend::new(11);
            let t = PromptTemplate::prefix("[X] is").unwrap();
            let whole = Verbalizer::new([("l", surfaces.clone())]).unwrap();
            let left = Verbalizer::new([("l", surfaces[..cut].to_vec())]).unwrap();
            let right = Verbalizer::new([("l", surfaces[cut..].to_vec())]).unwrap();
            let d = doc(&text);
            let m = |v: &Verbalizer| label_probabilities(&backend, &t, v, &d, false).unwrap().mass("l").unwrap();
            prop_assert!((m(&left) + m(&right) - m(&whole)).abs() <= 1e-12);
        }

        #[test]
        fn argmax_invariant_to_renormalization(masses in proptest::collection::vec(0.001f64..1.0, 1..6)) {
            let d = LabelDistribution::from_masses(
                masses.iter().enumerate().map(|(i, m)| (format!("l{i}"), *m)).collect()
            ).unwrap();
            let r = d.clone().renormalize().unwrap();
            prop_assert_eq!(classify(&d), classify(&r));
            prop_assert!((r.masses().values().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn deterministic_distribution(text in ".{1,60}", seed in any::<u64>()) {
            let spec = PromptSpec::bundled("sex").unwrap();
            let a = MockBackend::new(seed);
            let b = MockBackend::new(seed);
            let s1 = Scorer::new(&a, &spec).unwrap().score(&doc(&text)).unwrap();
            let s2 = Scorer::new(&b, &spec).unwrap().score(&doc(&text)).unwrap();
            prop_assert_eq!(serde_json::to_string(&s1).unwrap(), serde_json::to_string(&s2).unwrap());
        }
    }
}
