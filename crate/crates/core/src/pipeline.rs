//! Config-driven commands behind the `promptsent` binary.
//!
//! Every command reads a [`RunConfig`], writes CSV/JSON/text artifacts
//! into the output directory and returns their paths. Relative paths in a
//! config file are resolved against the file's directory; inputs that are
//! produced by an earlier command (score files, `aggregates.csv`,
//! `forest.json`) are resolved against the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, LetterScore, ADVISER_FLAG};
use crate::backend::{BackendConfig, CompletionBackend, InstructClient, LanguageModel, MockBackend, ReplayTransport};
use crate::corpus::{corpus_from_jsonl_str, load_corpus, Corpus, CorpusFormat};
use crate::error::{Error, Result};
use crate::evalmeta::{confusion_with_labels, report};
use crate::forest::{
    fit_forest, oob_report, partial_dependence, permutation_importance, Dataset, FeatureSpec, Forest, ImportanceMode,
    RFConfig,
};
use crate::lexical::{default_stopwords, load_stopwords, score_text, Lexicon};
use crate::prompt::{classify, net_standout, polarity, PromptSpec, Scorer};
use crate::stats::{cluster_regime_name, fit_model, ModelSpec, HC0};
use crate::synth::{BUNDLED_CORPUS_JSONL, OUTCOMES};
use crate::table::{format_number, Table};

pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const FOREST_FILE: &str = "forest.json";
pub const COMPLETE_COLUMN: &str = "complete_application";
pub const LENGTH_COLUMN: &str = "avg_length_thousands";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub backend: BackendSection,
    pub score: ScoreConfig,
    pub evalmeta: EvalmetaConfig,
    pub aggregate: AggregateConfig,
    pub regress: RegressConfig,
    pub forest: ForestConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            jobs: 1,
            out: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            backend: BackendSection::default(),
            score: ScoreConfig::default(),
            evalmeta: EvalmetaConfig::default(),
            aggregate: AggregateConfig::default(),
            regress: RegressConfig::default(),
            forest: ForestConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// The bundled 20-letter synthetic corpus when unset.
    pub path: Option<PathBuf>,
    /// `jsonl` or `csv`; guessed from the extension when unset.
    pub format: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
    Instruct,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            "instruct" => Ok(BackendKind::Instruct),
            _ => Err(Error::invalid(format!("unknown backend `{s}` (mock, http, instruct)"))),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Mock seed; the run seed when unset.
    pub seed: Option<u64>,
    /// Mock context size in tokens.
    pub context_size: Option<usize>,
    /// Recorded request/response file used instead of the network.
    pub replay: Option<PathBuf>,
    pub http: BackendConfig,
    pub system_prompt: Option<String>,
    pub human_prompt: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Bundled spec names or spec file paths.
    pub prompts: Vec<String>,
    /// `toy` or lexicon CSV paths (`term,score`).
    pub lexicons: Vec<String>,
    pub stem: bool,
    pub stopwords: Option<PathBuf>,
    /// Overrides the specs' own `renormalize` flag.
    pub renormalize: Option<bool>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            prompts: vec!["sentiment".into()],
            lexicons: Vec::new(),
            stem: true,
            stopwords: None,
            renormalize: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub prompt: String,
    /// Metadata key holding the true label.
    pub gold: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalmetaConfig {
    pub tasks: Vec<EvalTask>,
}

impl Default for EvalmetaConfig {
    fn default() -> Self {
        EvalmetaConfig {
            tasks: vec![
                EvalTask {
                    prompt: "sex".into(),
                    gold: "sex".into(),
                },
                EvalTask {
                    prompt: "field".into(),
                    gold: "field".into(),
                },
            ],
        }
    }
}

/// One letter-level score file turned into candidate-level columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub name: String,
    pub file: PathBuf,
    #[serde(default = "default_measure_column")]
    pub column: String,
}

fn default_measure_column() -> String {
    "polarity".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Derived from the `score` section when empty.
    pub measures: Vec<MeasureConfig>,
    /// Boolean letter metadata counted per candidate.
    pub flags: Vec<String>,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            measures: Vec::new(),
            flags: vec![ADVISER_FLAG.into(), "writer_top5".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sample {
    Full,
    /// Candidates with a complete application.
    Complete,
}

impl Sample {
    pub fn name(self) -> &'static str {
        match self {
            Sample::Full => "full",
            Sample::Complete => "complete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSet {
    pub name: String,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl ControlSet {
    fn new(name: &str, continuous: &[&str], categorical: &[&str]) -> Self {
        ControlSet {
            name: name.into(),
            continuous: continuous.iter().map(|s| s.to_string()).collect(),
            categorical: categorical.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressConfig {
    /// `aggregates.csv` in the output directory when unset.
    pub input: Option<PathBuf>,
    /// Measure names; every aggregated measure when empty.
    pub measures: Vec<String>,
    pub outcomes: Vec<String>,
    pub controls: Vec<ControlSet>,
    pub samples: Vec<Sample>,
    /// Categorical column entered in every specification.
    pub year: Option<String>,
    /// One clustered-SE regime per column (at most two).
    pub clusters: Vec<String>,
    pub small_sample: bool,
    /// Dispersion measures (`range`, `mad`, `sd`); each adds a variant
    /// estimated on the complete-application sample only.
    pub dispersion: Vec<String>,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig {
            input: None,
            measures: Vec::new(),
            outcomes: OUTCOMES.iter().map(|s| s.to_string()).collect(),
            controls: default_controls(),
            samples: vec![Sample::Full, Sample::Complete],
            year: Some("year".into()),
            clusters: vec!["phd_univ".into(), "rank_period".into()],
            small_sample: false,
            dispersion: Vec::new(),
        }
    }
}

pub fn default_controls() -> Vec<ControlSet> {
    vec![
        ControlSet::new("none", &[], &[]),
        ControlSet::new("demographics", &[], &["sex", "region"]),
        ControlSet::new("field", &[], &["sex", "region", "field"]),
        ControlSet::new("rank", &[], &["sex", "region", "field", "phd_rank"]),
        ControlSet::new("full", &["major_pub", "long_phd"], &["sex", "region", "field", "phd_rank"]),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub input: Option<PathBuf>,
    pub outcome: String,
    /// Length and every measure's average when both lists are empty.
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
    pub sample: Sample,
    pub importance_repeats: usize,
    pub importance_mode: ImportanceMode,
    /// Feature sets (1 or 2 names) for partial dependence; each continuous
    /// feature alone when empty.
    pub pd: Vec<Vec<String>>,
    pub target_class: Option<String>,
    /// Tree settings; `seed` is replaced by the run seed.
    pub rf: RFConfig,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            input: None,
            outcome: OUTCOMES[0].into(),
            continuous: Vec::new(),
            categorical: Vec::new(),
            sample: Sample::Full,
            importance_repeats: 30,
            importance_mode: ImportanceMode::ShuffleOnly,
            pd: Vec::new(),
            target_class: None,
            rf: RFConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Serialization(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Directory against which relative config paths are resolved.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    fn in_out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir().join(p)
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus.path {
            None => corpus_from_jsonl_str(BUNDLED_CORPUS_JSONL),
            Some(p) => {
                let p = self.resolve(p);
                let format = match &self.corpus.format {
                    Some(f) => f.parse()?,
                    None => CorpusFormat::from_path(&p),
                };
                load_corpus(p, format)
            }
        }
    }

    fn load_spec(&self, name: &str) -> Result<PromptSpec> {
        if name.ends_with(".toml") || name.ends_with(".json") {
            PromptSpec::load(self.resolve(Path::new(name)))
        } else {
            PromptSpec::bundled(name)
        }
    }

    fn load_lexicon(&self, name: &str) -> Result<Lexicon> {
        let lex = if name == "toy" {
            Lexicon::toy()
        } else {
            Lexicon::load(self.resolve(Path::new(name)))?
        };
        if self.score.stem {
            lex.stemmed()
        } else {
            Ok(lex)
        }
    }

    fn transport(&self) -> Result<Option<Arc<ReplayTransport>>> {
        self.backend
            .replay
            .as_ref()
            .map(|p| ReplayTransport::from_file(self.resolve(p)).map(Arc::new))
            .transpose()
    }

    /// The next-token backend; `instruct` has none.
    pub fn language_model(&self) -> Result<Box<dyn LanguageModel>> {
        match self.backend.kind {
            BackendKind::Mock => {
                let mut m = MockBackend::new(self.backend.seed.unwrap_or(self.seed));
                if let Some(n) = self.backend.context_size {
                    m = m.with_context_size(n);
                }
                Ok(Box::new(m))
            }
            BackendKind::Http => {
                let cfg = self.backend.http.clone().load_auth();
                Ok(Box::new(match self.transport()? {
                    Some(t) => CompletionBackend::with_transport(cfg, t)?,
                    None => CompletionBackend::new(cfg)?,
                }))
            }
            BackendKind::Instruct => Err(Error::Unsupported(
                "next-token probabilities on the instruct backend; use mock or http".into(),
            )),
        }
    }

    fn instruct_client(&self) -> Result<InstructClient> {
        let cfg = self.backend.http.clone().load_auth();
        let mut client = match self.transport()? {
            Some(t) => InstructClient::with_transport(cfg, t)?,
            None => InstructClient::new(cfg)?,
        };
        if self.backend.system_prompt.is_some() || self.backend.human_prompt.is_some() {
            client = client.with_prompts(
                self.backend
                    .system_prompt
                    .clone()
                    .unwrap_or_else(|| crate::backend::SYSTEM_PROMPT.into()),
                self.backend
                    .human_prompt
                    .clone()
                    .unwrap_or_else(|| crate::backend::HUMAN_PROMPT.into()),
            )?;
        }
        Ok(client)
    }

    fn lexicon_file_name(name: &str) -> String {
        let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
        format!("lexicon_{stem}")
    }

    /// The configured measures, or one per score file `cmd_score` writes.
    pub fn measures(&self) -> Result<Vec<MeasureConfig>> {
        if !self.aggregate.measures.is_empty() {
            return Ok(self.aggregate.measures.clone());
        }
        let mut out = Vec::new();
        if self.backend.kind == BackendKind::Instruct {
            out.push(MeasureConfig {
                name: "instruct".into(),
                file: "scores_instruct.csv".into(),
                column: "score".into(),
            });
        } else {
            for p in &self.score.prompts {
                let spec = self.load_spec(p)?;
                let column = if spec.has_polarity() {
                    "polarity"
                } else if spec.has_net_standout() {
                    "net_standout"
                } else {
                    continue;
                };
                out.push(MeasureConfig {
                    name: spec.name.clone(),
                    file: format!("scores_{}.csv", spec.name).into(),
                    column: column.into(),
                });
            }
        }
        for l in &self.score.lexicons {
            let name = Self::lexicon_file_name(l);
            out.push(MeasureConfig {
                file: format!("scores_{name}.csv").into(),
                name,
                column: "polarity".into(),
            });
        }
        Ok(out)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(path.to_path_buf())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_number)
}

/// Scores the corpus with every configured prompt spec (or the instruct
/// client) and lexicon. One CSV per scorer, rows in corpus order.
pub fn cmd_score(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = cfg.load_corpus()?;
    let out = cfg.out_dir();
    let mut written = Vec::new();
    if cfg.backend.kind == BackendKind::Instruct {
        let client = cfg.instruct_client()?;
        let scores: Vec<f64> = cfg
            .pool()?
            .install(|| corpus.documents().par_iter().map(|d| client.score(d)).collect::<Result<_>>())?;
        written.push(write_with(&out.join("scores_instruct.csv"), |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["id", "candidate_id", "word_count", "score"])?;
            for (d, s) in corpus.iter().zip(&scores) {
                c.write_record([d.id.clone(), d.candidate_id.clone(), d.word_count.to_string(), format_number(*s)])?;
            }
            c.flush().map_err(|e| Error::io("<csv>", e))
        })?);
    } else if !cfg.score.prompts.is_empty() {
        let backend = cfg.language_model()?;
        for name in &cfg.score.prompts {
            let spec = cfg.load_spec(name)?;
            let mut scorer = Scorer::new(backend.as_ref(), &spec)?;
            if let Some(r) = cfg.score.renormalize {
                scorer = scorer.with_renormalize(r);
            }
            let scores = scorer.score_corpus(&corpus, cfg.jobs)?;
            let labels: Vec<String> = spec.labels.labels().map(String::from).collect();
            written.push(write_with(&out.join(format!("scores_{}.csv", spec.name)), |w| {
                let mut c = csv::Writer::from_writer(w);
                let mut header: Vec<String> = ["id", "candidate_id", "word_count"].map(String::from).to_vec();
                header.extend(labels.iter().map(|l| format!("mass_{l}")));
                header.push("total_mass".into());
                if spec.has_polarity() {
                    header.push("polarity".into());
                }
                if spec.has_net_standout() {
                    header.push("net_standout".into());
                }
                header.extend(["predicted".into(), "n_chunks".into()]);
                c.write_record(&header)?;
                for s in &scores {
                    let d = &s.distribution;
                    let mut row = vec![s.id.clone(), s.candidate_id.clone(), s.word_count.to_string()];
                    row.extend(labels.iter().map(|l| fmt(d.mass(l))));
                    row.push(format_number(d.total_mass()));
                    if spec.has_polarity() {
                        row.push(format_number(polarity(d)?));
                    }
                    if spec.has_net_standout() {
                        row.push(format_number(net_standout(d)?));
                    }
                    row.push(classify(d).unwrap_or("NA").to_string());
                    row.push(s.n_chunks.to_string());
                    c.write_record(&row)?;
                }
                c.flush().map_err(|e| Error::io("<csv>", e))
            })?);
        }
    }
    if !cfg.score.lexicons.is_empty() {
        let stopwords = match &cfg.score.stopwords {
            Some(p) => load_stopwords(cfg.resolve(p))?,
            None => default_stopwords(),
        };
        for name in &cfg.score.lexicons {
            let lex = cfg.load_lexicon(name)?;
            let pols: Vec<Option<f64>> = cfg.pool()?.install(|| {
                corpus
                    .documents()
                    .par_iter()
                    .map(|d| score_text(&d.text, &lex, &stopwords, cfg.score.stem))
                    .collect()
            });
            let file = format!("scores_{}.csv", RunConfig::lexicon_file_name(name));
            written.push(write_with(&out.join(file), |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["id", "candidate_id", "word_count", "polarity"])?;
                for (d, p) in corpus.iter().zip(&pols) {
                    c.write_record([d.id.clone(), d.candidate_id.clone(), d.word_count.to_string(), fmt(*p)])?;
                }
                c.flush().map_err(|e| Error::io("<csv>", e))
            })?);
        }
    }
    if written.is_empty() {
        return Err(Error::invalid("nothing to score: no prompts or lexicons configured"));
    }
    Ok(written)
}

/// Predicts a metadata field with each configured prompt and writes the
/// classification report as text and CSV, plus per-letter predictions.
pub fn cmd_evalmeta(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.evalmeta.tasks.is_empty() {
        return Err(Error::invalid("no evalmeta tasks configured"));
    }
    let corpus = cfg.load_corpus()?;
    let backend = cfg.language_model()?;
    let out = cfg.out_dir();
    let mut written = Vec::new();
    for task in &cfg.evalmeta.tasks {
        let spec = cfg.load_spec(&task.prompt)?;
        let gold: Vec<&str> = corpus
            .iter()
            .map(|d| {
                d.meta
                    .get(&task.gold)
                    .map(String::as_str)
                    .ok_or_else(|| Error::invalid(format!("document `{}` has no `{}` metadata", d.id, task.gold)))
            })
            .collect::<Result<_>>()?;
        if let Some(bad) = gold.iter().find(|g| !spec.labels.has_label(g)) {
            return Err(Error::UnknownGoldLabel(bad.to_string()));
        }
        let scorer = Scorer::new(backend.as_ref(), &spec)?;
        let scores = scorer.score_corpus(&corpus, cfg.jobs)?;
        let pred: Vec<String> = scores
            .iter()
            .map(|s| classify(&s.distribution).unwrap_or_default().to_string())
            .collect();
        let labels: Vec<String> = spec.labels.labels().map(String::from).collect();
        let gold_owned: Vec<String> = gold.iter().map(|g| g.to_string()).collect();
        let rep = report(&confusion_with_labels(&pred, &gold_owned, &labels)?)?;
        let stem = format!("evalmeta_{}", spec.name);
        written.push(write_with(&out.join(format!("{stem}.txt")), |w| {
            w.write_all(rep.render_text().as_bytes()).map_err(|e| Error::io("<report>", e))
        })?);
        written.push(write_with(&out.join(format!("{stem}.csv")), |w| rep.write_csv(w))?);
        written.push(write_with(&out.join(format!("{stem}_predictions.csv")), |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["id", "gold", "predicted"])?;
            for ((d, g), p) in corpus.iter().zip(&gold).zip(&pred) {
                c.write_record([d.id.as_str(), g, p])?;
            }
            c.flush().map_err(|e| Error::io("<csv>", e))
        })?);
    }
    Ok(written)
}

fn parse_flag(doc: &str, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("document `{doc}`: flag `{key}` has non-boolean value `{v}`"))),
    }
}

fn base_letters(corpus: &Corpus, flags: &[String]) -> Result<BTreeMap<String, LetterScore>> {
    let mut out = BTreeMap::new();
    for d in corpus {
        let mut l = LetterScore {
            letter_id: d.id.clone(),
            candidate_id: d.candidate_id.clone(),
            word_count: d.word_count,
            ..Default::default()
        };
        for (k, v) in &d.meta {
            if flags.contains(k) {
                l.flags.insert(k.clone(), parse_flag(&d.id, k, v)?);
            } else {
                l.meta.insert(k.clone(), v.clone());
            }
        }
        out.insert(d.id.clone(), l);
    }
    Ok(out)
}

/// Candidate-level table: letter counts, length, flags and the complete-
/// application indicator, then `<measure>_...` columns per measure, then
/// candidate metadata. Written to `aggregates.csv`.
pub fn cmd_aggregate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let measures = cfg.measures()?;
    if measures.is_empty() {
        return Err(Error::invalid("no measures to aggregate"));
    }
    let corpus = cfg.load_corpus()?;
    let letters = base_letters(&corpus, &cfg.aggregate.flags)?;
    let base = aggregate(&letters.values().cloned().collect::<Vec<_>>());

    let mut per_measure = Vec::new();
    for m in &measures {
        let path = cfg.in_out(&m.file);
        let t = Table::load(&path)?;
        let ids = t.text("id")?;
        let vals = t.numeric(&m.column)?;
        let mass_cols: Vec<(String, Vec<Option<f64>>)> = t
            .names()
            .iter()
            .filter_map(|n| n.strip_prefix("mass_").map(|l| (l.to_string(), n.clone())))
            .map(|(l, n)| Ok((l, t.numeric(&n)?)))
            .collect::<Result<_>>()?;
        let mut scored = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let id = id.ok_or_else(|| Error::MalformedRecord {
                line: i + 2,
                reason: format!("{}: missing id", path.display()),
            })?;
            let mut l = letters
                .get(id)
                .ok_or_else(|| Error::invalid(format!("{}: letter `{id}` is not in the corpus", path.display())))?
                .clone();
            l.polarity = vals[i];
            for (label, col) in &mass_cols {
                if let Some(v) = col[i] {
                    l.labels.insert(label.clone(), v);
                }
            }
            scored.push(l);
        }
        if scored.len() != letters.len() {
            log::warn!("measure {}: {} of {} letters scored", m.name, scored.len(), letters.len());
        }
        let by_cand: BTreeMap<String, _> = aggregate(&scored).into_iter().map(|a| (a.candidate_id.clone(), a)).collect();
        per_measure.push((m, by_cand));
    }

    let flags: BTreeSet<&String> = base.iter().flat_map(|a| a.flag_counts.keys()).collect();
    let metas: BTreeSet<&String> = base.iter().flat_map(|a| a.meta.keys()).collect();
    let mut names: Vec<String> = ["candidate_id", "n_letters", LENGTH_COLUMN, "has_adviser_letter", COMPLETE_COLUMN]
        .map(String::from)
        .to_vec();
    names.extend(flags.iter().map(|f| format!("n_{f}")));
    let mut label_sets = Vec::new();
    for (m, by_cand) in &per_measure {
        let labels: BTreeSet<String> = by_cand.values().flat_map(|a| a.avg_label_pp.keys().cloned()).collect();
        for c in ["n_undefined", "avg_sentiment_pp", "range_pp", "mad_pp", "sd_pp"] {
            names.push(format!("{}_{c}", m.name));
        }
        names.extend(labels.iter().map(|l| format!("{}_avg_{l}_pp", m.name)));
        label_sets.push(labels);
    }
    names.extend(metas.iter().map(|m| m.to_string()));

    let rows = base
        .iter()
        .map(|a| {
            let complete = a.n_letters >= 3 && a.has_adviser_letter;
            let mut row: Vec<Option<String>> = vec![
                Some(a.candidate_id.clone()),
                Some(a.n_letters.to_string()),
                Some(format_number(a.avg_length_thousands)),
                Some(u8::from(a.has_adviser_letter).to_string()),
                Some(u8::from(complete).to_string()),
            ];
            row.extend(flags.iter().map(|f| Some(a.flag_counts.get(*f).copied().unwrap_or(0).to_string())));
            for ((_, by_cand), labels) in per_measure.iter().zip(&label_sets) {
                let m = by_cand.get(&a.candidate_id);
                row.push(m.map(|m| m.n_undefined.to_string()));
                for v in [
                    m.and_then(|m| m.avg_sentiment_pp),
                    m.and_then(|m| m.range_pp),
                    m.and_then(|m| m.mad_pp),
                    m.and_then(|m| m.sd_pp),
                ] {
                    row.push(v.map(format_number));
                }
                row.extend(labels.iter().map(|l| m.and_then(|m| m.avg_label_pp.get(l)).map(|x| format_number(*x))));
            }
            row.extend(metas.iter().map(|k| a.meta.get(*k).cloned()));
            row
        })
        .collect();
    let table = Table::new(names, rows)?;
    Ok(vec![write_with(&cfg.out_dir().join(AGGREGATES_FILE), |w| table.write_csv(w))?])
}

fn load_aggregates(cfg: &RunConfig, input: &Option<PathBuf>) -> Result<Table> {
    let path = cfg.in_out(input.as_deref().unwrap_or(Path::new(AGGREGATES_FILE)));
    Table::load(path)
}

fn sample_rows(table: &Table, sample: Sample) -> Result<Table> {
    match sample {
        Sample::Full => Ok(table.clone()),
        Sample::Complete => {
            let flag = table.numeric(COMPLETE_COLUMN)?;
            Ok(table.filter_rows(|i| flag[i] == Some(1.0)))
        }
    }
}

/// One fitted (or failed) specification in the regression grid.
#[derive(Debug, Clone)]
struct GridFit {
    measure: String,
    variant: String,
    outcome: String,
    controls: String,
    sample: Sample,
    /// Terms whose p-values are summarized.
    focus: Vec<String>,
    result: Result<crate::stats::RegressionFit, String>,
}

/// Type-7 quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits every cell of measures × outcomes × control sets × samples, each
/// with HC0 and one clustered regime per cluster column, and writes the
/// stacked coefficients, the failed cells and a p-value summary per
/// measure and focus term.
pub fn cmd_regress(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let rc = &cfg.regress;
    if rc.clusters.len() > 2 {
        return Err(Error::invalid("at most two cluster columns"));
    }
    let table = load_aggregates(cfg, &rc.input)?;
    let measures: Vec<String> = if rc.measures.is_empty() {
        cfg.measures()?.into_iter().map(|m| m.name).collect()
    } else {
        rc.measures.clone()
    };
    if measures.is_empty() || rc.outcomes.is_empty() || rc.controls.is_empty() || rc.samples.is_empty() {
        return Err(Error::invalid("regression grid has an empty dimension"));
    }
    let samples: BTreeMap<Sample, Table> = rc
        .samples
        .iter()
        .chain(if rc.dispersion.is_empty() { None } else { Some(&Sample::Complete) })
        .map(|&s| Ok((s, sample_rows(&table, s)?)))
        .collect::<Result<_>>()?;

    struct Cell<'a> {
        measure: &'a str,
        variant: String,
        extra: Option<String>,
        outcome: &'a str,
        controls: &'a ControlSet,
        sample: Sample,
    }
    let mut cells = Vec::new();
    for m in &measures {
        let mut variants = vec![("baseline".to_string(), None, rc.samples.clone())];
        for d in &rc.dispersion {
            if !["range", "mad", "sd"].contains(&d.as_str()) {
                return Err(Error::invalid(format!("unknown dispersion measure `{d}` (range, mad, sd)")));
            }
            variants.push((format!("dispersion_{d}"), Some(format!("{m}_{d}_pp")), vec![Sample::Complete]));
        }
        for (variant, extra, variant_samples) in &variants {
            for o in &rc.outcomes {
                for c in &rc.controls {
                    for &s in variant_samples {
                        cells.push(Cell {
                            measure: m,
                            variant: variant.clone(),
                            extra: extra.clone(),
                            outcome: o,
                            controls: c,
                            sample: s,
                        });
                    }
                }
            }
        }
    }

    let fits: Vec<GridFit> = cfg.pool()?.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let sentiment = format!("{}_avg_sentiment_pp", cell.measure);
                let mut spec = ModelSpec::new(cell.outcome);
                spec.continuous.push(LENGTH_COLUMN.into());
                spec.continuous.push(sentiment.clone());
                let mut focus = vec![sentiment];
                if let Some(x) = &cell.extra {
                    spec.continuous.push(x.clone());
                    focus.push(x.clone());
                }
                spec.continuous.extend(cell.controls.continuous.iter().cloned());
                if let Some(y) = &rc.year {
                    spec = spec.categorical(y, None);
                }
                for c in &cell.controls.categorical {
                    spec = spec.categorical(c, None);
                }
                spec.cluster_columns = rc.clusters.clone();
                let result = fit_model(&samples[&cell.sample], &spec, rc.small_sample).map_err(|e| e.to_string());
                GridFit {
                    measure: cell.measure.to_string(),
                    variant: cell.variant.clone(),
                    outcome: cell.outcome.to_string(),
                    controls: cell.controls.name.clone(),
                    sample: cell.sample,
                    focus,
                    result,
                }
            })
            .collect()
    });

    let out = cfg.out_dir();
    let regimes: Vec<String> = std::iter::once(HC0.to_string())
        .chain(rc.clusters.iter().map(|c| cluster_regime_name(c)))
        .collect();
    let mut written = Vec::new();
    written.push(write_with(&out.join("regress_coefficients.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "measure", "variant", "outcome", "controls", "sample", "regime", "term", "estimate", "se", "z", "p_value",
            "n", "adj_r2",
        ])?;
        for f in &fits {
            if let Ok(fit) = &f.result {
                for r in fit.rows() {
                    c.write_record([
                        f.measure.clone(),
                        f.variant.clone(),
                        f.outcome.clone(),
                        f.controls.clone(),
                        f.sample.name().into(),
                        r.regime,
                        r.term,
                        format_number(r.estimate),
                        format_number(r.se),
                        format_number(r.z),
                        format_number(r.p_value),
                        fit.n.to_string(),
                        format_number(fit.adj_r2),
                    ])?;
                }
            }
        }
        c.flush().map_err(|e| Error::io("<csv>", e))
    })?);
    written.push(write_with(&out.join("regress_failures.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["measure", "variant", "outcome", "controls", "sample", "error"])?;
        for f in &fits {
            if let Err(e) = &f.result {
                c.write_record([&f.measure, &f.variant, &f.outcome, &f.controls, f.sample.name(), e])?;
            }
        }
        c.flush().map_err(|e| Error::io("<csv>", e))
    })?);

    // (measure, variant, term) -> (cells, failures, p-values)
    let mut groups: BTreeMap<(String, String, String), (usize, usize, Vec<f64>)> = BTreeMap::new();
    for f in &fits {
        for term in &f.focus {
            let g = groups
                .entry((f.measure.clone(), f.variant.clone(), term.clone()))
                .or_default();
            g.0 += regimes.len();
            match &f.result {
                Ok(fit) => {
                    for r in &regimes {
                        match fit.se(term, r) {
                            Some(se) => g.2.push(crate::stats::normal_p_value(fit.coefficient(term).unwrap_or(0.0) / se)),
                            None => g.1 += 1,
                        }
                    }
                }
                Err(_) => g.1 += regimes.len(),
            }
        }
    }
    written.push(write_with(&out.join("regress_summary.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "measure", "variant", "term", "n_cells", "n_failed", "p_min", "p_q25", "p_median", "p_q75", "p_max",
            "share_p_lt_0.05", "share_p_lt_0.01",
        ])?;
        for ((m, v, term), (n, failed, ps)) in &mut groups {
            ps.sort_by(f64::total_cmp);
            let q = |x: f64| (!ps.is_empty()).then(|| quantile(ps, x));
            let share = |t: f64| (!ps.is_empty()).then(|| ps.iter().filter(|&&p| p < t).count() as f64 / ps.len() as f64);
            c.write_record([
                m.clone(),
                v.clone(),
                term.clone(),
                n.to_string(),
                failed.to_string(),
                fmt(q(0.0)),
                fmt(q(0.25)),
                fmt(q(0.5)),
                fmt(q(0.75)),
                fmt(q(1.0)),
                fmt(share(0.05)),
                fmt(share(0.01)),
            ])?;
        }
        c.flush().map_err(|e| Error::io("<csv>", e))
    })?);
    let n_failed = fits.iter().filter(|f| f.result.is_err()).count();
    if n_failed > 0 {
        log::warn!("{n_failed} of {} regression fits failed; see regress_failures.csv", fits.len());
    }
    Ok(written)
}

fn forest_features(cfg: &RunConfig) -> Result<Vec<FeatureSpec>> {
    let fc = &cfg.forest;
    let mut specs: Vec<FeatureSpec> = fc.continuous.iter().map(|c| FeatureSpec::continuous(c)).collect();
    specs.extend(fc.categorical.iter().map(|c| FeatureSpec::categorical(c)));
    if specs.is_empty() {
        specs.push(FeatureSpec::continuous(LENGTH_COLUMN));
        for m in cfg.measures()? {
            specs.push(FeatureSpec::continuous(&format!("{}_avg_sentiment_pp", m.name)));
        }
    }
    Ok(specs)
}

fn forest_data(cfg: &RunConfig, specs: &[FeatureSpec]) -> Result<Dataset> {
    let table = sample_rows(&load_aggregates(cfg, &cfg.forest.input)?, cfg.forest.sample)?;
    Dataset::from_table(&table, specs, &cfg.forest.outcome)
}

fn pd_file_name(features: &[&str]) -> String {
    let safe: Vec<String> = features
        .iter()
        .map(|f| f.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect())
        .collect();
    format!("pd_{}.csv", safe.join("__"))
}

/// Trains the forest on the aggregates and writes `forest.json`, the OOB
/// report (text and CSV), `importance.csv` and one `pd_*.csv` per
/// configured feature set.
pub fn cmd_forest(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let fc = &cfg.forest;
    let specs = forest_features(cfg)?;
    let data = forest_data(cfg, &specs)?;
    let rf = fc.rf.clone().with_seed(cfg.seed);
    let forest = cfg.pool()?.install(|| fit_forest(&data, &rf))?;
    let out = cfg.out_dir();
    let mut written = Vec::new();
    written.push(write_with(&out.join(FOREST_FILE), |w| {
        w.write_all(forest.to_json()?.as_bytes()).map_err(|e| Error::io(FOREST_FILE, e))
    })?);

    let oob = oob_report(&forest, &data)?;
    written.push(write_with(&out.join("oob_report.txt"), |w| {
        let text = format!(
            "outcome: {}\nrows: {} ({} dropped for missing values)\nout-of-bag rows: {} ({} excluded)\n\n{}",
            fc.outcome,
            data.n_rows(),
            data.dropped(),
            oob.covered,
            oob.excluded,
            oob.report.render_text()
        );
        w.write_all(text.as_bytes()).map_err(|e| Error::io("oob_report.txt", e))
    })?);
    written.push(write_with(&out.join("oob_report.csv"), |w| oob.report.write_csv(w))?);

    let importances: Vec<(String, Vec<f64>)> = cfg.pool()?.install(|| {
        data.names()
            .par_iter()
            .map(|f| Ok((f.clone(), permutation_importance(&forest, &data, f, fc.importance_repeats, fc.importance_mode)?)))
            .collect::<Result<_>>()
    })?;
    written.push(write_with(&out.join("importance.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["feature", "repeat", "decrease"])?;
        for (f, vals) in &importances {
            for (r, v) in vals.iter().enumerate() {
                c.write_record([f.clone(), r.to_string(), format_number(*v)])?;
            }
        }
        c.flush().map_err(|e| Error::io("<csv>", e))
    })?);

    let pd_sets: Vec<Vec<String>> = if fc.pd.is_empty() {
        specs.iter().filter(|s| !s.categorical).map(|s| vec![s.name.clone()]).collect()
    } else {
        fc.pd.clone()
    };
    for set in &pd_sets {
        let names: Vec<&str> = set.iter().map(String::as_str).collect();
        let pd = cfg
            .pool()?
            .install(|| partial_dependence(&forest, &data, &names, None, fc.target_class.as_deref()))?;
        written.push(write_with(&out.join(pd_file_name(&names)), |w| pd.write_csv(w))?);
    }
    Ok(written)
}

/// Partial dependence of a saved forest (default `forest.json` in the
/// output directory) on one or two features, over default grids.
pub fn cmd_pd(cfg: &RunConfig, features: &[String], forest_path: Option<&Path>, target: Option<&str>) -> Result<PathBuf> {
    let path = cfg.in_out(forest_path.unwrap_or(Path::new(FOREST_FILE)));
    let forest = Forest::load(&path)?;
    let data = forest_data(cfg, &forest.feature_specs())?;
    let names: Vec<&str> = features.iter().map(String::as_str).collect();
    let target = target.or(cfg.forest.target_class.as_deref());
    let pd = cfg.pool()?.install(|| partial_dependence(&forest, &data, &names, None, target))?;
    write_with(&cfg.out_dir().join(pd_file_name(&names)), |w| pd.write_csv(w))
}

/// Machine-readable error record written next to the artifacts.
pub fn write_error_record(out_dir: &Path, command: &str, err: &Error) -> Result<PathBuf> {
    let record = serde_json::json!({
        "command": command,
        "kind": err.kind(),
        "message": err.to_string(),
    });
    write_with(&out_dir.join("error.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io("error.json", e))
    })
}
