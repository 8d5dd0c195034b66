//! Dictionary baseline: `Σ S / Σ |S|` over the matched terms of a document.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};
use serde::Deserialize;

use crate::corpus::{chunk, word_count, ChunkUnit};
use crate::error::{Error, Result};

pub const TOY_LEXICON_CSV: &str = include_str!("../data/lexicon_toy.csv");
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    name: String,
    scores: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
struct LexiconRow {
    term: String,
    score: f64,
}

impl Lexicon {
    /// Terms are lowercased; a repeated term is an error.
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (term, score) in entries {
            let term = term.trim().to_lowercase();
            if term.is_empty() {
                return Err(Error::invalid("empty lexicon term"));
            }
            if !score.is_finite() {
                return Err(Error::invalid(format!("lexicon score for `{term}` is not finite")));
            }
            if scores.insert(term.clone(), score).is_some() {
                return Err(Error::invalid(format!("lexicon term `{term}` appears twice")));
            }
        }
        Ok(Lexicon {
            name: name.into(),
            scores,
        })
    }

    /// CSV with a `term,score` header.
    pub fn from_csv_reader(name: impl Into<String>, reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<LexiconRow>().enumerate() {
            let row = row.map_err(|e| Error::MalformedRecord {
                line: i + 2,
                reason: e.to_string(),
            })?;
            entries.push((row.term, row.score));
        }
        Self::new(name, entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("lexicon");
        Self::from_csv_reader(name, file)
    }

    /// The bundled 40-term test lexicon (±1 scores).
    pub fn toy() -> Self {
        Self::from_csv_reader("toy", TOY_LEXICON_CSV.as_bytes()).expect("bundled lexicon parses")
    }

    /// Same lexicon keyed by stems, for use with stemmed terms. Terms that
    /// collapse to one stem must agree on the score.
    pub fn stemmed(&self) -> Result<Self> {
        let stemmer = Stemmer::create(Algorithm::English);
        let mut scores: BTreeMap<String, f64> = BTreeMap::new();
        for (term, &score) in &self.scores {
            let stem = stemmer.stem(term).into_owned();
            match scores.get(&stem) {
                Some(&prev) if prev != score => {
                    return Err(Error::invalid(format!("terms stemming to `{stem}` disagree on score")));
                }
                _ => {
                    scores.insert(stem, score);
                }
            }
        }
        Ok(Lexicon {
            name: format!("{}-stemmed", self.name),
            scores,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn score(&self, term: &str) -> Option<f64> {
        self.scores.get(term).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// One lowercase term per non-empty line; `#` starts a comment line.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}

pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

/// Lowercase, drop apostrophes, split on any other non-alphanumeric
/// character, remove stopwords, and optionally stem (Snowball English).
pub fn preprocess(text: &str, stopwords: &BTreeSet<String>, stem: bool) -> Vec<String> {
    let stemmer = stem.then(|| Stemmer::create(Algorithm::English));
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !matches!(c, '\'' | '’'))
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !stopwords.contains(*t))
        .map(|t| match &stemmer {
            Some(s) => s.stem(t).into_owned(),
            None => t.to_string(),
        })
        .collect()
}

/// `Σ S / Σ |S|` over terms found in the lexicon; `None` when nothing
/// with a nonzero score matched.
pub fn lexical_polarity<S: AsRef<str>>(terms: &[S], lexicon: &Lexicon) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for t in terms {
        if let Some(s) = lexicon.score(t.as_ref()) {
            num += s;
            den += s.abs();
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Preprocess and score in one step.
pub fn score_text(text: &str, lexicon: &Lexicon, stopwords: &BTreeSet<String>, stem: bool) -> Option<f64> {
    lexical_polarity(&preprocess(text, stopwords, stem), lexicon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChunkWeighting {
    #[default]
    Unweighted,
    /// Chunks weighted by their word count.
    ByLength,
}

/// Mean of `scorer` over the chunks of `text`, skipping chunks it cannot
/// score. `None` when no chunk has a score.
pub fn chunked_average(
    scorer: impl Fn(&str) -> Option<f64>,
    text: &str,
    max_units: usize,
    unit: ChunkUnit,
    weighting: ChunkWeighting,
) -> Option<f64> {
    assert!(max_units >= 1, "max_units must be at least 1");
    let (mut sum, mut weight) = (0.0, 0.0);
    for c in chunk(text, max_units, unit) {
        if let Some(s) = scorer(&c) {
            let w = match weighting {
                ChunkWeighting::Unweighted => 1.0,
                ChunkWeighting::ByLength => word_count(&c) as f64,
            };
            sum += w * s;
            weight += w;
        }
    }
    (weight > 0.0).then(|| sum / weight)
}
