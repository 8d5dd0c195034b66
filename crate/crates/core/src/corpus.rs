//! Text corpora: documents with metadata, loading from JSONL/CSV, and
//! word/sentence segmentation.
//!
//! A *word* is a maximal run of non-whitespace characters. Length statistics
//! never depend on a model tokenizer, so they are identical across backends.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One text unit (a letter) and its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub candidate_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub writer_id: Option<String>,
    /// Opaque string metadata; categorical encoding happens in `stats`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
    #[serde(skip)]
    pub word_count: usize,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, candidate_id: impl Into<String>) -> Self {
        let text = text.into();
        Document {
            id: id.into(),
            word_count: word_count(&text),
            text,
            candidate_id: candidate_id.into(),
            writer_id: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_writer(mut self, writer_id: impl Into<String>) -> Self {
        self.writer_id = Some(writer_id.into());
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess from a file extension; anything other than `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::invalid(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Ordered collection of documents with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
}

impl Corpus {
    /// Builds a corpus, recomputing word counts and rejecting duplicate ids.
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        let mut documents = documents;
        for doc in &mut documents {
            if !seen.insert(doc.id.clone()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
            doc.word_count = word_count(&doc.text);
        }
        Ok(Corpus { documents })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.documents.iter()
    }
}

/// Number of maximal whitespace-separated substrings.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkUnit {
    Word,
    Sentence,
}

/// Splits text into sentences ending in `.`, `!` or `?` followed by
/// whitespace (or the end of the text). Each sentence is trimmed.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                Some((_, next)) => next.is_whitespace(),
                None => true,
            };
            if at_boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Groups the text's units into chunks of `max_units`; only the last chunk
/// may be shorter. Units inside a chunk are joined by a single space.
///
/// When the whole text fits into one chunk it is returned unchanged.
/// Text without any unit yields no chunks.
pub fn chunk(text: &str, max_units: usize, unit: ChunkUnit) -> Vec<String> {
    assert!(max_units >= 1, "max_units must be at least 1");
    let units: Vec<&str> = match unit {
        ChunkUnit::Word => text.split_whitespace().collect(),
        ChunkUnit::Sentence => sentences(text),
    };
    if units.is_empty() {
        return Vec::new();
    }
    if units.len() <= max_units {
        return vec![text.to_string()];
    }
    units.chunks(max_units).map(|c| c.join(" ")).collect()
}

#[derive(Debug, Deserialize)]
struct JsonlRecord {
    id: Option<String>,
    text: Option<String>,
    candidate_id: Option<String>,
    #[serde(default)]
    writer_id: Option<String>,
    #[serde(default)]
    meta: Option<serde_json::Map<String, Value>>,
}

fn meta_value_to_string(key: &str, value: &Value, line: usize) -> Result<String> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(Error::MalformedRecord {
            line,
            reason: format!("meta value for `{key}` must be a scalar"),
        }),
    }
}

fn require(field: Option<String>, name: &str, line: usize) -> Result<String> {
    field.ok_or_else(|| Error::MalformedRecord {
        line,
        reason: format!("missing required field `{name}`"),
    })
}

fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        let mut meta = BTreeMap::new();
        for (k, v) in rec.meta.unwrap_or_default() {
            let s = meta_value_to_string(&k, &v, line_no)?;
            meta.insert(k, s);
        }
        let mut doc = Document::new(
            require(rec.id, "id", line_no)?,
            require(rec.text, "text", line_no)?,
            require(rec.candidate_id, "candidate_id", line_no)?,
        );
        doc.writer_id = rec.writer_id;
        doc.meta = meta;
        docs.push(doc);
    }
    Ok(docs)
}

fn parse_csv<R: std::io::Read>(reader: R) -> Result<Vec<Document>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, text_col, cand_col) = match (col("id"), col("text"), col("candidate_id")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::MalformedRecord {
                line: 1,
                reason: "header must contain id, text and candidate_id".into(),
            })
        }
    };
    let writer_col = col("writer_id");
    let meta_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("meta_").map(|k| (i, k.to_string())))
        .collect();

    let mut docs = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        // header occupies line 1
        let line_no = idx + 2;
        let rec = rec.map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        let mut doc = Document::new(&rec[id_col], &rec[text_col], &rec[cand_col]);
        if doc.id.is_empty() {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: "empty id".into(),
            });
        }
        doc.writer_id = writer_col.map(|c| rec[c].to_string()).filter(|w| !w.is_empty());
        for (c, key) in &meta_cols {
            // empty cells mean "absent"
            if !rec[*c].is_empty() {
                doc.meta.insert(key.clone(), rec[*c].to_string());
            }
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads a corpus, preserving record order.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let docs = match format {
        CorpusFormat::Jsonl => parse_jsonl(BufReader::new(file))?,
        CorpusFormat::Csv => parse_csv(BufReader::new(file))?,
    };
    Corpus::new(docs)
}

/// Parses a JSONL corpus held in memory.
pub fn corpus_from_jsonl_str(s: &str) -> Result<Corpus> {
    Corpus::new(parse_jsonl(s.as_bytes())?)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, format: CorpusFormat, out: W) -> Result<()> {
    match format {
        CorpusFormat::Jsonl => {
            let mut out = BufWriter::new(out);
            for doc in corpus {
                let line = serde_json::to_string(doc)?;
                writeln!(out, "{line}").map_err(|e| Error::io("<writer>", e))?;
            }
            out.flush().map_err(|e| Error::io("<writer>", e))?;
        }
        CorpusFormat::Csv => {
            let keys: BTreeSet<&str> = corpus
                .iter()
                .flat_map(|d| d.meta.keys().map(String::as_str))
                .collect();
            let mut wtr = csv::Writer::from_writer(out);
            let mut header = vec!["id".to_string(), "text".into(), "candidate_id".into(), "writer_id".into()];
            header.extend(keys.iter().map(|k| format!("meta_{k}")));
            wtr.write_record(&header)?;
            for doc in corpus {
                let mut row = vec![
                    doc.id.clone(),
                    doc.text.clone(),
                    doc.candidate_id.clone(),
                    doc.writer_id.clone().unwrap_or_default(),
                ];
                row.extend(keys.iter().map(|k| doc.meta.get(*k).cloned().unwrap_or_default()));
                wtr.write_record(&row)?;
            }
            wtr.flush().map_err(|e| Error::io("<writer>", e))?;
        }
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>, format: CorpusFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, format, file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp_with(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn word_count_examples() {
        assert_eq!(word_count(""), 0);
        assert_eq!(word_count("Dear colleagues,"), 2);
        assert_eq!(word_count("a  b\nc"), 3);
        assert_eq!(word_count("\u{2003}x\u{00A0}y "), 2);
    }

    #[test]
    fn loads_three_records() {
        let f = tmp_with(
            concat!(
                r#"{"id":"L1","text":"one two","candidate_id":"C1"}"#, "\n",
                r#"{"id":"L2","text":"three","candidate_id":"C1","writer_id":"W9","meta":{"sex":"F","year":2019}}"#, "\n",
                r#"{"id":"L3","text":"","candidate_id":"C2"}"#, "\n",
            ),
            ".jsonl",
        );
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.documents()[0].word_count, 2);
        assert_eq!(c.documents()[1].meta["year"], "2019");
        assert_eq!(c.documents()[1].writer_id.as_deref(), Some("W9"));
        assert_eq!(c.documents()[2].word_count, 0);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let f = tmp_with(
            concat!(
                r#"{"id":"L1","text":"a","candidate_id":"C1"}"#, "\n",
                r#"{"id":"L1","text":"b","candidate_id":"C2"}"#, "\n",
            ),
            ".jsonl",
        );
        match load_corpus(f.path(), CorpusFormat::Jsonl) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "L1"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = tmp_with("", ".jsonl");
        assert!(load_corpus(f.path(), CorpusFormat::Jsonl).unwrap().is_empty());
        let f = tmp_with("id,text,candidate_id\n", ".csv");
        assert!(load_corpus(f.path(), CorpusFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn malformed_record_names_line() {
        let f = tmp_with(
            concat!(
                r#"{"id":"L1","text":"a","candidate_id":"C1"}"#, "\n",
                r#"{"id":"L2","text":"b"}"#, "\n",
            ),
            ".jsonl",
        );
        match load_corpus(f.path(), CorpusFormat::Jsonl) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = tmp_with("{not json\n", ".jsonl");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Jsonl),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn csv_meta_columns() {
        let f = tmp_with(
            "id,text,candidate_id,writer_id,meta_sex,meta_field\nL1,\"hello, world\",C1,,F,macro\nL2,bye,C2,W2,,theory\n",
            ".csv",
        );
        let c = load_corpus(f.path(), CorpusFormat::Csv).unwrap();
        assert_eq!(c.documents()[0].text, "hello, world");
        assert_eq!(c.documents()[0].writer_id, None);
        assert_eq!(c.documents()[0].meta["sex"], "F");
        assert!(!c.documents()[1].meta.contains_key("sex"));
        assert_eq!(c.documents()[1].meta["field"], "theory");
    }

    #[test]
    fn chunk_examples() {
        let ten = "a b c d e f g h i j";
        let sizes: Vec<usize> = chunk(ten, 4, ChunkUnit::Word).iter().map(|c| word_count(c)).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(chunk("A. B! C?", 1, ChunkUnit::Sentence), vec!["A.", "B!", "C?"]);
        assert_eq!(chunk("short text", 5, ChunkUnit::Word), vec!["short text"]);
        assert!(chunk("   ", 3, ChunkUnit::Word).is_empty());
        // a dot not followed by whitespace does not end a sentence
        assert_eq!(sentences("Dr.Smith is here. Yes"), vec!["Dr.Smith is here.", "Yes"]);
    }

    fn arb_doc() -> impl Strategy<Value = Document> {
        (
            "[A-Za-z0-9]{1,8}",
            "[ a-zA-Z.,!?\n\"]{0,40}",
            "[A-Z][0-9]{1,3}",
            proptest::option::of("[a-z]{1,5}"),
            proptest::collection::btree_map("[a-z]{1,6}", "[a-zA-Z0-9 ,]{1,6}", 0..4),
        )
            .prop_map(|(id, text, cand, writer, meta)| {
                let mut d = Document::new(id, text, cand);
                d.writer_id = writer;
                d.meta = meta;
                d
            })
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        proptest::collection::vec(arb_doc(), 0..8).prop_map(|docs| {
            let mut seen = HashSet::new();
            Corpus::new(docs.into_iter().filter(|d| seen.insert(d.id.clone())).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn chunk_word_counts_sum(text in "[ a-z\n\t]{0,200}", k in 1usize..12) {
            let total: usize = chunk(&text, k, ChunkUnit::Word).iter().map(|c| word_count(c)).sum();
            prop_assert_eq!(total, word_count(&text));
        }

        #[test]
        fn chunks_are_full_except_last(text in "[ a-z]{0,200}", k in 1usize..12) {
            let chunks = chunk(&text, k, ChunkUnit::Word);
            if chunks.len() > 1 {
                for c in &chunks[..chunks.len() - 1] {
                    prop_assert_eq!(word_count(c), k);
                }
                let joined = chunks.join(" ");
                let expected: Vec<&str> = text.split_whitespace().collect();
                prop_assert_eq!(joined.split(' ').collect::<Vec<_>>(), expected);
            }
        }

        #[test]
        fn round_trip_both_formats(corpus in arb_corpus()) {
            for format in [CorpusFormat::Jsonl, CorpusFormat::Csv] {
                let mut buf = Vec::new();
                write_corpus(&corpus, format, &mut buf).unwrap();
                let reloaded = match format {
                    CorpusFormat::Jsonl => Corpus::new(parse_jsonl(buf.as_slice()).unwrap()).unwrap(),
                    CorpusFormat::Csv => Corpus::new(parse_csv(buf.as_slice()).unwrap()).unwrap(),
                };
                prop_assert_eq!(&reloaded, &corpus);
            }
        }
    }
}
