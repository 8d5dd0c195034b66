//! Fabricated letters with planted metadata, for demos and tests.
//!
//! Each candidate has a latent quality in `[0, 1]`. Quality raises the
//! share of praising sentences in their letters and the probability of
//! each job-market outcome, so the downstream analysis has something to
//! find. Nothing here describes real people.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document};
use crate::error::Result;

pub const OUTCOMES: [&str; 5] = ["success_baseline", "success_alt1", "success_alt2", "success_alt3", "success_alt4"];

pub const SEXES: [&str; 2] = ["female", "male"];
pub const REGIONS: [&str; 4] = ["asia", "europe", "latin_america", "north_america"];
pub const FIELDS: [&str; 5] = ["applied", "finance", "macro", "metrics", "theory"];
pub const RANK_GROUPS: [&str; 3] = ["top10", "top11_30", "other"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_documents: usize,
    pub seed: u64,
    /// Letters per candidate are drawn from this range (inclusive).
    pub min_letters: usize,
    pub max_letters: usize,
}

impl SynthConfig {
    pub fn new(n_documents: usize, seed: u64) -> Self {
        SynthConfig {
            n_documents,
            seed,
            min_letters: 1,
            max_letters: 5,
        }
    }
}

const PRAISE: [&str; 12] = [
    "excellent",
    "outstanding",
    "exceptional",
    "brilliant",
    "superb",
    "remarkable",
    "impressive",
    "extraordinary",
    "creative",
    "talented",
    "insightful",
    "gifted",
];

const FAINT: [&str; 10] = [
    "average",
    "ordinary",
    "mediocre",
    "modest",
    "limited",
    "inconsistent",
    "unfocused",
    "slow",
    "disappointing",
    "weak",
];

const STANDOUT_TRAITS: [&str; 6] = ["creativity", "originality", "intelligence", "analytical ability", "ambition", "technical skill"];
const GRINDSTONE_TRAITS: [&str; 6] = ["dedication", "diligence", "persistence", "patience", "commitment", "enthusiasm"];

fn field_topics(field: &str) -> &'static [&'static str] {
    match field {
        "applied" => &["labor", "education", "health", "development", "urban"],
        "finance" => &["financial", "asset", "corporate", "portfolio", "risk"],
        "macro" => &["monetary", "fiscal", "growth", "macro", "global"],
        "metrics" => &["structural", "bayesian", "statistical", "instrumental", "computational"],
        _ => &["game", "mechanism", "auction", "decision", "network"],
    }
}

struct Candidate {
    id: String,
    quality: f64,
    sex: &'static str,
    region: &'static str,
    field: &'static str,
    rank: &'static str,
    year: u32,
    univ: String,
    major_pub: bool,
    long_phd: bool,
    outcomes: [bool; 5],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn candidate(i: usize, rng: &mut ChaCha8Rng) -> Candidate {
    let quality: f64 = rng.random();
    let rank = *RANK_GROUPS.choose(rng).expect("non-empty");
    let rank_bonus = match rank {
        "top10" => 0.6,
        "top11_30" => 0.2,
        _ => -0.3,
    };
    let major_pub = rng.random_bool(0.15 + 0.3 * quality);
    let base = -1.2 + 3.0 * (quality - 0.5) + rank_bonus + if major_pub { 0.5 } else { 0.0 };
    let shifts = [0.0, -0.4, 0.4, -0.8, 0.2];
    let mut outcomes = [false; 5];
    for (o, s) in outcomes.iter_mut().zip(shifts) {
        *o = rng.random_bool(sigmoid(base + s));
    }
    Candidate {
        id: format!("C{:04}", i + 1),
        quality,
        sex: if rng.random_bool(0.3) { "female" } else { "male" },
        region: REGIONS.choose(rng).expect("non-empty"),
        field: FIELDS.choose(rng).expect("non-empty"),
        rank,
        year: rng.random_range(2015..=2020),
        univ: format!("U{:02}", rng.random_range(1..=12)),
        major_pub,
        long_phd: rng.random_bool(0.2),
        outcomes,
    }
}

fn letter_text(c: &Candidate, adviser: bool, rng: &mut ChaCha8Rng) -> String {
    let (subj, poss, obj) = if c.sex == "female" { ("She", "her", "her") } else { ("He", "his", "him") };
    let name = format!("Candidate {}", &c.id[1..]);
    let tone = (c.quality + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
    let topics = field_topics(c.field);
    let mut s = Vec::new();
    s.push(if adviser {
        format!("I am writing as the main adviser of {name} to recommend {obj} for a position in your department.")
    } else {
        format!("I am pleased to write in support of {name}, whom I know from seminars and joint work.")
    });
    let n_body = rng.random_range(4..=10);
    for _ in 0..n_body {
        let topic = topics.choose(rng).expect("non-empty");
        let sentence = if rng.random_bool(0.2 + 0.7 * tone) {
            let w = PRAISE.choose(rng).expect("non-empty");
            let t = STANDOUT_TRAITS.choose(rng).expect("non-empty");
            match rng.random_range(0..3) {
                0 => format!("{subj} is an {w} economist whose work on {topic} questions shows real {t}."),
                1 => format!("The job market paper on {topic} economics is {w}, and it displays {poss} {t}."),
                _ => format!("In my experience {poss} research on {topic} topics is consistently {w}."),
            }
        } else {
            let w = FAINT.choose(rng).expect("non-empty");
            let t = GRINDSTONE_TRAITS.choose(rng).expect("non-empty");
            match rng.random_range(0..3) {
                0 => format!("{subj} has shown {t}, although progress on the {topic} project has been {w}."),
                1 => format!("The contribution of the paper on {topic} issues is {w}, but {poss} {t} is clear."),
                _ => format!("Overall {poss} output in {topic} research is {w} relative to the strongest students."),
            }
        };
        s.push(sentence);
    }
    s.push(format!("I recommend {obj} to your department without reservation."));
    s.join(" ")
}

/// Candidates are created until `n_documents` letters exist; the last one
/// may get fewer letters than drawn. The first letter of a candidate comes
/// from the main adviser with probability 0.85.
pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut docs = Vec::with_capacity(config.n_documents);
    let mut i = 0;
    while docs.len() < config.n_documents {
        let c = candidate(i, &mut rng);
        i += 1;
        let drawn = rng.random_range(config.min_letters.max(1)..=config.max_letters.max(config.min_letters.max(1)));
        let n = drawn.min(config.n_documents - docs.len());
        let has_adviser = rng.random_bool(0.85);
        for k in 0..n {
            let adviser = has_adviser && k == 0;
            let text = letter_text(&c, adviser, &mut rng);
            let period = if c.year <= 2017 { "early" } else { "late" };
            let mut d = Document::new(format!("{}-L{}", c.id, k + 1), text, c.id.clone())
                .with_writer(format!("W{:03}", rng.random_range(1..=200)))
                .with_meta("sex", c.sex)
                .with_meta("region", c.region)
                .with_meta("field", c.field)
                .with_meta("phd_rank", c.rank)
                .with_meta("year", c.year.to_string())
                .with_meta("phd_univ", c.univ.clone())
                .with_meta("rank_period", format!("{}_{period}", c.rank))
                .with_meta("major_pub", u8::from(c.major_pub).to_string())
                .with_meta("long_phd", u8::from(c.long_phd).to_string())
                .with_meta("is_adviser", adviser.to_string())
                .with_meta("writer_top5", rng.random_bool(0.3).to_string());
            for (name, o) in OUTCOMES.iter().zip(c.outcomes) {
                d = d.with_meta(*name, u8::from(o).to_string());
            }
            docs.push(d);
        }
    }
    Corpus::new(docs)
}

/// The 20-letter corpus shipped in `data/synthetic_corpus.jsonl`.
pub fn bundled_config() -> SynthConfig {
    SynthConfig::new(20, 2024)
}

pub const BUNDLED_CORPUS_JSONL: &str = include_str!("../data/synthetic_corpus.jsonl");
