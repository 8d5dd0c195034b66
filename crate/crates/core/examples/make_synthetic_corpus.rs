//! Writes a synthetic letter corpus as JSONL.
//!
//! cargo run --example make_synthetic_corpus -- [n_documents] [seed] [path]

use promptsent::corpus::{save_corpus, CorpusFormat};
use promptsent::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(Ok(20), |s| s.parse())?;
    let seed: u64 = args.get(1).map_or(Ok(2024), |s| s.parse())?;
    let path = args.get(2).map_or("synthetic_corpus.jsonl", String::as_str);
    let corpus = generate(&SynthConfig::new(n, seed))?;
    save_corpus(&corpus, path, CorpusFormat::Jsonl)?;
    let candidates: std::collections::BTreeSet<&str> = corpus.iter().map(|d| d.candidate_id.as_str()).collect();
    println!("wrote {} letters for {} candidates to {path}", corpus.len(), candidates.len());
    Ok(())
}
