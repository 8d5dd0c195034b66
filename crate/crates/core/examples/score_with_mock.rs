//! Scores the bundled synthetic letters with the sentiment and personality
//! prompts against the deterministic mock backend.

use promptsent::backend::MockBackend;
use promptsent::corpus::corpus_from_jsonl_str;
use promptsent::prompt::{net_standout, polarity, PromptSpec, Scorer};
use promptsent::synth::BUNDLED_CORPUS_JSONL;

fn main() -> anyhow::Result<()> {
    let corpus = corpus_from_jsonl_str(BUNDLED_CORPUS_JSONL)?;
    let backend = MockBackend::new(42);
    let sentiment = PromptSpec::bundled("sentiment")?;
    let personality = PromptSpec::bundled("personality")?;
    let s = Scorer::new(&backend, &sentiment)?.score_corpus(&corpus, 4)?;
    let p = Scorer::new(&backend, &personality)?.score_corpus(&corpus, 4)?;
    println!("{:<10} {:>9} {:>10} {:>13}", "letter", "polarity", "total", "net_standout");
    for (a, b) in s.iter().zip(&p) {
        println!(
            "{:<10} {:>9.4} {:>10.4} {:>13.4}",
            a.id,
            polarity(&a.distribution)?,
            a.distribution.total_mass(),
            net_standout(&b.distribution)?
        );
    }
    Ok(())
}
