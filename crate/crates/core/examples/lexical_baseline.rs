//! Bag-of-words polarity with the toy lexicon, on whole letters and as a
//! sentence-chunk average.

use promptsent::corpus::{corpus_from_jsonl_str, ChunkUnit};
use promptsent::lexical::{chunked_average, default_stopwords, preprocess, score_text, ChunkWeighting, Lexicon};
use promptsent::synth::BUNDLED_CORPUS_JSONL;

fn main() -> anyhow::Result<()> {
    let corpus = corpus_from_jsonl_str(BUNDLED_CORPUS_JSONL)?;
    let lex = Lexicon::toy().stemmed()?;
    let stop = default_stopwords();
    let first = &corpus.documents()[0];
    println!("terms: {:?}\n", &preprocess(&first.text, &stop, true)[..12]);
    for d in corpus.iter().take(8) {
        let whole = score_text(&d.text, &lex, &stop, true);
        let chunked = chunked_average(
            |c| score_text(c, &lex, &stop, true),
            &d.text,
            3,
            ChunkUnit::Sentence,
            ChunkWeighting::ByLength,
        );
        println!("{:<10} whole {:>8} chunked {:>8}", d.id, show(whole), show(chunked));
    }
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.3}"))
}
