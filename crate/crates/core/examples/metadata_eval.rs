//! Predicts the candidate's sex and field from each letter with the
//! metadata prompts and prints the classification reports.

use promptsent::backend::MockBackend;
use promptsent::corpus::corpus_from_jsonl_str;
use promptsent::evalmeta::{confusion_with_labels, report};
use promptsent::prompt::{classify, PromptSpec, Scorer};
use promptsent::synth::BUNDLED_CORPUS_JSONL;

fn main() -> anyhow::Result<()> {
    let corpus = corpus_from_jsonl_str(BUNDLED_CORPUS_JSONL)?;
    let backend = MockBackend::new(42);
    for task in ["sex", "field"] {
        let spec = PromptSpec::bundled(task)?;
        let scores = Scorer::new(&backend, &spec)?.score_corpus(&corpus, 1)?;
        let pred: Vec<String> = scores.iter().map(|s| classify(&s.distribution).unwrap().to_string()).collect();
        let gold: Vec<String> = corpus.iter().map(|d| d.meta[task].clone()).collect();
        let labels: Vec<String> = spec.labels.labels().map(String::from).collect();
        let r = report(&confusion_with_labels(&pred, &gold, &labels)?)?;
        println!("== {task} (mock backend, so near chance) ==\n{}", r.render_text());
    }
    Ok(())
}
