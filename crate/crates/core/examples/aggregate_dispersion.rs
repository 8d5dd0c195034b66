//! Candidate-level averages and sentiment dispersion from letter scores.

use promptsent::aggregate::{aggregate, complete_applications, write_aggregates_csv, LetterScore, ADVISER_FLAG};

fn letter(id: &str, cand: &str, words: usize, pol: Option<f64>, adviser: bool) -> LetterScore {
    LetterScore {
        letter_id: id.into(),
        candidate_id: cand.into(),
        word_count: words,
        polarity: pol,
        flags: [(ADVISER_FLAG.to_string(), adviser)].into(),
        ..Default::default()
    }
}

fn main() -> anyhow::Result<()> {
    let letters = vec![
        letter("a1", "A", 1200, Some(0.05), true),
        letter("a2", "A", 800, Some(0.07), false),
        letter("a3", "A", 1000, Some(0.10), false),
        letter("b1", "B", 2000, Some(0.07), true),
        letter("c1", "C", 900, None, false),
        letter("c2", "C", 1500, Some(-0.02), false),
        letter("c3", "C", 700, Some(0.12), false),
    ];
    let aggs = aggregate(&letters);
    write_aggregates_csv(&aggs, std::io::stdout())?;
    let complete: Vec<String> = complete_applications(&aggs).into_iter().map(|a| a.candidate_id).collect();
    println!("\ncomplete applications: {complete:?}");
    Ok(())
}
