//! Runs the score -> aggregate -> regress pipeline on a generated corpus
//! and prints the p-value summary of the sentiment coefficients.

use promptsent::corpus::{save_corpus, CorpusFormat};
use promptsent::pipeline::{cmd_aggregate, cmd_regress, cmd_score, RunConfig};
use promptsent::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("promptsent_regression_grid");
    std::fs::create_dir_all(&dir)?;
    save_corpus(&generate(&SynthConfig::new(900, 11))?, dir.join("corpus.jsonl"), CorpusFormat::Jsonl)?;
    let cfg = RunConfig::from_toml_str(
        r#"
        jobs = 0
        out = "out"
        [corpus]
        path = "corpus.jsonl"
        [score]
        prompts = ["sentiment"]
        lexicons = ["toy"]
        [regress]
        dispersion = ["range"]
        "#,
    )?
    .with_base_dir(&dir);
    cmd_score(&cfg)?;
    cmd_aggregate(&cfg)?;
    let files = cmd_regress(&cfg)?;
    print!("{}", std::fs::read_to_string(&files[2])?);
    println!("\nartifacts in {}", cfg.out_dir().display());
    Ok(())
}
