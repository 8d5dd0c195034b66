//! Scores letters with the chat-style instruct client against recorded
//! replies, including one malformed reply that triggers a retry.

use std::sync::Arc;
use std::time::Duration;

use promptsent::backend::{BackendConfig, InstructClient, ReplayTransport};
use promptsent::corpus::load_corpus;

fn main() -> anyhow::Result<()> {
    let fx = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let corpus = load_corpus(fx.join("instruct_corpus.jsonl"), "jsonl".parse()?)?;
    let transport = Arc::new(ReplayTransport::from_file(fx.join("instruct_replay.json"))?);
    let config = BackendConfig {
        model_name: "test-model".into(),
        retry_backoff: Duration::ZERO,
        ..BackendConfig::default()
    };
    let client = InstructClient::with_transport(config, transport.clone())?;
    for d in &corpus {
        println!("{:<4} {:>5}  {}", d.id, client.score(d)?, d.text);
    }
    println!("\n{} requests sent", transport.requests().len());
    Ok(())
}
