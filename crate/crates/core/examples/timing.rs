//! Times tokenization and embedding generation per text on one thread.

#[path = "support/mod.rs"]
mod support;

use crisis_kit::evalsuite::timing_bench;

fn main() -> anyhow::Result<()> {
    let corpus = support::corpus();
    let enc = support::pretrained_encoder(&corpus)?;
    let (texts, _) = support::held_out(&corpus, 25);
    let report = timing_bench(&enc, &texts, 5)?;
    println!("milliseconds per text over {} texts x 5 passes", texts.len());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
