//! Scores every pooling strategy on padded, variable-length held-out
//! sentences with the same encoder weights.

#[path = "support/mod.rs"]
mod support;

use crisis_kit::evalsuite::evaluate_encoder;
use crisis_kit::pooling::PoolingStrategy;

fn main() -> anyhow::Result<()> {
    let corpus = support::corpus();
    let enc = support::pretrained_encoder(&corpus)?;
    let (texts, labels) = support::held_out(&corpus, 40);
    let lengths: Vec<usize> = texts.iter().map(|t| enc.tokenize(t).len()).collect();
    println!(
        "{} sentences, {}..={} tokens",
        texts.len(),
        lengths.iter().min().unwrap(),
        lengths.iter().max().unwrap()
    );
    for pooling in PoolingStrategy::ALL {
        let d = evaluate_encoder(&enc.with_pooling(pooling), &texts, &labels, corpus.num_topics())?;
        println!("{:<12} D_avg {d:.4}", pooling.name());
    }
    Ok(())
}
