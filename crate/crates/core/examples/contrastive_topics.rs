//! Fine-tunes a pre-trained encoder into a sentence encoder with both
//! in-batch ranking objectives and compares held-out topic coherence.

#[path = "support/mod.rs"]
mod support;

use crisis_kit::contrastive::{train_encoder_observed, ContrastiveConfig, ContrastiveDataset, Objective};
use crisis_kit::evalsuite::evaluate_encoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = support::corpus();
    let base = support::pretrained_encoder(&corpus)?;
    let (texts, labels) = support::held_out(&corpus, 40);
    let k = corpus.num_topics();
    println!("before fine-tuning: D_avg {:.4}", evaluate_encoder(&base, &texts, &labels, k)?);

    let triplets = ContrastiveDataset::Triplets(corpus.triplets(256, &mut ChaCha8Rng::seed_from_u64(7)));
    let hyper = ContrastiveConfig { epochs: 3, batch_size: 32, lr: 5e-4, ..Default::default() };
    for (objective, data) in [(Objective::MnrHard, triplets.clone()), (Objective::Mnr, triplets.to_pairs())] {
        let enc = train_encoder_observed(base.clone(), &data, objective, &hyper, |epoch, loss| {
            println!("  {objective} epoch {epoch}: loss {loss:.4}");
        })?;
        println!("{objective}: D_avg {:.4}", evaluate_encoder(&enc, &texts, &labels, k)?);
    }
    Ok(())
}
