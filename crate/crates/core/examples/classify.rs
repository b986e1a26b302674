//! Fine-tunes a classifier head plus encoder on a stratified split and
//! reports test F1-macro across seeds with a 95% interval.

#[path = "support/mod.rs"]
mod support;

use crisis_kit::classifier::{
    finetune_observed, repeat_finetune, stratified_split, EarlyStopConfig, FinetuneConfig, LabeledDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = support::corpus();
    let enc = support::pretrained_encoder(&corpus)?;
    let (texts, labels): (Vec<String>, Vec<usize>) = corpus
        .labeled_sentences(400, &mut ChaCha8Rng::seed_from_u64(3))
        .into_iter()
        .map(|(t, s)| (s, t))
        .unzip();
    let names = (0..corpus.num_topics()).map(|t| format!("topic-{t}")).collect();
    let data = LabeledDataset::new(texts, labels, names)?;
    let splits = stratified_split(&data, (0.7, 0.1, 0.2), 42)?;
    println!("split sizes {} / {} / {}", splits.0.len(), splits.1.len(), splits.2.len());

    let hyper = FinetuneConfig {
        batch_size: 16,
        lr: 2e-3,
        early_stop: EarlyStopConfig { patience: 3, threshold: 1e-4, max_epochs: 10 },
        ..Default::default()
    };
    finetune_observed(enc.clone(), data.class_names().to_vec(), &splits.0, &splits.1, &hyper, |r| {
        println!("epoch {}: train loss {:.4}, validation F1 {:.4}", r.epoch, r.train_loss, r.val_f1);
    })?;

    let results = repeat_finetune("topics", &enc, &data, &splits, &hyper, &[1, 2, 3])?;
    println!("{}", serde_json::to_string_pretty(&results)?);
    Ok(())
}
