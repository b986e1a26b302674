//! Masked-language-model pre-training of a small encoder on a synthetic
//! topic corpus. Writes the three checkpoint variants to a temporary
//! directory and prints the validation loss after each epoch.

use crisis_kit::bpe::{frame_documents, pack_blocks, train_bpe};
use crisis_kit::encoder::{init_params, load_checkpoint, EncoderConfig};
use crisis_kit::mlm::{pretrain_from, PretrainConfig};
use crisis_kit::synth::{TopicCorpus, TopicCorpusConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = TopicCorpus::new(TopicCorpusConfig::default());
    let docs: Vec<String> = corpus
        .documents(150, 20, &mut ChaCha8Rng::seed_from_u64(1))
        .into_iter()
        .map(|(_, d)| d)
        .collect();
    let tokenizer = train_bpe(&docs, 600)?;
    let blocks = pack_blocks(frame_documents(docs.iter().map(|d| tokenizer.encode(d))), 64).blocks;
    let (train, val) = blocks.split_at(blocks.len() * 9 / 10);
    println!("{} training and {} validation blocks", train.len(), val.len());

    let cfg = EncoderConfig {
        hidden_size: 32,
        intermediate_size: 128,
        max_position_embeddings: 64,
        vocab_size: tokenizer.vocab_size(),
        ..Default::default()
    };
    let dir = tempfile::tempdir()?;
    let hyper = PretrainConfig {
        epochs: 4,
        micro_batch: 4,
        accumulation_steps: 1,
        peak_lr: 2e-3,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let set = pretrain_from(init_params(&cfg, hyper.seed)?, train, val, &hyper, |epoch, loss| {
        println!("epoch {epoch}: validation loss {loss:.4}");
    })?;
    println!("best epoch {} ({:.4})", set.best_loss.epoch, set.best_loss.val_loss);

    let reloaded = load_checkpoint(&dir.path().join("complete.ctxf"))?;
    println!("complete checkpoint reloads identically: {}", reloaded == set.complete.params);
    print!("{}", set.loss_csv());
    Ok(())
}
