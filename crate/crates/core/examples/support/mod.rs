//! Shared setup for the examples: a synthetic topic corpus and a small
//! encoder pre-trained on it.

#![allow(dead_code)]

use crisis_kit::bpe::{frame_documents, pack_blocks, train_bpe};
use crisis_kit::contrastive::SentenceEncoder;
use crisis_kit::encoder::{init_params, EncoderConfig};
use crisis_kit::mlm::{pretrain_from, PretrainConfig};
use crisis_kit::pooling::PoolingStrategy;
use crisis_kit::synth::{TopicCorpus, TopicCorpusConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn corpus() -> TopicCorpus {
    TopicCorpus::new(TopicCorpusConfig::default())
}

/// A 2-layer, 32-wide encoder after a few epochs of MLM on `corpus`.
pub fn pretrained_encoder(corpus: &TopicCorpus) -> anyhow::Result<SentenceEncoder> {
    let docs: Vec<String> = corpus
        .documents(150, 20, &mut ChaCha8Rng::seed_from_u64(1))
        .into_iter()
        .map(|(_, d)| d)
        .collect();
    let tokenizer = train_bpe(&docs, 600)?;
    let blocks = pack_blocks(frame_documents(docs.iter().map(|d| tokenizer.encode(d))), 64).blocks;
    let (train, val) = blocks.split_at(blocks.len() * 9 / 10);
    let cfg = EncoderConfig {
        hidden_size: 32,
        intermediate_size: 128,
        max_position_embeddings: 64,
        vocab_size: tokenizer.vocab_size(),
        ..Default::default()
    };
    let hyper = PretrainConfig { epochs: 3, micro_batch: 4, accumulation_steps: 1, peak_lr: 2e-3, ..Default::default() };
    let set = pretrain_from(init_params(&cfg, hyper.seed)?, train, val, &hyper, |_, _| {})?;
    eprintln!("pre-trained: validation loss {:.3} -> {:.3}", set.initial_loss, set.complete.val_loss);
    Ok(SentenceEncoder::new(set.complete.params, tokenizer, PoolingStrategy::MeanWithAttention)?)
}

/// `per_topic` held-out sentences of every topic with their labels.
pub fn held_out(corpus: &TopicCorpus, per_topic: usize) -> (Vec<String>, Vec<usize>) {
    corpus
        .balanced_sentences(per_topic, &mut ChaCha8Rng::seed_from_u64(99))
        .into_iter()
        .map(|(t, s)| (s, t))
        .unzip()
}
