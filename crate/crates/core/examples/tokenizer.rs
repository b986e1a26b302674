//! Trains a byte-level BPE tokenizer on synthetic text, round-trips a
//! string the tokenizer never saw and packs documents into blocks.

use crisis_kit::bpe::{frame_documents, pack_blocks, train_bpe, vocab_intersection, BASE_VOCAB};
use crisis_kit::synth::{TopicCorpus, TopicCorpusConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = TopicCorpus::new(TopicCorpusConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let docs: Vec<String> = corpus.documents(200, 5, &mut rng).into_iter().map(|(_, d)| d).collect();

    let small = train_bpe(&docs, BASE_VOCAB + 100)?;
    let large = train_bpe(&docs, BASE_VOCAB + 400)?;
    println!("vocab sizes: {} and {}", small.vocab_size(), large.vocab_size());

    let text = "Flooding on 5th Ave, stay safe 🙏";
    let ids = large.encode(text);
    println!("{} bytes -> {} ids, decodes back: {}", text.len(), ids.len(), large.decode(&ids)? == text);

    let sample = &docs[0][..docs[0].len().min(60)];
    let pieces: Vec<&str> = large.encode(sample).iter().filter_map(|&id| large.token(id)).collect();
    println!("{sample:?}\n  -> {pieces:?}");

    let overlap = vocab_intersection(&small, &large);
    println!("shared tokens {}, only in small {}", overlap.intersection, overlap.unique_in_a);

    let packed = pack_blocks(frame_documents(docs.iter().map(|d| large.encode(d))), 128);
    println!("{} blocks of 128 tokens, {} trailing tokens dropped", packed.blocks.len(), packed.dropped);
    Ok(())
}
