use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{split_chunks, TokenizerError, TokenizerModel, BASE_VOCAB, FIRST_BYTE_ID};

type Pair = (u32, u32);

/// Heap entry: highest count first, then the lexicographically smaller
/// (left, right) token-string pair.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    key: Reverse<(String, String)>,
    pair: Pair,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    syms: Vec<u32>,
    count: i64,
}

struct PairStats {
    counts: HashMap<Pair, i64>,
    occurs_in: HashMap<Pair, HashSet<usize>>,
    dirty: HashSet<Pair>,
}

impl PairStats {
    fn add_word(&mut self, idx: usize, w: &Word, sign: i64) {
        for p in w.syms.windows(2) {
            let pair = (p[0], p[1]);
            *self.counts.entry(pair).or_insert(0) += sign * w.count;
            if sign > 0 {
                self.occurs_in.entry(pair).or_default().insert(idx);
            }
            self.dirty.insert(pair);
        }
    }
}

fn merge_word(syms: &[u32], pair: Pair, id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Learns merges until the vocabulary holds `vocab_size` tokens or no pair
/// occurs any more. The most frequent adjacent pair wins; ties go to the
/// lexicographically smaller pair of token strings.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }
    let mut chunk_counts: HashMap<String, i64> = HashMap::new();
    for text in corpus {
        for chunk in split_chunks(text.as_ref()) {
            *chunk_counts.entry(chunk.to_owned()).or_insert(0) += 1;
        }
    }
    if chunk_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut chunks: Vec<(String, i64)> = chunk_counts.into_iter().collect();
    chunks.sort_unstable();
    let mut words: Vec<Word> = chunks
        .into_iter()
        .map(|(s, count)| Word {
            syms: s.bytes().map(|b| FIRST_BYTE_ID + b as u32).collect(),
            count,
        })
        .collect();

    let mut model = TokenizerModel::base();
    let mut stats = PairStats {
        counts: HashMap::new(),
        occurs_in: HashMap::new(),
        dirty: HashSet::new(),
    };
    for (i, w) in words.iter().enumerate() {
        stats.add_word(i, w, 1);
    }

    let mut heap = BinaryHeap::new();
    let candidate = |model: &TokenizerModel, pair: Pair, count: i64| Candidate {
        count,
        key: Reverse((
            model.token(pair.0).unwrap().to_owned(),
            model.token(pair.1).unwrap().to_owned(),
        )),
        pair,
    };

    while model.vocab_size() < vocab_size {
        for pair in stats.dirty.drain() {
            let c = stats.counts[&pair];
            if c > 0 {
                heap.push(candidate(&model, pair, c));
            }
        }
        // Entries whose count changed since they were pushed are stale.
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if stats.counts.get(&c.pair) == Some(&c.count) => break Some(c.pair),
                Some(_) => {}
            }
        };
        let Some(pair) = best else { break };

        let id = model.push_merge(pair.0, pair.1);
        let mut touched: Vec<usize> = stats.occurs_in[&pair].iter().copied().collect();
        touched.sort_unstable();
        for wi in touched {
            if !words[wi].syms.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            stats.add_word(wi, &words[wi], -1);
            words[wi].syms = merge_word(&words[wi].syms, pair, id);
            stats.add_word(wi, &words[wi], 1);
        }
    }
    Ok(model)
}
