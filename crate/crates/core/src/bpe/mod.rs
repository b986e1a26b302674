//! Byte-level BPE: training, encoding, decoding, block packing and
//! vocabulary comparison.
//!
//! Ids `0..5` are the special tokens (pad, unk, cls, sep, mask), ids
//! `5..261` are the 256 byte tokens, and every merge after that adds one
//! token. Bytes are rendered as printable characters with the usual
//! byte-level mapping, so a token string never contains a space and
//! `merges.txt` can be space-separated.

mod io;
mod pack;
mod pretokenize;
mod train;

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

pub use pack::{blocks_to_text, frame_documents, pack_blocks, parse_blocks, PackedBlocks, TokenBlock};
pub use pretokenize::split_chunks;
pub use train::train_bpe;

pub const DEFAULT_VOCAB_SIZE: usize = 64_000;
pub const DEFAULT_BLOCK_LEN: usize = 128;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();
pub const FIRST_BYTE_ID: u32 = NUM_SPECIAL as u32;
pub const BASE_VOCAB: usize = NUM_SPECIAL + 256;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("corpus contains no trainable bytes")]
    EmptyCorpus,
    #[error("vocab size {0} is below the base vocabulary of {BASE_VOCAB}")]
    VocabTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("malformed tokenizer files: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The byte-level alphabet: printable bytes map to themselves, the rest to
/// code points from 256 upward.
fn byte_alphabet() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u8| matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        let mut fwd = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u8 {
            fwd[b as usize] = if printable(b) {
                b as char
            } else {
                extra += 1;
                char::from_u32(255 + extra).unwrap()
            };
        }
        let rev = fwd.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (fwd, rev)
    })
}

pub fn byte_token(b: u8) -> char {
    byte_alphabet().0[b as usize]
}

fn token_bytes(token: &str) -> Option<Vec<u8>> {
    let rev = &byte_alphabet().1;
    token.chars().map(|c| rev.get(&c).copied()).collect()
}

/// A trained tokenizer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// (left, right) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl TokenizerModel {
    /// The model with only specials and byte tokens.
    pub fn base() -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(|b| byte_token(b).to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        TokenizerModel {
            tokens,
            index,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Appends a merge of two existing tokens, returning the id of the merged
    /// token. If the concatenated string already exists the merge points at
    /// that id.
    pub(crate) fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let merged = format!("{}{}", self.tokens[left as usize], self.tokens[right as usize]);
        let id = match self.index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.index.insert(merged.clone(), id);
                self.tokens.push(merged);
                id
            }
        };
        self.ranks.entry((left, right)).or_insert((self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.merges
            .iter()
            .map(|&(a, b)| (self.tokens[a as usize].as_str(), self.tokens[b as usize].as_str()))
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.bytes().map(|b| FIRST_BYTE_ID + b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, w[0], w[1], id)))
                .min_by_key(|&(r, ..)| r);
            let Some((_, a, b, id)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms);
    }

    /// Token ids for `text`. Never produces unk: every byte has a token.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for chunk in split_chunks(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// `[cls] ids [sep]`, with the content truncated so the whole sequence
    /// fits in `max_len`.
    pub fn encode_framed(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = vec![CLS_ID];
        let body = self.encode(text);
        let keep = body.len().min(max_len.saturating_sub(2));
        ids.extend_from_slice(&body[..keep]);
        ids.push(SEP_ID);
        ids
    }

    /// Inverse of [`encode`](Self::encode). Special tokens decode to their
    /// literal names. Byte sequences that are not UTF-8 (possible only for
    /// id sequences `encode` never produces) are decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            if Self::is_special(id) {
                bytes.extend_from_slice(tok.as_bytes());
            } else {
                bytes.extend(token_bytes(tok).expect("non-special tokens are byte-alphabet strings"));
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    fn non_special_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[NUM_SPECIAL..].iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct VocabOverlap {
    pub intersection: usize,
    pub unique_in_a: usize,
}

/// Shared and `a`-only token strings, special tokens excluded.
pub fn vocab_intersection(a: &TokenizerModel, b: &TokenizerModel) -> VocabOverlap {
    let bset: HashSet<&str> = b.non_special_tokens().collect();
    let intersection = a.non_special_tokens().filter(|t| bset.contains(t)).count();
    VocabOverlap {
        intersection,
        unique_in_a: a.vocab_size() - NUM_SPECIAL - intersection,
    }
}
