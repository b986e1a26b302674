use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use super::ContrastiveError;
use crate::bpe::{TokenizerModel, DEFAULT_BLOCK_LEN};
use crate::encoder::{forward, load_bundle, save_bundle, EncodedBatch, EncoderError, EncoderParams, Mode, Tape};
use crate::pooling::{pool_batch, PoolingStrategy};
use crate::textprep::preprocess_str;

/// Texts embedded per forward pass in [`encode_sentences`].
const ENCODE_CHUNK: usize = 64;

/// File holding the encoder weights inside a sentence-encoder directory.
pub(crate) const MODEL_FILE: &str = "model.ctxf";

/// An encoder, its tokenizer and the pooling that turns token embeddings
/// into one vector per text.
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    pub params: EncoderParams,
    pub tokenizer: TokenizerModel,
    pub pooling: PoolingStrategy,
    /// Longest framed token sequence; longer texts are truncated.
    pub max_len: usize,
}

pub(crate) struct Embedded {
    pub pooled: Array2<f64>,
    pub out: Array3<f64>,
    pub batch: EncodedBatch,
    pub tape: Tape,
}

impl SentenceEncoder {
    pub fn new(params: EncoderParams, tokenizer: TokenizerModel, pooling: PoolingStrategy) -> Result<Self, ContrastiveError> {
        let cfg = params.config();
        if tokenizer.vocab_size() > cfg.vocab_size {
            return Err(ContrastiveError::VocabMismatch {
                tokenizer: tokenizer.vocab_size(),
                encoder: cfg.vocab_size,
            });
        }
        let max_len = cfg.max_position_embeddings.min(DEFAULT_BLOCK_LEN);
        Ok(SentenceEncoder { params, tokenizer, pooling, max_len })
    }

    /// Same weights, different pooling.
    pub fn with_pooling(&self, pooling: PoolingStrategy) -> Self {
        SentenceEncoder { pooling, ..self.clone() }
    }

    /// Normalizes `text` and frames it as `<s> … </s>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode_framed(preprocess_str(text).as_str(), self.max_len)
    }

    /// Tokenizes every text, rejecting texts that normalize to nothing.
    pub fn tokenize_all<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<u32>>, ContrastiveError> {
        if texts.is_empty() {
            return Err(ContrastiveError::EmptyInput);
        }
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let ids = self.tokenize(t.as_ref());
                if ids.len() <= 2 {
                    Err(ContrastiveError::EmptyText { index })
                } else {
                    Ok(ids)
                }
            })
            .collect()
    }

    /// Pooled (unnormalized) embeddings of already tokenized sequences.
    pub(crate) fn embed_ids(&self, seqs: &[Vec<u32>], mode: Mode, rng: &mut impl Rng) -> Result<Embedded, ContrastiveError> {
        let batch = EncodedBatch::from_sequences(seqs);
        let (out, tape) = forward(&self.params, &batch, mode, rng)?;
        let pooled = pool_batch(&out, &batch, self.pooling)?;
        Ok(Embedded { pooled, out, batch, tape })
    }

    /// Writes `model.ctxf` plus the tokenizer files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ContrastiveError> {
        std::fs::create_dir_all(dir)?;
        self.tokenizer.save(dir)?;
        let mut extra = Map::new();
        extra.insert("pooling".into(), Value::from(self.pooling.name()));
        extra.insert("max_len".into(), Value::from(self.max_len));
        save_bundle(&dir.join(MODEL_FILE), &self.params, extra, &[])?;
        Ok(())
    }

    /// Loads a directory written by [`save`](Self::save). A plain encoder
    /// checkpoint (no pooling key) gets mean pooling.
    pub fn load(dir: &Path) -> Result<Self, ContrastiveError> {
        let tokenizer = TokenizerModel::load(dir)?;
        let (params, config, _) = load_bundle(&dir.join(MODEL_FILE))?;
        let mut enc = SentenceEncoder::new(params, tokenizer, PoolingStrategy::default())?;
        if let Some(p) = config.get("pooling").and_then(Value::as_str) {
            enc.pooling = p
                .parse()
                .map_err(|e: crate::pooling::PoolingError| EncoderError::CorruptCheckpoint(e.to_string()))?;
        }
        if let Some(n) = config.get("max_len").and_then(Value::as_u64) {
            enc.max_len = (n as usize).clamp(2, enc.params.config().max_position_embeddings);
        }
        Ok(enc)
    }
}

/// Embeds `texts` with dropout off and scales every row to unit length.
/// Row `i` belongs to `texts[i]`.
pub fn encode_sentences<S: AsRef<str>>(enc: &SentenceEncoder, texts: &[S]) -> Result<Array2<f64>, ContrastiveError> {
    let seqs = enc.tokenize_all(texts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Array2::zeros((seqs.len(), enc.params.config().hidden_size));
    for (c, chunk) in seqs.chunks(ENCODE_CHUNK).enumerate() {
        let pooled = enc.embed_ids(chunk, Mode::Eval, &mut rng)?.pooled;
        out.slice_mut(ndarray::s![c * ENCODE_CHUNK..c * ENCODE_CHUNK + chunk.len(), ..]).assign(&pooled);
    }
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = r.dot(&r).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(ContrastiveError::ZeroVector { which: "embedding", row });
        }
        r /= n;
    }
    Ok(out)
}
