//! A small RoBERTa-style encoder with an explicit forward pass, exact
//! reverse-mode gradients and a portable checkpoint format.
//!
//! Parameters are stored as `f32`. All activations and gradients are `f64`,
//! which keeps finite-difference checks meaningful.

mod checkpoint;
mod model;
mod ops;
mod params;

use serde::{Deserialize, Serialize};

use crate::bpe::{TokenBlock, PAD_ID};

pub(crate) use checkpoint::{load_bundle, save_bundle};
pub use params::INIT_STD;
pub use checkpoint::{
    load_checkpoint, parse_tensor_bytes, read_tensor_file, save_checkpoint, write_tensor_file, NamedTensors,
    CHECKPOINT_VERSION,
};
pub use model::{backward, forward, mlm_head_backward, mlm_head_forward, HeadTape, Mode, Tape};
pub use ops::{gelu, gelu_grad};
pub use params::{init_params, EncoderParams, LayerWeights, Linear, LmHead, Norm, Tensor, Weights};

/// Gradients share the parameter tree's layout.
pub type Gradients = Weights<f64>;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_position_embeddings {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("tape was recorded against parameters that have since changed")]
    StaleTape,
    #[error("upstream gradient shape {got:?} does not match output shape {expected:?}")]
    GradShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Architecture hyperparameters, named as in a Hugging Face `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    pub vocab_size: usize,
    pub hidden_dropout_prob: f64,
    pub attention_probs_dropout_prob: f64,
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub hidden_act: Activation,
}

impl Default for EncoderConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        EncoderConfig {
            hidden_size: 64,
            num_hidden_layers: 2,
            num_attention_heads: 4,
            intermediate_size: 256,
            max_position_embeddings: 130,
            vocab_size: 2005,
            hidden_dropout_prob: 0.1,
            attention_probs_dropout_prob: 0.1,
            layer_norm_eps: 1e-5,
            hidden_act: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    /// Full-size configuration (768 hidden, 12 layers, 12 heads).
    pub fn base(vocab_size: usize, max_position_embeddings: usize, layer_norm_eps: f64) -> Self {
        EncoderConfig {
            hidden_size: 768,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            intermediate_size: 3072,
            max_position_embeddings,
            vocab_size,
            hidden_dropout_prob: 0.1,
            attention_probs_dropout_prob: 0.1,
            layer_norm_eps,
            hidden_act: Activation::Gelu,
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.hidden_dropout_prob = 0.0;
        self.attention_probs_dropout_prob = 0.0;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_owned()));
        if [
            self.hidden_size,
            self.num_hidden_layers,
            self.num_attention_heads,
            self.intermediate_size,
            self.max_position_embeddings,
            self.vocab_size,
        ]
        .contains(&0)
        {
            return bad("all sizes must be positive");
        }
        if self.hidden_size % self.num_attention_heads != 0 {
            return bad("hidden_size must be divisible by num_attention_heads");
        }
        for p in [self.hidden_dropout_prob, self.attention_probs_dropout_prob] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout probabilities must lie in [0, 1)");
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }
}

/// Token ids and attention mask for `batch` sequences of equal length `len`,
/// stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl EncodedBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<u32>, attention_mask: Vec<u8>) -> Result<Self, EncoderError> {
        if ids.len() != batch * len || attention_mask.len() != batch * len {
            return Err(EncoderError::MalformedBatch(format!(
                "expected {} entries, got {} ids and {} mask values",
                batch * len,
                ids.len(),
                attention_mask.len()
            )));
        }
        if attention_mask.iter().any(|&m| m > 1) {
            return Err(EncoderError::MalformedBatch("mask values must be 0 or 1".into()));
        }
        Ok(EncodedBatch { batch, len, ids, attention_mask })
    }

    pub fn from_blocks(blocks: &[TokenBlock]) -> Result<Self, EncoderError> {
        let len = blocks.first().map_or(0, TokenBlock::len);
        if blocks.iter().any(|b| b.len() != len) {
            return Err(EncoderError::MalformedBatch("blocks differ in length".into()));
        }
        let ids = blocks.iter().flat_map(|b| b.ids.iter().copied()).collect();
        let mask = blocks.iter().flat_map(|b| b.attention_mask.iter().copied()).collect();
        Self::new(blocks.len(), len, ids, mask)
    }

    /// Right-pads variable-length sequences to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD_ID).take(len - s.len()));
            mask.extend(std::iter::repeat(1u8).take(s.len()));
            mask.extend(std::iter::repeat(0u8).take(len - s.len()));
        }
        EncodedBatch { batch: seqs.len(), len, ids, attention_mask: mask }
    }

    pub fn row_ids(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn row_mask(&self, b: usize) -> &[u8] {
        &self.attention_mask[b * self.len..(b + 1) * self.len]
    }

    pub(crate) fn check(&self, cfg: &EncoderConfig) -> Result<(), EncoderError> {
        if self.len > cfg.max_position_embeddings {
            return Err(EncoderError::SequenceTooLong {
                len: self.len,
                max: cfg.max_position_embeddings,
            });
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(EncoderError::IdOutOfRange { id, vocab_size: cfg.vocab_size });
        }
        Ok(())
    }
}
