//! Masked-language-model pre-training: token masking, the cross-entropy
//! objective, AdamW, the warmup/decay schedule and the epoch loop.

mod optim;
mod pretrain;
mod schedule;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{TokenBlock, NUM_SPECIAL};
use crate::encoder::{
    backward, forward, mlm_head_backward, mlm_head_forward, EncodedBatch, EncoderError, EncoderParams, Gradients,
    Mode,
};

pub use optim::{adamw_step, AdamWConfig, OptimizerState, Scalar};
pub use pretrain::{pretrain, pretrain_from, Checkpoint, CheckpointSet, PretrainConfig};
pub use schedule::lr_schedule;

#[derive(Debug, thiserror::Error)]
pub enum MlmError {
    #[error("invalid masking policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no positions were selected for prediction")]
    NoMaskedPositions,
    #[error("label {label} out of range for vocabulary of {vocab_size}")]
    LabelOutOfRange { label: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} blocks are empty")]
    EmptyBlocks(&'static str),
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which positions are hidden from the model and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_prob: f64,
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy { mask_prob: 0.15, mask_token_frac: 0.8, random_token_frac: 0.1, keep_frac: 0.1 }
    }
}

impl MaskingPolicy {
    pub fn with_mask_prob(mask_prob: f64) -> Self {
        MaskingPolicy { mask_prob, ..Default::default() }
    }

    /// `mask_prob` may be 0 or 1 to express the degenerate policies.
    pub fn validate(&self) -> Result<(), MlmError> {
        let fracs = [self.mask_prob, self.mask_token_frac, self.random_token_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(MlmError::InvalidPolicy("fractions must lie in [0, 1]".into()));
        }
        let sum = self.mask_token_frac + self.random_token_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MlmError::InvalidPolicy(format!("replacement fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Selects each non-special, attended position with probability
/// `mask_prob` and corrupts it. `labels[i]` is the original id at selected
/// positions and `None` elsewhere.
///
/// Random replacements are drawn uniformly from the non-special ids.
pub fn apply_masking<R: Rng + ?Sized>(
    block: &TokenBlock,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> (TokenBlock, Vec<Option<u32>>) {
    let mut masked = block.clone();
    let mut labels = vec![None; block.ids.len()];
    for (i, &id) in block.ids.iter().enumerate() {
        if block.attention_mask[i] == 0 || (id as usize) < NUM_SPECIAL {
            continue;
        }
        if rng.gen::<f64>() >= policy.mask_prob {
            continue;
        }
        labels[i] = Some(id);
        let r = rng.gen::<f64>();
        masked.ids[i] = if r < policy.mask_token_frac {
            crate::bpe::MASK_ID
        } else if r < policy.mask_token_frac + policy.random_token_frac && vocab_size > NUM_SPECIAL {
            rng.gen_range(NUM_SPECIAL as u32..vocab_size as u32)
        } else {
            id
        };
    }
    (masked, labels)
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[u32]) -> Result<(), MlmError> {
    if labels.is_empty() {
        return Err(MlmError::NoMaskedPositions);
    }
    if logits.nrows() != labels.len() {
        return Err(MlmError::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let v = logits.ncols();
    match labels.iter().find(|&&l| l as usize >= v) {
        Some(&label) => Err(MlmError::LabelOutOfRange { label, vocab_size: v }),
        None => Ok(()),
    }
}

fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Mean natural-log cross-entropy of `labels` under `logits` `[N, V]`.
pub fn mlm_loss(logits: &ArrayView2<f64>, labels: &[u32]) -> Result<f64, MlmError> {
    check_labels(logits, labels)?;
    let lp = log_softmax_rows(logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -lp[[i, l as usize]]).sum();
    Ok(total / labels.len() as f64)
}

/// [`mlm_loss`] and its gradient with respect to `logits`.
pub fn mlm_loss_grad(logits: &ArrayView2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>), MlmError> {
    check_labels(logits, labels)?;
    let n = labels.len() as f64;
    let mut g = log_softmax_rows(logits);
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        total -= g[[i, l as usize]];
        let mut row = g.row_mut(i);
        row.mapv_inplace(f64::exp);
        row[l as usize] -= 1.0;
        row /= n;
    }
    Ok((total / n, g))
}

/// Rows of the flattened `[B*L, H]` encoder output that carry a label.
fn selected(labels: &[Option<u32>]) -> (Vec<usize>, Vec<u32>) {
    labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).unzip()
}

/// Encoder forward plus head, returning the head logits at the labelled
/// positions and what is needed to differentiate them.
fn head_logits(
    params: &EncoderParams,
    batch: &EncodedBatch,
    labels: &[Option<u32>],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, Vec<usize>, Vec<u32>, crate::encoder::Tape, crate::encoder::HeadTape), MlmError> {
    if labels.len() != batch.ids.len() {
        return Err(MlmError::ShapeMismatch(format!(
            "{} labels for {} positions",
            labels.len(),
            batch.ids.len()
        )));
    }
    let (rows, targets) = selected(labels);
    if rows.is_empty() {
        return Err(MlmError::NoMaskedPositions);
    }
    let (out, tape) = forward(params, batch, mode, rng)?;
    let h = out.shape()[2];
    let flat = out.into_shape_with_order((batch.batch * batch.len, h)).expect("contiguous output");
    let hidden = flat.select(Axis(0), &rows);
    let (logits, head) = mlm_head_forward(&tape, hidden);
    Ok((logits, rows, targets, tape, head))
}

/// Mean cross-entropy over labelled positions, without gradients.
pub fn mlm_batch_loss(
    params: &EncoderParams,
    batch: &EncodedBatch,
    labels: &[Option<u32>],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<f64, MlmError> {
    let (logits, _, targets, _, _) = head_logits(params, batch, labels, mode, rng)?;
    mlm_loss(&logits.view(), &targets)
}

/// Mean cross-entropy over labelled positions and its gradient with respect
/// to every parameter, lm head included.
pub fn mlm_batch_loss_grad(
    params: &EncoderParams,
    batch: &EncodedBatch,
    labels: &[Option<u32>],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(f64, Gradients), MlmError> {
    let (logits, rows, targets, tape, head) = head_logits(params, batch, labels, mode, rng)?;
    let (loss, dlogits) = mlm_loss_grad(&logits.view(), &targets)?;
    let h = params.config().hidden_size;
    let mut head_grads = Gradients::zeros_like(params.weights());
    let dhidden = mlm_head_backward(&tape, &head, &dlogits.view(), &mut head_grads);
    let mut upstream = Array2::<f64>::zeros((batch.batch * batch.len, h));
    for (k, &r) in rows.iter().enumerate() {
        upstream.row_mut(r).assign(&dhidden.row(k));
    }
    let upstream = upstream.into_shape_with_order((batch.batch, batch.len, h)).expect("contiguous upstream");
    let mut grads = backward(params, &tape, &upstream)?;
    grads.add_assign(&head_grads);
    Ok((loss, grads))
}

/// Flattened labels for a list of masked blocks.
pub fn flatten_labels(labels: &[Vec<Option<u32>>]) -> Vec<Option<u32>> {
    labels.iter().flatten().copied().collect()
}

/// Number of labelled positions.
pub(crate) fn count_labels(labels: &[Option<u32>]) -> usize {
    labels.iter().filter(|l| l.is_some()).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(n: usize) -> TokenBlock {
        let mut ids: Vec<u32> = (0..n as u32).map(|i| 10 + i % 50).collect();
        ids[0] = crate::bpe::CLS_ID;
        ids[n - 1] = crate::bpe::SEP_ID;
        TokenBlock::full(ids)
    }

    #[test]
    fn full_masking_replaces_every_ordinary_position() {
        let b = block(20);
        let p = MaskingPolicy { mask_prob: 1.0, mask_token_frac: 1.0, random_token_frac: 0.0, keep_frac: 0.0 };
        let (m, labels) = apply_masking(&b, &p, 100, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.ids[0], crate::bpe::CLS_ID);
        assert_eq!(m.ids[19], crate::bpe::SEP_ID);
        assert!(m.ids[1..19].iter().all(|&i| i == crate::bpe::MASK_ID));
        assert_eq!(labels[0], None);
        for i in 1..19 {
            assert_eq!(labels[i], Some(b.ids[i]));
        }
    }

    #[test]
    fn zero_mask_prob_is_identity() {
        let b = block(30);
        let (m, labels) = apply_masking(&b, &MaskingPolicy::with_mask_prob(0.0), 100, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m, b);
        assert!(labels.iter().all(Option::is_none));
    }

    #[test]
    fn padding_never_selected() {
        let b = TokenBlock::padded(&[2, 10, 11, 3], 8);
        let p = MaskingPolicy { mask_prob: 1.0, ..Default::default() };
        let (_, labels) = apply_masking(&b, &p, 100, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(labels, vec![None, Some(10), Some(11), None, None, None, None, None]);
    }

    #[test]
    fn selection_rate_near_mask_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = TokenBlock::full((0..10_000u32).map(|i| 10 + i % 90).collect());
        let (_, labels) = apply_masking(&b, &MaskingPolicy::default(), 100, &mut rng);
        let frac = count_labels(&labels) as f64 / 10_000.0;
        assert!((frac - 0.15).abs() < 0.02, "{frac}");
    }

    #[test]
    fn policy_validation() {
        assert!(MaskingPolicy::default().validate().is_ok());
        let bad = MaskingPolicy { keep_frac: 0.2, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(MaskingPolicy::with_mask_prob(1.5).validate().is_err());
    }

    #[test]
    fn loss_values() {
        let l = mlm_loss(&array![[0.0, 0.0]].view(), &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let uniform = Array2::<f64>::zeros((3, 64_000));
        let l = mlm_loss(&uniform.view(), &[5, 17, 63_999]).unwrap();
        assert!((l - 64_000f64.ln()).abs() < 1e-9);
        let l = mlm_loss(&array![[20.0, 0.0, 0.0]].view(), &[0]).unwrap();
        assert!(l < 1e-3);
        assert!(matches!(mlm_loss(&uniform.view().slice(ndarray::s![..0, ..]), &[]), Err(MlmError::NoMaskedPositions)));
        assert!(matches!(mlm_loss(&array![[0.0, 0.0]].view(), &[2]), Err(MlmError::LabelOutOfRange { .. })));
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let logits = array![[0.3, -1.2, 2.0, 0.1], [1.0, 0.5, -0.5, 0.0]];
        let labels = [2, 1];
        let (_, g) = mlm_loss_grad(&logits.view(), &labels).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let num = (mlm_loss(&p.view(), &labels).unwrap() - mlm_loss(&m.view(), &labels).unwrap()) / (2.0 * h);
                assert!((num - g[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
