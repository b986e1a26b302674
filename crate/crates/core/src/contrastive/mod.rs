//! Sentence-encoder fine-tuning with in-batch contrastive objectives.
//!
//! Both objectives score an anchor against candidate embeddings by cosine
//! similarity divided by a temperature τ, and take the softmax probability
//! of the anchor's own positive:
//!
//! * MNR: candidates are all positives in the batch.
//! * MNR with hard negatives: candidates are all positives and all hard
//!   negatives in the batch.
//!
//! The batch loss is the mean over anchors.

mod sentence;
mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::bpe::TokenizerError;
use crate::encoder::EncoderError;
use crate::mlm::MlmError;
use crate::pooling::PoolingError;

pub(crate) use sentence::MODEL_FILE;
pub use sentence::{encode_sentences, SentenceEncoder};
pub use train::{train_encoder, train_encoder_observed, ContrastiveConfig, ContrastiveDataset, Objective};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ContrastiveError {
    #[error("{which} row {row} has zero norm; cosine similarity is undefined")]
    ZeroVector { which: &'static str, row: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no input texts")]
    EmptyInput,
    #[error("text {index} is empty after preprocessing")]
    EmptyText { index: usize },
    #[error("objective {objective} cannot be trained on a {dataset} dataset")]
    ObjectiveDatasetMismatch { objective: Objective, dataset: &'static str },
    #[error("tokenizer has {tokenizer} tokens but the encoder vocabulary is {encoder}")]
    VocabMismatch { tokenizer: usize, encoder: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Optimizer(#[from] MlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss value and gradients with respect to the raw (unnormalized) rows.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub d_anchor: Array2<f64>,
    pub d_positive: Array2<f64>,
    pub d_negative: Option<Array2<f64>>,
}

fn normalize(x: &ArrayView2<f64>, which: &'static str) -> Result<(Array2<f64>, Array1<f64>), ContrastiveError> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(ContrastiveError::ZeroVector { which, row });
    }
    Ok((x / &norms.view().insert_axis(Axis(1)), norms))
}

/// Gradient through `u = x / |x|` given `du`.
fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let proj = (u * du).sum_axis(Axis(1)).insert_axis(Axis(1));
    (du - &(u * &proj)) / &norms.view().insert_axis(Axis(1))
}

fn check(r: &ArrayView2<f64>, other: &ArrayView2<f64>, tau: f64) -> Result<(), ContrastiveError> {
    if !(tau > 0.0) {
        return Err(ContrastiveError::InvalidTemperature(tau));
    }
    if r.nrows() == 0 {
        return Err(ContrastiveError::EmptyBatch);
    }
    if r.dim() != other.dim() {
        return Err(ContrastiveError::ShapeMismatch(format!("{:?} vs {:?}", r.dim(), other.dim())));
    }
    Ok(())
}

/// Shared core: anchors `u` `[N, H]` against candidates `c` `[M, H]` where
/// the target of anchor `i` is candidate `i`.
fn ranking_loss(u: &Array2<f64>, c: &Array2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = u.nrows();
    let mut logits = u.dot(&c.t()) / tau;
    let mut loss = 0.0;
    for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - row[i];
        // row becomes d loss_i / d logits
        row.mapv_inplace(|x| (x - lse).exp());
        row[i] -= 1.0;
    }
    let dlogits = logits / (n as f64 * tau);
    let du = dlogits.dot(c);
    let dc = dlogits.t().dot(u);
    (loss / n as f64, du, dc)
}

fn loss_grad(
    r: &ArrayView2<f64>,
    pos: &ArrayView2<f64>,
    neg: Option<&ArrayView2<f64>>,
    tau: f64,
) -> Result<LossGrad, ContrastiveError> {
    check(r, pos, tau)?;
    if let Some(neg) = neg {
        check(r, neg, tau)?;
    }
    let (u, nu) = normalize(r, "anchor")?;
    let (p, np) = normalize(pos, "positive")?;
    let negs = neg.map(|x| normalize(x, "negative")).transpose()?;
    let cands = match &negs {
        Some((q, _)) => concatenate(Axis(0), &[p.view(), q.view()]).expect("equal widths"),
        None => p.clone(),
    };
    let (loss, du, dc) = ranking_loss(&u, &cands, tau);
    let n = r.nrows();
    let d_positive = normalize_backward(&p, &np, &dc.slice(s![..n, ..]).to_owned());
    let d_negative = negs.map(|(q, nq)| normalize_backward(&q, &nq, &dc.slice(s![n.., ..]).to_owned()));
    Ok(LossGrad { loss, d_anchor: normalize_backward(&u, &nu, &du), d_positive, d_negative })
}

/// MNR loss over anchors `r` and positives `r_pos`, both `[N, H]`.
pub fn mnr_loss(r: &ArrayView2<f64>, r_pos: &ArrayView2<f64>, tau: f64) -> Result<f64, ContrastiveError> {
    mnr_loss_grad(r, r_pos, tau).map(|g| g.loss)
}

pub fn mnr_loss_grad(r: &ArrayView2<f64>, r_pos: &ArrayView2<f64>, tau: f64) -> Result<LossGrad, ContrastiveError> {
    loss_grad(r, r_pos, None, tau)
}

/// MNR loss where every anchor also competes against every hard negative
/// `r_neg[j]` in the batch.
pub fn mnr_hard_loss(
    r: &ArrayView2<f64>,
    r_pos: &ArrayView2<f64>,
    r_neg: &ArrayView2<f64>,
    tau: f64,
) -> Result<f64, ContrastiveError> {
    mnr_hard_loss_grad(r, r_pos, r_neg, tau).map(|g| g.loss)
}

pub fn mnr_hard_loss_grad(
    r: &ArrayView2<f64>,
    r_pos: &ArrayView2<f64>,
    r_neg: &ArrayView2<f64>,
    tau: f64,
) -> Result<LossGrad, ContrastiveError> {
    loss_grad(r, r_pos, Some(r_neg), tau)
}
