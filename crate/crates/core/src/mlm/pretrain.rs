use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_masking, count_labels, flatten_labels, lr_schedule, mlm_batch_loss, mlm_batch_loss_grad, AdamWConfig,
    MaskingPolicy, MlmError, OptimizerState,
};
use crate::bpe::TokenBlock;
use crate::encoder::{init_params, save_checkpoint, EncodedBatch, EncoderConfig, EncoderParams, Gradients, Mode};
use crate::util::write_atomic;

/// Training hyperparameters, read from a JSON file by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub mask_prob: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            micro_batch: 16,
            accumulation_steps: 2,
            peak_lr: 4e-4,
            warmup_frac: 0.05,
            mask_prob: 0.15,
            seed: 42,
            checkpoint_dir: None,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), MlmError> {
        let bad = |m: &str| Err(MlmError::InvalidConfig(m.to_owned()));
        if self.epochs == 0 || self.micro_batch == 0 || self.accumulation_steps == 0 {
            return bad("epochs, micro_batch and accumulation_steps must be positive");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if !(self.peak_lr >= 0.0) {
            return bad("peak_lr must be non-negative");
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn optimizer_steps_per_epoch(&self, train_blocks: usize) -> usize {
        train_blocks.div_ceil(self.micro_batch).div_ceil(self.accumulation_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub epoch: usize,
    pub val_loss: f64,
}

/// The three saved variants of one run.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    /// After the first epoch.
    pub one_look: Checkpoint,
    /// Lowest validation loss; ties keep the earliest epoch.
    pub best_loss: Checkpoint,
    /// After the last epoch.
    pub complete: Checkpoint,
    /// Validation loss at the end of epochs `1..=epochs`.
    pub loss_history: Vec<(usize, f64)>,
    /// Validation loss of the initial parameters, before any update.
    pub initial_loss: f64,
}

impl CheckpointSet {
    /// `epoch,val_loss` rows; epoch 0 holds the initial loss.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss\n");
        s.push_str(&format!("0,{}\n", self.initial_loss));
        for (e, l) in &self.loss_history {
            s.push_str(&format!("{e},{l}\n"));
        }
        s
    }

    /// Writes `one_look.ctxf`, `best_loss.ctxf`, `complete.ctxf` and
    /// `loss_history.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), MlmError> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.one_look.params, &dir.join("one_look.ctxf"))?;
        save_checkpoint(&self.best_loss.params, &dir.join("best_loss.ctxf"))?;
        save_checkpoint(&self.complete.params, &dir.join("complete.ctxf"))?;
        write_atomic(&dir.join("loss_history.csv"), self.loss_csv().as_bytes())?;
        Ok(())
    }
}

/// Separates the validation masking stream from the training stream.
const VALIDATION_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Masked validation set; masks are drawn once so every epoch is scored on
/// identical inputs.
struct ValidationSet {
    batches: Vec<(EncodedBatch, Vec<Option<u32>>)>,
}

impl ValidationSet {
    fn new(blocks: &[TokenBlock], policy: &MaskingPolicy, vocab: usize, micro: usize, seed: u64) -> Result<Self, MlmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_SEED_SALT);
        let mut batches = Vec::new();
        for chunk in blocks.chunks(micro) {
            let (masked, labels): (Vec<_>, Vec<_>) =
                chunk.iter().map(|b| apply_masking(b, policy, vocab, &mut rng)).unzip();
            let labels = flatten_labels(&labels);
            if count_labels(&labels) > 0 {
                batches.push((EncodedBatch::from_blocks(&masked)?, labels));
            }
        }
        if batches.is_empty() {
            return Err(MlmError::NoMaskedPositions);
        }
        Ok(ValidationSet { batches })
    }

    /// Mean cross-entropy over every masked validation position.
    fn loss(&self, params: &EncoderParams) -> Result<f64, MlmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut total, mut count) = (0.0, 0usize);
        for (batch, labels) in &self.batches {
            let n = count_labels(labels);
            total += mlm_batch_loss(params, batch, labels, Mode::Eval, &mut rng)? * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }
}

/// Pre-trains a freshly initialised encoder (seeded from `hyper.seed`).
pub fn pretrain(
    train: &[TokenBlock],
    val: &[TokenBlock],
    cfg: &EncoderConfig,
    hyper: &PretrainConfig,
) -> Result<CheckpointSet, MlmError> {
    let params = init_params(cfg, hyper.seed)?;
    pretrain_from(params, train, val, hyper, |_, _| {})
}

/// Pre-trains `params`, calling `on_epoch(epoch, val_loss)` after each epoch
/// (epoch 0 is the initial evaluation). Checkpoints are written to
/// `hyper.checkpoint_dir` when set.
pub fn pretrain_from(
    mut params: EncoderParams,
    train: &[TokenBlock],
    val: &[TokenBlock],
    hyper: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<CheckpointSet, MlmError> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(MlmError::EmptyBlocks("training"));
    }
    if val.is_empty() {
        return Err(MlmError::EmptyBlocks("validation"));
    }
    let vocab = params.config().vocab_size;
    let policy = MaskingPolicy::with_mask_prob(hyper.mask_prob);
    let validation = ValidationSet::new(val, &policy, vocab, hyper.micro_batch, hyper.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = OptimizerState::for_encoder(hyper.optimizer, &params);
    let steps_per_epoch = hyper.optimizer_steps_per_epoch(train.len());
    let total_steps = steps_per_epoch * hyper.epochs;

    let initial_loss = validation.loss(&params)?;
    if !initial_loss.is_finite() {
        return Err(MlmError::DivergedLoss { epoch: 0 });
    }
    on_epoch(0, initial_loss);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut one_look = None;
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let micro: Vec<&[usize]> = order.chunks(hyper.micro_batch).collect();
        for group in micro.chunks(hyper.accumulation_steps) {
            let mut acc = Gradients::zeros_like(params.weights());
            let mut used = 0usize;
            for idx in group {
                let (masked, labels): (Vec<_>, Vec<_>) =
                    idx.iter().map(|&i| apply_masking(&train[i], &policy, vocab, &mut rng)).unzip();
                let labels = flatten_labels(&labels);
                if count_labels(&labels) == 0 {
                    continue;
                }
                let batch = EncodedBatch::from_blocks(&masked)?;
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let (loss, grads) = mlm_batch_loss_grad(&params, &batch, &labels, Mode::Train, &mut dropout_rng)?;
                if !loss.is_finite() {
                    return Err(MlmError::DivergedLoss { epoch });
                }
                acc.add_assign(&grads);
                used += 1;
            }
            if used > 0 {
                acc.scale(1.0 / used as f64);
                let lr = lr_schedule(step, total_steps, hyper.peak_lr, hyper.warmup_frac);
                opt.step_encoder(&mut params, &acc, lr)?;
            }
            step += 1;
        }
        let val_loss = validation.loss(&params)?;
        if !val_loss.is_finite() || !params.is_finite() {
            return Err(MlmError::DivergedLoss { epoch });
        }
        on_epoch(epoch, val_loss);
        history.push((epoch, val_loss));
        let snapshot = || Checkpoint { params: params.clone(), epoch, val_loss };
        if epoch == 1 {
            one_look = Some(snapshot());
        }
        if best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            best = Some(snapshot());
        }
    }
    let complete = Checkpoint {
        params,
        epoch: hyper.epochs,
        val_loss: history.last().expect("at least one epoch").1,
    };
    let set = CheckpointSet {
        one_look: one_look.expect("at least one epoch"),
        best_loss: best.expect("at least one epoch"),
        complete,
        loss_history: history,
        initial_loss,
    };
    if let Some(dir) = &hyper.checkpoint_dir {
        set.save(dir)?;
    }
    Ok(set)
}
