use std::fmt;
use std::path::Path;

use ndarray::{concatenate, s, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sentence::SentenceEncoder;
use super::{mnr_hard_loss_grad, mnr_loss_grad, ContrastiveError, DEFAULT_TEMPERATURE};
use crate::encoder::{backward, Mode};
use crate::mlm::{lr_schedule, AdamWConfig, OptimizerState};
use crate::pooling::pool_batch_backward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// In-batch negatives only; trained on pairs.
    Mnr,
    /// In-batch negatives plus explicit hard negatives; trained on triplets.
    MnrHard,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mnr => "mnr",
            Objective::MnrHard => "mnr-hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContrastiveDataset {
    Pairs(Vec<(String, String)>),
    Triplets(Vec<(String, String, String)>),
}

impl ContrastiveDataset {
    pub fn len(&self) -> usize {
        match self {
            ContrastiveDataset::Pairs(p) => p.len(),
            ContrastiveDataset::Triplets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ContrastiveDataset::Pairs(_) => "pair",
            ContrastiveDataset::Triplets(_) => "triplet",
        }
    }

    /// Drops hard negatives.
    pub fn to_pairs(&self) -> ContrastiveDataset {
        match self {
            ContrastiveDataset::Pairs(p) => ContrastiveDataset::Pairs(p.clone()),
            ContrastiveDataset::Triplets(t) => {
                ContrastiveDataset::Pairs(t.iter().map(|(a, p, _)| (a.clone(), p.clone())).collect())
            }
        }
    }

    /// Parses a TSV of `anchor\tpositive` or `anchor\tpositive\tnegative`
    /// rows. Every row must have the same number of fields; blank lines are
    /// skipped.
    pub fn parse_tsv(text: &str) -> Result<Self, ContrastiveError> {
        let mut pairs = Vec::new();
        let mut triplets = Vec::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let w = *width.get_or_insert(fields.len());
            let malformed = |reason: String| ContrastiveError::Malformed { line: i + 1, reason };
            if fields.len() != w {
                return Err(malformed(format!("expected {w} fields, found {}", fields.len())));
            }
            match fields[..] {
                [a, p] => pairs.push((a.to_owned(), p.to_owned())),
                [a, p, n] => triplets.push((a.to_owned(), p.to_owned(), n.to_owned())),
                _ => return Err(malformed(format!("expected 2 or 3 fields, found {}", fields.len()))),
            }
        }
        Ok(match width {
            Some(3) => ContrastiveDataset::Triplets(triplets),
            _ => ContrastiveDataset::Pairs(pairs),
        })
    }

    pub fn load_tsv(path: &Path) -> Result<Self, ContrastiveError> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        match self {
            ContrastiveDataset::Pairs(p) => p.iter().for_each(|(a, b)| s.push_str(&format!("{a}\t{b}\n"))),
            ContrastiveDataset::Triplets(t) => {
                t.iter().for_each(|(a, b, c)| s.push_str(&format!("{a}\t{b}\t{c}\n")))
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub temperature: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            epochs: 20,
            batch_size: 512,
            lr: 2e-5,
            warmup_frac: 0.01,
            temperature: DEFAULT_TEMPERATURE,
            seed: 42,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    fn validate(&self) -> Result<(), ContrastiveError> {
        let bad = |m: &str| Err(ContrastiveError::InvalidConfig(m.to_owned()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return Err(ContrastiveError::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Fine-tunes every encoder parameter of `enc` with `objective`, pooling
/// with `enc.pooling`. Returns the tuned encoder.
pub fn train_encoder(
    enc: SentenceEncoder,
    data: &ContrastiveDataset,
    objective: Objective,
    hyper: &ContrastiveConfig,
) -> Result<SentenceEncoder, ContrastiveError> {
    train_encoder_observed(enc, data, objective, hyper, |_, _| {})
}

/// [`train_encoder`], calling `on_epoch(epoch, mean_train_loss)` after each
/// epoch.
pub fn train_encoder_observed(
    mut enc: SentenceEncoder,
    data: &ContrastiveDataset,
    objective: Objective,
    hyper: &ContrastiveConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<SentenceEncoder, ContrastiveError> {
    hyper.validate()?;
    let columns: Vec<Vec<&str>> = match (objective, data) {
        (Objective::Mnr, ContrastiveDataset::Pairs(p)) => {
            vec![p.iter().map(|x| x.0.as_str()).collect(), p.iter().map(|x| x.1.as_str()).collect()]
        }
        (Objective::MnrHard, ContrastiveDataset::Triplets(t)) => vec![
            t.iter().map(|x| x.0.as_str()).collect(),
            t.iter().map(|x| x.1.as_str()).collect(),
            t.iter().map(|x| x.2.as_str()).collect(),
        ],
        _ => return Err(ContrastiveError::ObjectiveDatasetMismatch { objective, dataset: data.kind() }),
    };
    if data.is_empty() {
        return Err(ContrastiveError::EmptyInput);
    }
    let ids: Vec<Vec<Vec<u32>>> = columns.iter().map(|c| enc.tokenize_all(c)).collect::<Result<_, _>>()?;
    let n = data.len();
    let k = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = OptimizerState::for_encoder(hyper.optimizer, &enc.params);
    let total_steps = n.div_ceil(hyper.batch_size) * hyper.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(hyper.batch_size) {
            let b = idx.len();
            let seqs: Vec<Vec<u32>> = (0..k).flat_map(|c| idx.iter().map(move |&i| (c, i))).map(|(c, i)| ids[c][i].clone()).collect();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let emb = enc.embed_ids(&seqs, Mode::Train, &mut dropout_rng)?;
            let part = |c: usize| emb.pooled.slice(s![c * b..(c + 1) * b, ..]);
            let g = match objective {
                Objective::Mnr => mnr_loss_grad(&part(0), &part(1), hyper.temperature)?,
                Objective::MnrHard => mnr_hard_loss_grad(&part(0), &part(1), &part(2), hyper.temperature)?,
            };
            if !g.loss.is_finite() {
                return Err(ContrastiveError::DivergedLoss { epoch });
            }
            let mut views = vec![g.d_anchor.view(), g.d_positive.view()];
            if let Some(d) = &g.d_negative {
                views.push(d.view());
            }
            let dpooled = concatenate(Axis(0), &views).expect("equal widths");
            let dout = pool_batch_backward(&emb.out, &emb.batch, enc.pooling, &dpooled.view())?;
            let grads = backward(&enc.params, &emb.tape, &dout)?;
            let lr = lr_schedule(step, total_steps, hyper.lr, hyper.warmup_frac);
            opt.step_encoder(&mut enc.params, &grads, lr)?;
            step += 1;
            loss_sum += g.loss;
            batches += 1;
        }
        if !enc.params.is_finite() {
            return Err(ContrastiveError::DivergedLoss { epoch });
        }
        on_epoch(epoch, loss_sum / batches as f64);
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_shapes() {
        let d = ContrastiveDataset::parse_tsv("a\tb\nc\td\n").unwrap();
        assert_eq!(d, ContrastiveDataset::Pairs(vec![("a".into(), "b".into()), ("c".into(), "d".into())]));
        let d = ContrastiveDataset::parse_tsv("a\tb\tc\r\n\n").unwrap();
        assert_eq!(d.kind(), "triplet");
        assert_eq!(ContrastiveDataset::parse_tsv(&d.to_tsv()).unwrap(), d);
        assert!(matches!(
            ContrastiveDataset::parse_tsv("a\tb\nc\td\te\n"),
            Err(ContrastiveError::Malformed { line: 2, .. })
        ));
        assert!(ContrastiveDataset::parse_tsv("a\n").is_err());
    }

    #[test]
    fn defaults() {
        let c = ContrastiveConfig::default();
        assert_eq!((c.batch_size, c.lr, c.warmup_frac, c.temperature), (512, 2e-5, 0.01, 0.05));
        assert!(c.epochs <= 20);
    }
}
