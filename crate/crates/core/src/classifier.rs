//! Text classification on top of a pre-trained encoder: a linear head over
//! the pooled output, trained jointly with the encoder under cross-entropy.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::contrastive::{ContrastiveError, SentenceEncoder};
use crate::encoder::{backward, load_bundle, save_bundle, EncoderError, Mode, Tensor, INIT_STD};
use crate::mlm::{adamw_step, AdamWConfig, MlmError, OptimizerState};
use crate::pooling::{pool_batch_backward, PoolingError, PoolingStrategy};

const HEAD_WEIGHT: &str = "classifier.weight";
const HEAD_BIAS: &str = "classifier.bias";

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("class {class} has {count} samples; a stratified split needs at least 3")]
    ClassTooSmall { class: usize, count: usize },
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no input")]
    EmptyInput,
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("classification needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("not a classifier checkpoint: {0}")]
    NotAClassifier(String),
    #[error(transparent)]
    Sentence(#[from] ContrastiveError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Optimizer(#[from] MlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Texts with class ids in `0..class_names.len()`; every class occurs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    texts: Vec<String>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(texts: Vec<String>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self, ClassifierError> {
        if texts.len() != labels.len() {
            return Err(ClassifierError::LengthMismatch(texts.len(), labels.len()));
        }
        let c = class_names.len();
        let mut counts = vec![0usize; c];
        for &l in &labels {
            *counts
                .get_mut(l)
                .ok_or(ClassifierError::LabelOutOfRange { label: l, classes: c })? += 1;
        }
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(ClassifierError::EmptyClass { class });
        }
        Ok(LabeledDataset { texts, labels, class_names })
    }

    /// Parses `text\tlabel_name` rows after a header row. Class ids follow
    /// the sorted order of the label names.
    pub fn parse_tsv(tsv: &str) -> Result<Self, ClassifierError> {
        let mut rows = Vec::new();
        for (i, line) in tsv.lines().enumerate().skip(1) {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (text, label) = line.rsplit_once('\t').ok_or_else(|| ClassifierError::Malformed {
                line: i + 1,
                reason: "expected text<TAB>label".into(),
            })?;
            rows.push((text.to_owned(), label.trim().to_owned()));
        }
        let names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let labels = rows
            .iter()
            .map(|r| names.binary_search(&r.1).expect("name collected above"))
            .collect();
        Self::new(rows.into_iter().map(|r| r.0).collect(), labels, names)
    }

    pub fn load_tsv(path: &Path) -> Result<Self, ClassifierError> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("text\tlabel\n");
        for (t, &l) in self.texts.iter().zip(&self.labels) {
            s.push_str(&format!("{t}\t{}\n", self.class_names[l]));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Rows at `idx`, in that order. Classes absent from `idx` are allowed.
    pub fn subset(&self, idx: &[usize]) -> Split {
        Split {
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            indices: idx.to_vec(),
        }
    }
}

/// A slice of a [`LabeledDataset`]; may lack some classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    /// Row indices into the parent dataset.
    pub indices: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Splits every class by `ratios` (largest-remainder rounding, ties to the
/// earlier split) after a seeded shuffle. Each split keeps parent order.
pub fn stratified_split(
    d: &LabeledDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Split, Split, Split), ClassifierError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ClassifierError::InvalidConfig(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..d.num_classes() {
        let mut members: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        if members.len() < 3 {
            return Err(ClassifierError::ClassTooSmall { class, count: members.len() });
        }
        members.shuffle(&mut rng);
        let sizes = apportion(members.len(), &r);
        let mut rest = members.as_slice();
        for (part, n) in parts.iter_mut().zip(sizes) {
            let (take, tail) = rest.split_at(n);
            part.extend_from_slice(take);
            rest = tail;
        }
    }
    let [a, b, c] = parts.map(|mut p| {
        p.sort_unstable();
        d.subset(&p)
    });
    Ok((a, b, c))
}

/// Integer sizes summing to `n`, each within 1 of `n·r_i`.
fn apportion(n: usize, r: &[f64; 3]) -> [usize; 3] {
    let exact = r.map(|x| x * n as f64);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())));
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle().take(short) {
        sizes[i] += 1;
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub threshold: f64,
    pub max_epochs: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig { patience: 5, threshold: 1e-4, max_epochs: 30 }
    }
}

impl EarlyStopConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.patience < 1 || !(self.threshold >= 0.0) || self.max_epochs < 1 {
            return Err(ClassifierError::InvalidConfig(format!("invalid early stopping {self:?}")));
        }
        Ok(())
    }
}

/// Tracks a higher-is-better validation score. An epoch improves when its
/// score exceeds the best so far by more than `threshold`; the first epoch
/// always improves.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    config: EarlyStopConfig,
    best: Option<f64>,
    stale: usize,
    epochs: usize,
}

impl EarlyStopper {
    pub fn new(config: EarlyStopConfig) -> Self {
        EarlyStopper { config, best: None, stale: 0, epochs: 0 }
    }

    /// Records one epoch's score; returns `true` when training should stop.
    pub fn observe(&mut self, score: f64) -> bool {
        self.epochs += 1;
        match self.best {
            Some(b) if !(score > b + self.config.threshold) => self.stale += 1,
            _ => {
                self.best = Some(score);
                self.stale = 0;
            }
        }
        self.stale >= self.config.patience || self.epochs >= self.config.max_epochs
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Epoch at which a score sequence stops training, if it does.
pub fn stopping_epoch(config: EarlyStopConfig, scores: &[f64]) -> Option<usize> {
    let mut s = EarlyStopper::new(config);
    scores.iter().position(|&x| s.observe(x)).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    /// Constant learning rate.
    pub lr: f64,
    pub seed: u64,
    pub pooling: PoolingStrategy,
    pub early_stop: EarlyStopConfig,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 32,
            lr: 1e-5,
            seed: 42,
            pooling: PoolingStrategy::MeanWithAttention,
            early_stop: EarlyStopConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

/// An encoder with a linear head `logits = W·pooled + b`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: SentenceEncoder,
    /// `[C, H]`.
    pub weight: Tensor<f32>,
    /// `[C]`.
    pub bias: Tensor<f32>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// State after the last epoch run.
    pub classifier: Classifier,
    pub history: Vec<EpochRecord>,
}

impl Classifier {
    /// Head initialized from Normal(0, 0.02) with zero bias.
    pub fn new(encoder: SentenceEncoder, class_names: Vec<String>, seed: u64) -> Result<Self, ClassifierError> {
        let c = class_names.len();
        if c < 2 {
            return Err(ClassifierError::TooFewClasses(c));
        }
        let h = encoder.params.config().hidden_size;
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Tensor::zeros(&[c, h]);
        weight.data.iter_mut().for_each(|x| *x = normal.sample(&mut rng) as f32);
        Ok(Classifier { encoder, weight, bias: Tensor::zeros(&[c]), class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn head(&self, pooled: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.mat().mapv(f64::from);
        let b = self.bias.vec().mapv(f64::from);
        pooled.dot(&w.t()) + &b
    }

    /// Head logits `[N, C]` with dropout off.
    pub fn logits<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<f64>, ClassifierError> {
        let seqs = self.encoder.tokenize_all(texts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Array2::zeros((seqs.len(), self.num_classes()));
        for (c, chunk) in seqs.chunks(64).enumerate() {
            let pooled = self.encoder.embed_ids(chunk, Mode::Eval, &mut rng)?.pooled;
            out.slice_mut(ndarray::s![c * 64..c * 64 + chunk.len(), ..]).assign(&self.head(&pooled));
        }
        Ok(out)
    }

    /// Writes the tokenizer and `model.ctxf` (encoder plus head) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ClassifierError> {
        std::fs::create_dir_all(dir)?;
        self.encoder.tokenizer.save(dir).map_err(ContrastiveError::from)?;
        let mut extra = Map::new();
        extra.insert("pooling".into(), Value::from(self.encoder.pooling.name()));
        extra.insert("max_len".into(), Value::from(self.encoder.max_len));
        extra.insert("class_names".into(), Value::from(self.class_names.clone()));
        save_bundle(
            &dir.join(crate::contrastive::MODEL_FILE),
            &self.encoder.params,
            extra,
            &[(HEAD_WEIGHT.into(), &self.weight), (HEAD_BIAS.into(), &self.bias)],
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ClassifierError> {
        let encoder = SentenceEncoder::load(dir)?;
        let (_, config, rest) = load_bundle(&dir.join(crate::contrastive::MODEL_FILE))?;
        let class_names: Vec<String> = config
            .get("class_names")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| ClassifierError::NotAClassifier("missing class_names".into()))?;
        let find = |name: &str| {
            rest.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| ClassifierError::NotAClassifier(format!("missing tensor {name}")))
        };
        let (weight, bias) = (find(HEAD_WEIGHT)?, find(HEAD_BIAS)?);
        let (c, h) = (class_names.len(), encoder.params.config().hidden_size);
        if weight.shape != [c, h] || bias.shape != [c] {
            return Err(ClassifierError::NotAClassifier(format!(
                "head shapes {:?}/{:?} do not match {c} classes and hidden size {h}",
                weight.shape, bias.shape
            )));
        }
        Ok(Classifier { encoder, weight, bias, class_names })
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per text, in input order.
pub fn predict<S: AsRef<str>>(clf: &Classifier, texts: &[S]) -> Result<Vec<usize>, ClassifierError> {
    if texts.is_empty() {
        return Err(ClassifierError::EmptyInput);
    }
    Ok(clf.logits(texts)?.rows().into_iter().map(|r| argmax(&r)).collect())
}

/// Unweighted mean over all `c` classes of per-class F1. A class with
/// zero precision and recall (including one never predicted nor present)
/// scores 0.
pub fn f1_macro(y_true: &[usize], y_pred: &[usize], c: usize) -> Result<f64, ClassifierError> {
    if y_true.len() != y_pred.len() {
        return Err(ClassifierError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(ClassifierError::EmptyInput);
    }
    if c == 0 {
        return Err(ClassifierError::TooFewClasses(0));
    }
    let (mut tp, mut fp, mut fneg) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for l in [t, p] {
            if l >= c {
                return Err(ClassifierError::LabelOutOfRange { label: l, classes: c });
            }
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let f1 = |k: usize| {
        let denom = 2 * tp[k] + fp[k] + fneg[k];
        if tp[k] == 0 {
            0.0
        } else {
            2.0 * tp[k] as f64 / denom as f64
        }
    };
    Ok((0..c).map(f1).sum::<f64>() / c as f64)
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        row.mapv_inplace(|x| (x - lse).exp() / n);
        row[y] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// Trains the head and every encoder weight on `train`, scoring F1-macro
/// on `val` after each epoch until early stopping fires. Returns the state
/// after the final epoch.
pub fn finetune(
    encoder: SentenceEncoder,
    class_names: Vec<String>,
    train: &Split,
    val: &Split,
    hyper: &FinetuneConfig,
) -> Result<FinetuneOutcome, ClassifierError> {
    finetune_observed(encoder, class_names, train, val, hyper, |_| {})
}

/// [`finetune`], reporting each epoch as it finishes.
pub fn finetune_observed(
    encoder: SentenceEncoder,
    class_names: Vec<String>,
    train: &Split,
    val: &Split,
    hyper: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FinetuneOutcome, ClassifierError> {
    hyper.early_stop.validate()?;
    if hyper.batch_size == 0 || !(hyper.lr >= 0.0) {
        return Err(ClassifierError::InvalidConfig("batch_size must be positive and lr non-negative".into()));
    }
    if train.is_empty() {
        return Err(ClassifierError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(ClassifierError::EmptySplit("validation"));
    }
    let mut clf = Classifier::new(encoder.with_pooling(hyper.pooling), class_names, hyper.seed)?;
    let c = clf.num_classes();
    if let Some(&label) = train.labels.iter().chain(&val.labels).find(|&&l| l >= c) {
        return Err(ClassifierError::LabelOutOfRange { label, classes: c });
    }
    let ids = clf.encoder.tokenize_all(&train.texts)?;
    let mut sizes: Vec<usize> = clf.encoder.params.weights().entries().iter().map(|(_, t)| t.len()).collect();
    sizes.extend([clf.weight.len(), clf.bias.len()]);
    let mut opt = OptimizerState::new(hyper.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut stopper = EarlyStopper::new(hyper.early_stop);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    loop {
        let epoch = stopper.epochs() + 1;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(hyper.batch_size) {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| ids[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let emb = clf.encoder.embed_ids(&seqs, Mode::Train, &mut dropout_rng)?;
            let (loss, dlogits) = cross_entropy(&clf.head(&emb.pooled), &labels);
            if !loss.is_finite() {
                return Err(ClassifierError::DivergedLoss { epoch });
            }
            loss_sum += loss * idx.len() as f64;
            let dw = dlogits.t().dot(&emb.pooled);
            let db: Array1<f64> = dlogits.sum_axis(Axis(0));
            let dpooled = dlogits.dot(&clf.weight.mat().mapv(f64::from));
            let dout = pool_batch_backward(&emb.out, &emb.batch, clf.encoder.pooling, &dpooled.view())?;
            let grads = backward(&clf.encoder.params, &emb.tape, &dout)?;
            let dw = dw.into_raw_vec_and_offset().0;
            let db = db.into_raw_vec_and_offset().0;
            let mut g: Vec<&[f64]> = grads.entries().into_iter().map(|(_, t)| t.data.as_slice()).collect();
            g.extend([dw.as_slice(), db.as_slice()]);
            let Classifier { encoder, weight, bias, .. } = &mut clf;
            let mut w = encoder.params.weights_mut().entries_mut();
            let mut p: Vec<&mut [f32]> = w.iter_mut().map(|(_, t)| t.data.as_mut_slice()).collect();
            p.extend([weight.data.as_mut_slice(), bias.data.as_mut_slice()]);
            adamw_step(&mut p, &g, &mut opt, hyper.lr)?;
        }
        let val_f1 = f1_macro(&val.labels, &predict(&clf, &val.texts)?, c)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_f1 };
        on_epoch(&record);
        history.push(record);
        if stopper.observe(val_f1) {
            break;
        }
    }
    Ok(FinetuneOutcome { classifier: clf, history })
}

/// Mean and 95% half-width `1.96·s/√n` (sample standard deviation).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResults {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub f1_per_seed: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

/// Fine-tunes once per seed on a fixed split and scores each final
/// checkpoint on `test`. Runs are independent and may execute in parallel.
pub fn repeat_finetune(
    name: &str,
    encoder: &SentenceEncoder,
    d: &LabeledDataset,
    splits: &(Split, Split, Split),
    hyper: &FinetuneConfig,
    seeds: &[u64],
) -> Result<SeedResults, ClassifierError> {
    let (train, val, test) = splits;
    let f1_per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = FinetuneConfig { seed, ..hyper.clone() };
            let out = finetune(encoder.clone(), d.class_names().to_vec(), train, val, &cfg)?;
            f1_macro(&test.labels, &predict(&out.classifier, &test.texts)?, d.num_classes())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (mean, ci95) = mean_ci95(&f1_per_seed);
    Ok(SeedResults { dataset: name.to_owned(), seeds: seeds.to_vec(), f1_per_seed, mean, ci95 })
}
