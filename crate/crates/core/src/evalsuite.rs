//! Sentence-embedding quality (D_avg) and inference timing.
//!
//! D_avg scores how tightly each class clusters. For class `k` with members
//! `e_i` (unit vectors), `d_k` is the mean over members of the mean cosine
//! to the other members of `k`. Class weights are inverse class counts,
//! normalized to sum to one, and `D_avg = Σ ŵ_k d_k`. Higher is better.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveError, SentenceEncoder};
use crate::encoder::{EncodedBatch, Mode};
use crate::pooling::PoolingStrategy;

/// Tolerance on row norms accepted by [`LabeledEmbeddings::new`].
pub const NORM_TOLERANCE: f64 = 1e-6;

/// `d_k` assigned to a class with a single member when self-pairs are
/// excluded.
pub const SINGLETON_SIMILARITY: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("class {class} has no members")]
    EmptyClass { class: usize },
    #[error("class {class} is out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("row {row} has norm {norm}; embeddings must be unit length")]
    NotNormalized { row: usize, norm: f64 },
    #[error("{rows} embedding rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether `d_k` averages over ordered pairs `i ≠ j` only, or also counts
/// each member's similarity with itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfPairs {
    #[default]
    Exclude,
    Include,
}

/// Unit-length embeddings with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    e: Array2<f64>,
    y: Vec<usize>,
    k: usize,
}

impl LabeledEmbeddings {
    /// Requires unit rows and at least one member in every class `0..k`.
    pub fn new(e: Array2<f64>, y: Vec<usize>, k: usize) -> Result<Self, EvalError> {
        if e.nrows() != y.len() {
            return Err(EvalError::LengthMismatch { rows: e.nrows(), labels: y.len() });
        }
        if y.is_empty() {
            return Err(EvalError::Empty);
        }
        for (row, r) in e.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(EvalError::NotNormalized { row, norm });
            }
        }
        class_counts(&y, k)?;
        Ok(LabeledEmbeddings { e, y, k })
    }

    /// Scales each row of `raw` to unit length first.
    pub fn normalized(raw: &ArrayView2<f64>, y: Vec<usize>, k: usize) -> Result<Self, EvalError> {
        let mut e = raw.to_owned();
        for (row, mut r) in e.rows_mut().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(EvalError::NotNormalized { row, norm });
            }
            r /= norm;
        }
        Self::new(e, y, k)
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.e
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    fn members(&self, class: usize) -> Vec<usize> {
        (0..self.y.len()).filter(|&i| self.y[i] == class).collect()
    }
}

fn class_counts(y: &[usize], k: usize) -> Result<Vec<usize>, EvalError> {
    let mut counts = vec![0usize; k];
    for &c in y {
        *counts
            .get_mut(c)
            .ok_or(EvalError::UnknownClass { class: c, classes: k })? += 1;
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(EvalError::EmptyClass { class });
    }
    Ok(counts)
}

/// Normalized inverse-count weights; they sum to one.
pub fn class_weights(y: &[usize], k: usize) -> Result<Vec<f64>, EvalError> {
    let w: Vec<f64> = class_counts(y, k)?.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// Mean intra-class cosine similarity `d_k` of `class`.
///
/// Uses the class sum `s`: member `i` contributes `(e_i·s − 1)/(n − 1)`
/// with self-pairs excluded and `e_i·s / n` with them included.
pub fn intra_class_similarity(l: &LabeledEmbeddings, class: usize, self_pairs: SelfPairs) -> Result<f64, EvalError> {
    if class >= l.k {
        return Err(EvalError::UnknownClass { class, classes: l.k });
    }
    let idx = l.members(class);
    let n = idx.len();
    if n == 0 {
        return Err(EvalError::EmptyClass { class });
    }
    if n == 1 && self_pairs == SelfPairs::Exclude {
        return Ok(SINGLETON_SIMILARITY);
    }
    let rows = l.e.select(Axis(0), &idx);
    let s: Array1<f64> = rows.sum_axis(Axis(0));
    let total: f64 = rows
        .rows()
        .into_iter()
        .map(|r| match self_pairs {
            SelfPairs::Exclude => (r.dot(&s) - r.dot(&r)) / (n - 1) as f64,
            SelfPairs::Include => r.dot(&s) / n as f64,
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub count: usize,
    pub w: f64,
    pub w_hat: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassScore>,
    pub d_avg: f64,
    pub self_pairs: SelfPairs,
    /// `d` used for classes with one member.
    pub singleton_d: f64,
}

pub fn metric_report(l: &LabeledEmbeddings, self_pairs: SelfPairs) -> Result<MetricReport, EvalError> {
    let counts = class_counts(&l.y, l.k)?;
    let w_hat = class_weights(&l.y, l.k)?;
    let per_class = (0..l.k)
        .map(|class| {
            Ok(ClassScore {
                class,
                count: counts[class],
                w: 1.0 / counts[class] as f64,
                w_hat: w_hat[class],
                d: intra_class_similarity(l, class, self_pairs)?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let d_avg = per_class.iter().map(|c| c.w_hat * c.d).sum();
    Ok(MetricReport { per_class, d_avg, self_pairs, singleton_d: SINGLETON_SIMILARITY })
}

/// `Σ_k ŵ_k d_k` with self-pairs excluded.
pub fn d_avg(l: &LabeledEmbeddings) -> Result<f64, EvalError> {
    d_avg_with(l, SelfPairs::Exclude)
}

pub fn d_avg_with(l: &LabeledEmbeddings, self_pairs: SelfPairs) -> Result<f64, EvalError> {
    metric_report(l, self_pairs).map(|r| r.d_avg)
}

/// Embeds `texts` with `enc` and scores them against `labels`.
pub fn evaluate_encoder<S: AsRef<str>>(
    enc: &SentenceEncoder,
    texts: &[S],
    labels: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    let e = crate::contrastive::encode_sentences(enc, texts)?;
    d_avg(&LabeledEmbeddings::new(e, labels.to_vec(), k)?)
}

/// Parses a TSV of reals, one embedding per line.
pub fn parse_matrix_tsv(text: &str) -> Result<Array2<f64>, EvalError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split('\t')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Malformed { line: i + 1, reason: e.to_string() })?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(EvalError::Malformed {
                line: i + 1,
                reason: format!("expected {} columns, found {}", rows[0].len(), row.len()),
            });
        }
        rows.push(row);
    }
    let h = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), h), flat).expect("rectangular rows"))
}

/// Writes `m` as a TSV of reals. `parse_matrix_tsv` reads it back exactly.
pub fn matrix_to_tsv(m: &ArrayView2<f64>) -> String {
    let mut s = String::new();
    for r in m.rows() {
        let fields: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&fields.join("\t"));
        s.push('\n');
    }
    s
}

/// Summary statistics of timing samples, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub tokenization: TimingStats,
    pub embedding_generation: TimingStats,
}

/// Quantile `p` of ascending `sorted` by linear interpolation at position
/// `p·(n − 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&p));
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sample standard deviation (n − 1), minimum and quartiles.
pub fn summarize(samples: &[f64]) -> Result<TimingStats, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = if s.len() > 1 { s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(TimingStats {
        mean,
        std: var.sqrt(),
        min: s[0],
        q1: quantile(&s, 0.25),
        q2: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
    })
}

/// Times tokenization (ids plus attention mask) and embedding generation
/// (forward pass plus masked mean pooling) separately for each text.
/// Runs on one thread; the first pass over `texts` is a warmup and is not
/// recorded.
pub fn timing_bench<S: AsRef<str> + Sync>(
    enc: &SentenceEncoder,
    texts: &[S],
    repetitions: usize,
) -> Result<TimingReport, EvalError> {
    if texts.is_empty() || repetitions == 0 {
        return Err(EvalError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let enc = enc.with_pooling(PoolingStrategy::MeanWithAttention);
    pool.install(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tok = Vec::with_capacity(texts.len() * repetitions);
        let mut emb = Vec::with_capacity(texts.len() * repetitions);
        for pass in 0..=repetitions {
            for t in texts {
                let start = Instant::now();
                let ids = enc.tokenize(t.as_ref());
                let batch = EncodedBatch::from_sequences(std::slice::from_ref(&ids));
                let t_tok = start.elapsed();
                std::hint::black_box(&batch);
                let start = Instant::now();
                let out = enc.embed_ids(std::slice::from_ref(&ids), Mode::Eval, &mut rng)?;
                let t_emb = start.elapsed();
                std::hint::black_box(&out.pooled);
                if pass > 0 {
                    tok.push(t_tok.as_secs_f64() * 1e3);
                    emb.push(t_emb.as_secs_f64() * 1e3);
                }
            }
        }
        Ok(TimingReport { tokenization: summarize(&tok)?, embedding_generation: summarize(&emb)? })
    })
}
