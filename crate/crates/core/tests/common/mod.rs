#![allow(dead_code)]

use crisis_kit::encoder::{EncoderConfig, EncoderParams, Gradients};

const INIT_STD: f32 = 0.02;

/// 2-layer, H=16 encoder with a small vocabulary and no dropout.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        hidden_size: 16,
        num_hidden_layers: 2,
        num_attention_heads: 4,
        intermediate_size: 32,
        max_position_embeddings: 12,
        vocab_size: 40,
        hidden_dropout_prob: 0.0,
        attention_probs_dropout_prob: 0.0,
        layer_norm_eps: 1e-5,
        ..Default::default()
    }
}

/// Rescales parameters so that central differences with `h = 1e-3` are
/// accurate: embeddings get unit standard deviation and the MLM head's dense
/// weight gets standard deviation `1/sqrt(fan_in)`.
///
/// The difference quotient carries an O(h^2) truncation error proportional
/// to the loss curvature. At the 0.02 init scale the inputs of the embedding
/// and head layer norms are so narrow that this error dominates.
pub fn condition_for_differences(p: &mut EncoderParams) {
    for (name, t) in p.weights_mut().entries_mut() {
        let factor = if name.starts_with("embeddings.word") || name.starts_with("embeddings.position") {
            1.0 / INIT_STD
        } else if name == "lm_head.dense.weight" {
            1.0 / (INIT_STD * (t.shape[0] as f32).sqrt())
        } else {
            1.0
        };
        t.data.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Relative error with a floor so that entries that are zero up to
/// round-off do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences of `loss` for every scalar of every parameter tensor
/// (or every `stride`-th scalar), compared with `grads`.
///
/// Parameters are `f32`, so the perturbation actually applied is
/// `(theta + h) as f32 - (theta - h) as f32`, evaluated exactly in `f64`.
pub fn finite_difference_check(
    params: &EncoderParams,
    grads: &Gradients,
    h: f64,
    stride: usize,
    skip: impl Fn(&str) -> bool,
    loss: impl Fn(&EncoderParams) -> f64,
) -> FdReport {
    let mut work = params.clone();
    let names: Vec<(String, usize)> = params
        .weights()
        .entries()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let grad_entries = grads.entries();
    let mut report = FdReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    for (ti, (name, len)) in names.iter().enumerate() {
        if skip(name) {
            continue;
        }
        for i in (0..*len).step_by(stride.max(1)) {
            let orig = params.weights().entries()[ti].1.data[i];
            let plus = (orig as f64 + h) as f32;
            let minus = (orig as f64 - h) as f32;
            set(&mut work, ti, i, plus);
            let lp = loss(&work);
            set(&mut work, ti, i, minus);
            let lm = loss(&work);
            set(&mut work, ti, i, orig);
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let analytic = grad_entries[ti].1.data[i];
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{name}[{i}] analytic={analytic:e} numeric={numeric:e}");
            }
        }
    }
    report
}

fn set(p: &mut EncoderParams, tensor: usize, i: usize, v: f32) {
    p.weights_mut().entries_mut()[tensor].1.data[i] = v;
}

pub const TINY_CORPUS: &[&str] = &[
    "flood waters rising near the river",
    "wildfire smoke over the valley",
    "earthquake felt downtown",
    "rescue teams reach the flooded town",
    "shelters open at the school",
];

/// Sentence encoder over the tiny configuration, sized to a small tokenizer.
pub fn tiny_sentence_encoder(seed: u64) -> crisis_kit::contrastive::SentenceEncoder {
    use crisis_kit::bpe::{train_bpe, BASE_VOCAB};
    use crisis_kit::contrastive::SentenceEncoder;
    use crisis_kit::encoder::init_params;
    use crisis_kit::pooling::PoolingStrategy;

    let tokenizer = train_bpe(TINY_CORPUS, BASE_VOCAB + 40).unwrap();
    let cfg = EncoderConfig { vocab_size: tokenizer.vocab_size(), ..tiny_config() };
    SentenceEncoder::new(init_params(&cfg, seed).unwrap(), tokenizer, PoolingStrategy::MeanWithAttention).unwrap()
}
