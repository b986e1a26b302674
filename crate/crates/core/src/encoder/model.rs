use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{
    accumulate, accumulate_vec, dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, linear,
    linear_backward, masked_softmax, softmax_backward, NormCache,
};
use super::params::{EncoderParams, LayerWeights, Weights};
use super::{EncodedBatch, EncoderConfig, EncoderError, Gradients};

/// Sequences per gradient-accumulation chunk. Fixed so that the order of
/// floating-point sums does not depend on the thread count.
const BACKWARD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    Eval,
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    probs_drop: Option<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    attn_norm: NormCache,
    x1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ffn_norm: NormCache,
}

struct SeqCache {
    ids: Vec<u32>,
    embed_norm: NormCache,
    embed_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

/// Everything the backward pass needs from one forward call.
pub struct Tape {
    version: u64,
    config: EncoderConfig,
    weights: Arc<Weights<f64>>,
    seqs: Vec<SeqCache>,
    len: usize,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.seqs.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Attention probabilities (before dropout) of one head, `[L, L]`.
    pub fn attention_probs(&self, seq: usize, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.seqs[seq].layers[layer].probs[head].view()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }
}

fn maybe_dropout(shape: (usize, usize), p: f64, rng: &mut Option<ChaCha8Rng>) -> Option<Array2<f64>> {
    match rng {
        Some(r) if p > 0.0 => Some(dropout_mask(shape, p, r)),
        _ => None,
    }
}

fn apply(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn seq_forward(
    w: &Weights<f64>,
    cfg: &EncoderConfig,
    ids: &[u32],
    mask: &[u8],
    mut rng: Option<ChaCha8Rng>,
) -> (Array2<f64>, SeqCache) {
    let (len, h) = (ids.len(), cfg.hidden_size);
    let (heads, hd) = (cfg.num_attention_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let eps = cfg.layer_norm_eps;
    let p_hidden = cfg.hidden_dropout_prob;
    let p_attn = cfg.attention_probs_dropout_prob;

    let word = w.word_embeddings.mat();
    let pos = w.position_embeddings.mat();
    let mut x0 = Array2::zeros((len, h));
    for (l, &id) in ids.iter().enumerate() {
        let mut row = x0.row_mut(l);
        row += &word.row(id as usize);
        row += &pos.row(l);
    }
    let (mut x, embed_norm) = layer_norm(&x0.view(), &w.embed_norm, eps);
    let embed_drop = maybe_dropout((len, h), p_hidden, &mut rng);
    apply(&mut x, &embed_drop);

    let key_bias: Array1<f64> = mask
        .iter()
        .map(|&m| if m == 1 { 0.0 } else { f64::NEG_INFINITY })
        .collect();

    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let x_in = x;
        let q = linear(&x_in.view(), &lw.query);
        let k = linear(&x_in.view(), &lw.key);
        let v = linear(&x_in.view(), &lw.value);
        let mut ctx = Array2::zeros((len, h));
        let mut probs = Vec::with_capacity(heads);
        let mut probs_drop = Vec::new();
        for head in 0..heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            masked_softmax(&mut scores, &key_bias.view());
            let dm = maybe_dropout((len, len), p_attn, &mut rng);
            let out = match &dm {
                Some(m) => (&scores * m).dot(&v.slice(cols)),
                None => scores.dot(&v.slice(cols)),
            };
            ctx.slice_mut(cols).assign(&out);
            probs.push(scores);
            if let Some(m) = dm {
                probs_drop.push(m);
            }
        }
        let mut o = linear(&ctx.view(), &lw.attn_out);
        let attn_drop = maybe_dropout((len, h), p_hidden, &mut rng);
        apply(&mut o, &attn_drop);
        o += &x_in;
        let (x1, attn_norm) = layer_norm(&o.view(), &lw.attn_norm, eps);

        let ffn_pre = linear(&x1.view(), &lw.ffn_in);
        let ffn_act = ffn_pre.mapv(gelu);
        let mut f = linear(&ffn_act.view(), &lw.ffn_out);
        let ffn_drop = maybe_dropout((len, h), p_hidden, &mut rng);
        apply(&mut f, &ffn_drop);
        f += &x1;
        let (x2, ffn_norm) = layer_norm(&f.view(), &lw.ffn_norm, eps);

        layers.push(LayerCache {
            x_in,
            q,
            k,
            v,
            probs,
            probs_drop: if probs_drop.is_empty() { None } else { Some(probs_drop) },
            ctx,
            attn_drop,
            attn_norm,
            x1,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ffn_norm,
        });
        x = x2;
    }
    let cache = SeqCache { ids: ids.to_vec(), embed_norm, embed_drop, layers };
    (x, cache)
}

/// Runs the encoder. Returns token embeddings `[B, L, H]` and the tape for
/// [`backward`]. Keys with mask 0 get a minus-infinity attention bias, so
/// their content never reaches any other position. Dropout is drawn only
/// in [`Mode::Train`], from per-sequence streams seeded by `rng`.
pub fn forward(
    params: &EncoderParams,
    batch: &EncodedBatch,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Array3<f64>, Tape), EncoderError> {
    let cfg = params.config();
    batch.check(cfg)?;
    let weights = Arc::new(params.weights().map(|t| t.to_f64()));
    let seeds: Vec<Option<u64>> = (0..batch.batch)
        .map(|_| (mode == Mode::Train).then(|| rng.gen()))
        .collect();
    let results: Vec<(Array2<f64>, SeqCache)> = (0..batch.batch)
        .into_par_iter()
        .map(|b| {
            let rng = seeds[b].map(ChaCha8Rng::seed_from_u64);
            seq_forward(&weights, cfg, batch.row_ids(b), batch.row_mask(b), rng)
        })
        .collect();
    let mut out = Array3::zeros((batch.batch, batch.len, cfg.hidden_size));
    let mut seqs = Vec::with_capacity(batch.batch);
    for (b, (x, cache)) in results.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&x);
        seqs.push(cache);
    }
    let tape = Tape {
        version: params.version(),
        config: cfg.clone(),
        weights,
        seqs,
        len: batch.len,
    };
    Ok((out, tape))
}

fn times(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn layer_backward(
    lw: &LayerWeights<f64>,
    c: &LayerCache,
    cfg: &EncoderConfig,
    dy: Array2<f64>,
    g: &mut LayerWeights<f64>,
) -> Array2<f64> {
    let (heads, hd) = (cfg.num_attention_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let dr2 = layer_norm_backward(&dy.view(), &c.ffn_norm, &lw.ffn_norm, &mut g.ffn_norm);
    let df = times(dr2.clone(), &c.ffn_drop);
    let dact = linear_backward(&c.ffn_act.view(), &df.view(), &lw.ffn_out, &mut g.ffn_out);
    let dpre = dact * &c.ffn_pre.mapv(gelu_grad);
    let mut dx1 = dr2;
    dx1 += &linear_backward(&c.x1.view(), &dpre.view(), &lw.ffn_in, &mut g.ffn_in);

    let dr1 = layer_norm_backward(&dx1.view(), &c.attn_norm, &lw.attn_norm, &mut g.attn_norm);
    let dout = times(dr1.clone(), &c.attn_drop);
    let dctx = linear_backward(&c.ctx.view(), &dout.view(), &lw.attn_out, &mut g.attn_out);

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for head in 0..heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let p = &c.probs[head];
        let dmask = c.probs_drop.as_ref().map(|m| &m[head]);
        let dctx_h = dctx.slice(cols);
        let used = match dmask {
            Some(m) => p * m,
            None => p.clone(),
        };
        dv.slice_mut(cols).assign(&used.t().dot(&dctx_h));
        let mut dp = dctx_h.dot(&c.v.slice(cols).t());
        if let Some(m) = dmask {
            dp *= m;
        }
        let mut ds = softmax_backward(&p.view(), &dp.view());
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let x = c.x_in.view();
    let mut dx = dr1;
    dx += &linear_backward(&x, &dq.view(), &lw.query, &mut g.query);
    dx += &linear_backward(&x, &dk.view(), &lw.key, &mut g.key);
    dx += &linear_backward(&x, &dv.view(), &lw.value, &mut g.value);
    dx
}

fn seq_backward(w: &Weights<f64>, cfg: &EncoderConfig, c: &SeqCache, dy: Array2<f64>, g: &mut Gradients) {
    let mut dx = dy;
    for (i, lc) in c.layers.iter().enumerate().rev() {
        dx = layer_backward(&w.layers[i], lc, cfg, dx, &mut g.layers[i]);
    }
    let dx = times(dx, &c.embed_drop);
    let dx0 = layer_norm_backward(&dx.view(), &c.embed_norm, &w.embed_norm, &mut g.embed_norm);
    let h = cfg.hidden_size;
    for (l, &id) in c.ids.iter().enumerate() {
        let row = dx0.row(l);
        let base = id as usize * h;
        for (a, b) in g.word_embeddings.data[base..base + h].iter_mut().zip(row) {
            *a += b;
        }
        for (a, b) in g.position_embeddings.data[l * h..(l + 1) * h].iter_mut().zip(row) {
            *a += b;
        }
    }
}

/// Exact gradients of `sum(upstream * output)` with respect to every
/// parameter. The lm-head entries stay zero unless the caller adds head
/// gradients via [`mlm_head_backward`].
pub fn backward(params: &EncoderParams, tape: &Tape, upstream: &Array3<f64>) -> Result<Gradients, EncoderError> {
    if params.version() != tape.version {
        return Err(EncoderError::StaleTape);
    }
    let expected = vec![tape.batch(), tape.len, tape.config.hidden_size];
    if upstream.shape() != expected.as_slice() {
        return Err(EncoderError::GradShape { got: upstream.shape().to_vec(), expected });
    }
    let w = &*tape.weights;
    let chunks: Vec<Gradients> = tape
        .seqs
        .par_chunks(BACKWARD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = Gradients::zeros_like(w);
            for (j, c) in chunk.iter().enumerate() {
                let b = ci * BACKWARD_CHUNK + j;
                let dy = upstream.index_axis(Axis(0), b).to_owned();
                seq_backward(w, &tape.config, c, dy, &mut g);
            }
            g
        })
        .collect();
    let mut iter = chunks.into_iter();
    let mut total = iter.next().unwrap_or_else(|| Gradients::zeros_like(w));
    for g in iter {
        total.add_assign(&g);
    }
    Ok(total)
}

pub struct HeadTape {
    hidden: Array2<f64>,
    pre: Array2<f64>,
    norm: NormCache,
    normed: Array2<f64>,
}

/// Vocabulary logits `[N, V]` for `N` hidden states taken from the encoder
/// output of `tape`.
pub fn mlm_head_forward(tape: &Tape, hidden: Array2<f64>) -> (Array2<f64>, HeadTape) {
    let w = &tape.weights;
    let pre = linear(&hidden.view(), &w.lm_head.dense);
    let act = pre.mapv(gelu);
    let (normed, norm) = layer_norm(&act.view(), &w.lm_head.norm, tape.config.layer_norm_eps);
    let mut logits = normed.dot(&w.word_embeddings.mat().t());
    logits += &w.lm_head.bias.vec();
    (logits, HeadTape { hidden, pre, norm, normed })
}

/// Adds head gradients (including the tied word-embedding decoder) into
/// `grads` and returns the gradient with respect to the hidden states.
pub fn mlm_head_backward(tape: &Tape, head: &HeadTape, dlogits: &ArrayView2<f64>, grads: &mut Gradients) -> Array2<f64> {
    let w = &tape.weights;
    accumulate_vec(&mut grads.lm_head.bias, &dlogits.sum_axis(Axis(0)));
    accumulate(&mut grads.word_embeddings, &dlogits.t().dot(&head.normed));
    let dnormed = dlogits.dot(&w.word_embeddings.mat());
    let dact = layer_norm_backward(&dnormed.view(), &head.norm, &w.lm_head.norm, &mut grads.lm_head.norm);
    let dpre = dact * &head.pre.mapv(gelu_grad);
    linear_backward(&head.hidden.view(), &dpre.view(), &w.lm_head.dense, &mut grads.lm_head.dense)
}
