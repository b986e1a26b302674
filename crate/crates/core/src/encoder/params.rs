use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, EncoderError};

pub const INIT_STD: f64 = 0.02;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }
}

impl<T> Tensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mat(&self) -> ArrayView2<'_, T> {
        assert_eq!(self.shape.len(), 2, "tensor is not a matrix");
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).unwrap()
    }

    pub fn vec(&self) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[..])
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x as f64).collect(),
        }
    }
}

impl Tensor<f64> {
    pub fn add_assign(&mut self, other: &Tensor<f64>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `y = x W + b`, with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub attn_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Norm<T>,
}

/// Masked-LM head: dense + GELU + layer norm, then a decoder tied to the
/// word embeddings plus its own bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LmHead<T> {
    pub dense: Linear<T>,
    pub norm: Norm<T>,
    pub bias: Tensor<T>,
}

/// Every learnable tensor of the model. Also used, with `f64` entries, as
/// the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub word_embeddings: Tensor<T>,
    pub position_embeddings: Tensor<T>,
    pub embed_norm: Norm<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lm_head: LmHead<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&Tensor<T>) -> Tensor<U>) -> Linear<U> {
        Linear { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&Tensor<T>) -> Tensor<U>) -> Norm<U> {
        Norm { gamma: f(&self.gamma), beta: f(&self.beta) }
    }
}

// Works for both `&Weights` and `&mut Weights`: destructuring hands out
// disjoint borrows of every field.
macro_rules! named_entries {
    ($weights:expr) => {{
        let Weights { word_embeddings, position_embeddings, embed_norm, layers, lm_head } = $weights;
        let mut out = Vec::new();
        out.push(("embeddings.word".to_string(), word_embeddings));
        out.push(("embeddings.position".to_string(), position_embeddings));
        let Norm { gamma, beta } = embed_norm;
        out.push(("embeddings.norm.gamma".to_string(), gamma));
        out.push(("embeddings.norm.beta".to_string(), beta));
        for (i, l) in layers.into_iter().enumerate() {
            let LayerWeights { query, key, value, attn_out, attn_norm, ffn_in, ffn_out, ffn_norm } = l;
            for (name, lin) in [
                ("attention.query", query),
                ("attention.key", key),
                ("attention.value", value),
                ("attention.output", attn_out),
                ("ffn.input", ffn_in),
                ("ffn.output", ffn_out),
            ] {
                let Linear { weight, bias } = lin;
                out.push((format!("layers.{i}.{name}.weight"), weight));
                out.push((format!("layers.{i}.{name}.bias"), bias));
            }
            for (name, n) in [("attention.norm", attn_norm), ("ffn.norm", ffn_norm)] {
                let Norm { gamma, beta } = n;
                out.push((format!("layers.{i}.{name}.gamma"), gamma));
                out.push((format!("layers.{i}.{name}.beta"), beta));
            }
        }
        let LmHead { dense, norm, bias } = lm_head;
        let Linear { weight, bias: dense_bias } = dense;
        out.push(("lm_head.dense.weight".to_string(), weight));
        out.push(("lm_head.dense.bias".to_string(), dense_bias));
        let Norm { gamma, beta } = norm;
        out.push(("lm_head.norm.gamma".to_string(), gamma));
        out.push(("lm_head.norm.beta".to_string(), beta));
        out.push(("lm_head.bias".to_string(), bias));
        out
    }};
}

impl<T> Weights<T> {
    /// All tensors with their canonical names, in checkpoint order.
    pub fn entries(&self) -> Vec<(String, &Tensor<T>)> {
        named_entries!(self)
    }

    /// Same order as [`entries`](Self::entries).
    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        named_entries!(self)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<U>) -> Weights<U> {
        Weights {
            word_embeddings: f(&self.word_embeddings),
            position_embeddings: f(&self.position_embeddings),
            embed_norm: self.embed_norm.map(&mut f),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    query: l.query.map(&mut f),
                    key: l.key.map(&mut f),
                    value: l.value.map(&mut f),
                    attn_out: l.attn_out.map(&mut f),
                    attn_norm: l.attn_norm.map(&mut f),
                    ffn_in: l.ffn_in.map(&mut f),
                    ffn_out: l.ffn_out.map(&mut f),
                    ffn_norm: l.ffn_norm.map(&mut f),
                })
                .collect(),
            lm_head: LmHead {
                dense: self.lm_head.dense.map(&mut f),
                norm: self.lm_head.norm.map(&mut f),
                bias: f(&self.lm_head.bias),
            },
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<T: Copy + Default> Weights<T> {
    pub fn zeros_like<U>(other: &Weights<U>) -> Self {
        other.map(|t| Tensor::zeros(&t.shape))
    }

    /// Tree of the right shapes for `cfg`, with the given fill values for
    /// matrices/embeddings, biases and layer-norm scales.
    fn shaped(cfg: &EncoderConfig, zero: T, one: T) -> Self {
        let (h, i) = (cfg.hidden_size, cfg.intermediate_size);
        let lin = |a: usize, b: usize| Linear {
            weight: Tensor::filled(&[a, b], zero),
            bias: Tensor::filled(&[b], zero),
        };
        let norm = || Norm {
            gamma: Tensor::filled(&[h], one),
            beta: Tensor::filled(&[h], zero),
        };
        Weights {
            word_embeddings: Tensor::filled(&[cfg.vocab_size, h], zero),
            position_embeddings: Tensor::filled(&[cfg.max_position_embeddings, h], zero),
            embed_norm: norm(),
            layers: (0..cfg.num_hidden_layers)
                .map(|_| LayerWeights {
                    query: lin(h, h),
                    key: lin(h, h),
                    value: lin(h, h),
                    attn_out: lin(h, h),
                    attn_norm: norm(),
                    ffn_in: lin(h, i),
                    ffn_out: lin(i, h),
                    ffn_norm: norm(),
                })
                .collect(),
            lm_head: LmHead {
                dense: lin(h, h),
                norm: norm(),
                bias: Tensor::filled(&[cfg.vocab_size], zero),
            },
        }
    }
}

impl Weights<f64> {
    pub fn add_assign(&mut self, other: &Weights<f64>) {
        for ((_, a), (_, b)) in self.entries_mut().into_iter().zip(other.entries()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.entries_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Model parameters plus their configuration. Every mutable access assigns
/// a new version, which is how tapes detect that they have gone stale.
#[derive(Debug)]
pub struct EncoderParams {
    config: EncoderConfig,
    weights: Weights<f32>,
    version: u64,
}

impl Clone for EncoderParams {
    fn clone(&self) -> Self {
        EncoderParams {
            config: self.config.clone(),
            weights: self.weights.clone(),
            version: fresh_version(),
        }
    }
}

impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights
    }
}

impl EncoderParams {
    pub fn from_weights(config: EncoderConfig, weights: Weights<f32>) -> Result<Self, EncoderError> {
        config.validate()?;
        let expected = Weights::<f32>::shaped(&config, 0.0, 1.0);
        for ((name, want), (_, got)) in expected.entries().into_iter().zip(weights.entries()) {
            if want.shape != got.shape {
                return Err(EncoderError::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, config requires {:?}",
                    got.shape, want.shape
                )));
            }
        }
        if expected.layers.len() != weights.layers.len() {
            return Err(EncoderError::InvalidConfig("layer count mismatch".into()));
        }
        Ok(EncoderParams { config, weights, version: fresh_version() })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<f32> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<f32> {
        self.version = fresh_version();
        &mut self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Changes dropout probabilities without touching weights.
    pub fn set_dropout(&mut self, hidden: f64, attention: f64) {
        self.config.hidden_dropout_prob = hidden;
        self.config.attention_probs_dropout_prob = attention;
        self.version = fresh_version();
    }

    pub fn shape_template(cfg: &EncoderConfig) -> Weights<f32> {
        Weights::shaped(cfg, 0.0, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .entries()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Weights ~ Normal(0, 0.02), biases and layer-norm shifts 0, layer-norm
/// scales 1. Deterministic in `seed`.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams, EncoderError> {
    cfg.validate()?;
    let mut weights = Weights::<f32>::shaped(cfg, 0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, INIT_STD).unwrap();
    for (name, t) in weights.entries_mut() {
        let is_matrix = t.shape.len() == 2;
        if is_matrix {
            debug_assert!(name.ends_with("weight") || name.starts_with("embeddings"));
            t.data.iter_mut().for_each(|x| *x = normal.sample(&mut rng) as f32);
        }
    }
    EncoderParams::from_weights(cfg.clone(), weights)
}
