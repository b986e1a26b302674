mod common;

use crisis_kit::encoder::{backward, forward, init_params, EncodedBatch, Mode};
use ndarray::{Array3, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::tiny_config;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// `batch` rows of length `len`; row `b` attends to its first `lens[b]`
/// positions (at least one).
fn batch_strategy() -> impl Strategy<Value = EncodedBatch> {
    let cfg = tiny_config();
    (1usize..4, 1usize..=cfg.max_position_embeddings).prop_flat_map(move |(b, len)| {
        (
            prop::collection::vec(0u32..cfg.vocab_size as u32, b * len),
            prop::collection::vec(1usize..=len, b),
        )
            .prop_map(move |(ids, lens)| {
                let mask: Vec<u8> = lens.iter().flat_map(|&l| (0..len).map(move |i| u8::from(i < l))).collect();
                EncodedBatch::new(b, len, ids, mask).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_and_gradients_are_finite(batch in batch_strategy(), seed in 0u64..1000, train in any::<bool>()) {
        let mut cfg = tiny_config();
        if train {
            cfg.hidden_dropout_prob = 0.1;
            cfg.attention_probs_dropout_prob = 0.1;
        }
        let p = init_params(&cfg, seed).unwrap();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let (out, tape) = forward(&p, &batch, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.shape(), &[batch.batch, batch.len, cfg.hidden_size]);
        prop_assert!(out.iter().all(|x| x.is_finite()));
        let upstream = out.mapv(|x| x.sin());
        let g = backward(&p, &tape, &upstream).unwrap();
        prop_assert!(g.is_finite());
    }

    #[test]
    fn masked_content_never_reaches_attended_outputs(batch in batch_strategy(), fill in 0u32..40) {
        let p = init_params(&tiny_config(), 3).unwrap();
        let (a, _) = forward(&p, &batch, Mode::Eval, &mut rng()).unwrap();
        let mut changed = batch.clone();
        for (id, &m) in changed.ids.iter_mut().zip(&batch.attention_mask) {
            if m == 0 {
                *id = fill;
            }
        }
        let (b, _) = forward(&p, &changed, Mode::Eval, &mut rng()).unwrap();
        for s in 0..batch.batch {
            let (x, y) = (a.index_axis(Axis(0), s), b.index_axis(Axis(0), s));
            for (i, &m) in batch.row_mask(s).iter().enumerate() {
                if m == 1 {
                    prop_assert_eq!(x.row(i), y.row(i));
                }
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions_over_attended_keys() {
    let cfg = tiny_config();
    let p = init_params(&cfg, 1).unwrap();
    let batch = EncodedBatch::from_sequences(&[vec![2, 7, 8, 9, 3], vec![2, 11, 3]]);
    let (_, tape) = forward(&p, &batch, Mode::Eval, &mut rng()).unwrap();
    for s in 0..2 {
        let mask = batch.row_mask(s);
        for layer in 0..cfg.num_hidden_layers {
            for head in 0..cfg.num_attention_heads {
                for row in tape.attention_probs(s, layer, head).rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    for (&pr, &m) in row.iter().zip(mask) {
                        assert!(m == 1 || pr == 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn without_positions_permuting_tokens_permutes_outputs() {
    let cfg = tiny_config();
    let mut p = init_params(&cfg, 9).unwrap();
    for (name, t) in p.weights_mut().entries_mut() {
        if name.starts_with("embeddings.position") {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let ids = vec![5u32, 17, 23, 8, 31, 12];
    let perm = [3usize, 0, 5, 1, 4, 2];
    let shuffled: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
    let run = |ids: Vec<u32>| -> Array3<f64> {
        forward(&p, &EncodedBatch::from_sequences(&[ids]), Mode::Eval, &mut rng()).unwrap().0
    };
    let (a, b) = (run(ids), run(shuffled));
    for (j, &i) in perm.iter().enumerate() {
        let (x, y) = (a.index_axis(Axis(0), 0), b.index_axis(Axis(0), 0));
        for (u, v) in x.row(i).iter().zip(y.row(j)) {
            assert!((u - v).abs() < 1e-12, "position {i} -> {j}");
        }
    }
}

#[test]
fn eval_mode_ignores_the_rng() {
    let mut cfg = tiny_config();
    cfg.hidden_dropout_prob = 0.3;
    let p = init_params(&cfg, 2).unwrap();
    let batch = EncodedBatch::from_sequences(&[vec![2, 9, 14, 3]]);
    let a = forward(&p, &batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
    let b = forward(&p, &batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
    assert_eq!(a, b);
    let c = forward(&p, &batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
    assert_ne!(a, c);
}
