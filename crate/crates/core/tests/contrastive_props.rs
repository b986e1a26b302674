mod common;

use crisis_kit::contrastive::{encode_sentences, mnr_hard_loss, mnr_hard_loss_grad, mnr_loss, mnr_loss_grad, ContrastiveError};
use crisis_kit::pooling::PoolingStrategy;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{rel_err, tiny_sentence_encoder, TINY_CORPUS};

fn gaussian(n: usize, h: usize, rng: &mut impl Rng) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn((n, h), || StandardNormal.sample(rng))
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn rotation(h: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = gaussian(h, h, rng);
    for i in 0..h {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let qj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &qj);
        }
        let n = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|x| x / n);
    }
    q
}

/// `(anchors, positives, negatives)` of shape `[n, h]` each.
fn triples() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>, u64)> {
    (1usize..7, 2usize..9, any::<u64>()).prop_map(|(n, h, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (gaussian(n, h, &mut rng), gaussian(n, h, &mut rng), gaussian(n, h, &mut rng), seed)
    })
}

proptest! {
    #[test]
    fn losses_ignore_row_scale((a, p, q, seed) in triples(), tau in 0.02f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let scale = |x: &Array2<f64>, rng: &mut ChaCha8Rng| {
            let mut y = x.clone();
            for mut r in y.rows_mut() {
                let c = rng.gen_range(0.01..100.0);
                r.mapv_inplace(|v| v * c);
            }
            y
        };
        let (a2, p2, q2) = (scale(&a, &mut rng), scale(&p, &mut rng), scale(&q, &mut rng));
        let l1 = mnr_loss(&a.view(), &p.view(), tau).unwrap();
        let l2 = mnr_loss(&a2.view(), &p2.view(), tau).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-8 * l1.abs().max(1.0));
        let h1 = mnr_hard_loss(&a.view(), &p.view(), &q.view(), tau).unwrap();
        let h2 = mnr_hard_loss(&a2.view(), &p2.view(), &q2.view(), tau).unwrap();
        prop_assert!((h1 - h2).abs() <= 1e-8 * h1.abs().max(1.0));
    }

    #[test]
    fn losses_ignore_rotations((a, p, q, seed) in triples()) {
        let r = rotation(a.ncols(), &mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let tau = 0.05;
        let l1 = mnr_hard_loss(&a.view(), &p.view(), &q.view(), tau).unwrap();
        let l2 = mnr_hard_loss(&a.dot(&r).view(), &p.dot(&r).view(), &q.dot(&r).view(), tau).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-8 * l1.abs().max(1.0));
    }

    #[test]
    fn batch_order_is_irrelevant((a, p, q, seed) in triples()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..a.nrows()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 3));
        let pick = |x: &Array2<f64>| x.select(Axis(0), &perm);
        let g1 = mnr_hard_loss_grad(&a.view(), &p.view(), &q.view(), 0.1).unwrap();
        let g2 = mnr_hard_loss_grad(&pick(&a).view(), &pick(&p).view(), &pick(&q).view(), 0.1).unwrap();
        prop_assert!((g1.loss - g2.loss).abs() < 1e-10);
        let permuted = pick(&g1.d_anchor);
        for (u, v) in permuted.iter().zip(&g2.d_anchor) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn hard_negatives_only_add_loss((a, p, q, _) in triples(), tau in 0.02f64..2.0) {
        let plain = mnr_loss(&a.view(), &p.view(), tau).unwrap();
        let hard = mnr_hard_loss(&a.view(), &p.view(), &q.view(), tau).unwrap();
        prop_assert!(plain >= 0.0);
        prop_assert!(hard >= plain - 1e-12);
    }
}

fn check_gradient(
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    loss: impl Fn(&Array2<f64>) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x.raw_dim()) {
        let (mut up, mut down) = (x.clone(), x.clone());
        up[idx] += h;
        down[idx] -= h;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[idx], numeric));
    }
    worst
}

#[test]
fn loss_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, p, q) = (gaussian(4, 8, &mut rng), gaussian(4, 8, &mut rng), gaussian(4, 8, &mut rng));
    let tau = 0.05;
    let g = mnr_loss_grad(&a.view(), &p.view(), tau).unwrap();
    assert!(check_gradient(&a, &g.d_anchor, |x| mnr_loss(&x.view(), &p.view(), tau).unwrap()) < 1e-4);
    assert!(check_gradient(&p, &g.d_positive, |x| mnr_loss(&a.view(), &x.view(), tau).unwrap()) < 1e-4);
    assert!(g.d_negative.is_none());

    let g = mnr_hard_loss_grad(&a.view(), &p.view(), &q.view(), tau).unwrap();
    let f = |a: &Array2<f64>, p: &Array2<f64>, q: &Array2<f64>| mnr_hard_loss(&a.view(), &p.view(), &q.view(), tau).unwrap();
    assert!(check_gradient(&a, &g.d_anchor, |x| f(x, &p, &q)) < 1e-4);
    assert!(check_gradient(&p, &g.d_positive, |x| f(&a, x, &q)) < 1e-4);
    assert!(check_gradient(&q, g.d_negative.as_ref().unwrap(), |x| f(&a, &p, x)) < 1e-4);
}

#[test]
fn degenerate_inputs_are_rejected() {
    let a = Array2::<f64>::ones((2, 3));
    let z = Array2::<f64>::zeros((2, 3));
    assert!(matches!(mnr_loss(&a.view(), &z.view(), 0.05), Err(ContrastiveError::ZeroVector { .. })));
    assert!(matches!(mnr_loss(&a.view(), &a.view(), 0.0), Err(ContrastiveError::InvalidTemperature(_))));
    let e = Array2::<f64>::ones((0, 3));
    assert!(matches!(mnr_loss(&e.view(), &e.view(), 0.05), Err(ContrastiveError::EmptyBatch)));
    let b = Array2::<f64>::ones((3, 3));
    assert!(matches!(mnr_loss(&a.view(), &b.view(), 0.05), Err(ContrastiveError::ShapeMismatch(_))));
}

#[test]
fn sentence_embeddings_are_unit_rows_and_deterministic() {
    let texts = [TINY_CORPUS[0], TINY_CORPUS[1], TINY_CORPUS[0], TINY_CORPUS[3]];
    for pooling in PoolingStrategy::ALL {
        let enc = tiny_sentence_encoder(4).with_pooling(pooling);
        let e = encode_sentences(&enc, &texts).unwrap();
        assert_eq!(e.dim(), (4, 16));
        for r in e.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12, "{pooling}");
        }
        assert_eq!(e.row(0), e.row(2));
        assert_eq!(e, encode_sentences(&enc, &texts).unwrap());
    }
}

#[test]
fn blank_texts_are_rejected() {
    let enc = tiny_sentence_encoder(4);
    assert!(matches!(encode_sentences::<&str>(&enc, &[]), Err(ContrastiveError::EmptyInput)));
    assert!(matches!(
        encode_sentences(&enc, &["fine", "   \n "]),
        Err(ContrastiveError::EmptyText { index: 1 })
    ));
}
