mod common;

use crisis_kit::classifier::{
    argmax, f1_macro, finetune, predict, stopping_epoch, stratified_split, EarlyStopConfig, FinetuneConfig,
    LabeledDataset,
};
use ndarray::Array1;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::tiny_sentence_encoder;

fn labels(c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..c, 0..c), 1..60).prop_map(|v| v.into_iter().unzip())
}

/// Every class gets at least 3 members.
fn dataset() -> impl Strategy<Value = LabeledDataset> {
    prop::collection::vec(3usize..25, 2..6).prop_map(|counts| {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
        let texts = (0..labels.len()).map(|i| format!("text {i}")).collect();
        let names = (0..counts.len()).map(|c| format!("class{c}")).collect();
        LabeledDataset::new(texts, labels, names).unwrap()
    })
}

proptest! {
    #[test]
    fn f1_ignores_consistent_relabeling((t, p) in labels(4), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rt: Vec<usize> = t.iter().map(|&l| perm[l]).collect();
        let rp: Vec<usize> = p.iter().map(|&l| perm[l]).collect();
        let a = f1_macro(&t, &p, 4).unwrap();
        prop_assert!((a - f1_macro(&rt, &rp, 4).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let mut covering = t.clone();
        covering.extend(0..4);
        prop_assert_eq!(f1_macro(&covering, &covering, 4).unwrap(), 1.0);
    }

    #[test]
    fn splits_partition_each_class(d in dataset(), seed in any::<u64>()) {
        let (a, b, c) = stratified_split(&d, (0.7, 0.1, 0.2), seed).unwrap();
        let mut all: Vec<usize> = a.indices.iter().chain(&b.indices).chain(&c.indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        for s in [&a, &b, &c] {
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            for (k, &i) in s.indices.iter().enumerate() {
                prop_assert_eq!(s.labels[k], d.labels()[i]);
                prop_assert_eq!(&s.texts[k], &d.texts()[i]);
            }
        }
        for class in 0..d.num_classes() {
            let n = d.labels().iter().filter(|&&l| l == class).count() as f64;
            for (s, r) in [(&a, 0.7), (&b, 0.1), (&c, 0.2)] {
                let got = s.labels.iter().filter(|&&l| l == class).count() as f64;
                prop_assert!((got - n * r).abs() < 1.0 + 1e-9, "class {class}: {got} vs {}", n * r);
            }
        }
        prop_assert_eq!(stratified_split(&d, (0.7, 0.1, 0.2), seed).unwrap(), (a, b, c));
    }

    #[test]
    fn early_stopping_respects_its_bounds(
        scores in prop::collection::vec(0.0f64..1.0, 1..60),
        patience in 1usize..8,
        max_epochs in 1usize..40,
    ) {
        let cfg = EarlyStopConfig { patience, threshold: 1e-4, max_epochs };
        match stopping_epoch(cfg, &scores) {
            Some(e) => {
                prop_assert!(e <= max_epochs);
                if e < max_epochs {
                    prop_assert!(e > patience);
                }
            }
            None => prop_assert!(scores.len() < max_epochs),
        }
        let rising: Vec<f64> = (0..max_epochs + 5).map(|i| i as f64).collect();
        prop_assert_eq!(stopping_epoch(cfg, &rising), Some(max_epochs));
    }

    #[test]
    fn argmax_picks_a_maximum(v in prop::collection::vec(-3i32..3, 1..10)) {
        let row: Array1<f64> = v.iter().map(|&x| x as f64).collect();
        let i = argmax(&row.view());
        let top = *v.iter().max().unwrap();
        prop_assert_eq!(v[i], top);
        prop_assert_eq!(v.iter().position(|&x| x == top), Some(i));
    }
}

fn toy_dataset(n: usize, seed: u64) -> LabeledDataset {
    let words = [["flood", "river", "water"], ["fire", "smoke", "valley"]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut texts, mut labels) = (Vec::new(), Vec::new());
    for i in 0..n {
        let c = i % 2;
        let len = rng.gen_range(2..5);
        texts.push((0..len).map(|_| *words[c].choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "));
        labels.push(c);
    }
    LabeledDataset::new(texts, labels, vec!["flood".into(), "fire".into()]).unwrap()
}

#[test]
fn separable_toy_is_learned() {
    let d = toy_dataset(60, 3);
    let (train, val, test) = stratified_split(&d, (0.7, 0.1, 0.2), 42).unwrap();
    let hyper = FinetuneConfig {
        batch_size: 8,
        lr: 3e-3,
        early_stop: EarlyStopConfig { patience: 3, threshold: 1e-4, max_epochs: 15 },
        ..Default::default()
    };
    let out = finetune(tiny_sentence_encoder(5), d.class_names().to_vec(), &train, &val, &hyper).unwrap();
    assert!(!out.history.is_empty());
    let f1 = f1_macro(&test.labels, &predict(&out.classifier, &test.texts).unwrap(), 2).unwrap();
    assert!(f1 > 0.95, "test F1 {f1}");
    let again = finetune(tiny_sentence_encoder(5), d.class_names().to_vec(), &train, &val, &hyper).unwrap();
    assert_eq!(out.history, again.history);
}
