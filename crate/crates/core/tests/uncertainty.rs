mod common;

use common::{oracles, random_simplex};
use netinv::model::{Classifier, ClassifierSpec};
use netinv::ood::{
    class_weights, init_garbage, ood_predict, ood_predict_batch, threshold_from_predictions, ue_terms, uncertainty,
    Provenance,
};
use netinv::{seed, Error, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn ue_in_unit_interval_and_matches_oracle(case in any::<u64>(), m in 2usize..12) {
        let p = random_simplex(&mut seed::from_seed(case), m);
        let ue = uncertainty(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&ue));
        prop_assert!((ue - oracles::ue(&p)).abs() < 1e-12);
        let (_, den) = ue_terms(&p).unwrap();
        prop_assert!((den - (m as f64 - 1.0) / m as f64).abs() < 1e-12);
    }

    #[test]
    fn sharpening_never_raises_ue(case in any::<u64>(), m in 2usize..8) {
        let p = random_simplex(&mut seed::from_seed(case), m);
        let sharp: Vec<f64> = p.iter().map(|v| v * v).collect();
        let s: f64 = sharp.iter().sum();
        let sharp: Vec<f64> = sharp.iter().map(|v| v / s).collect();
        prop_assert!(uncertainty(&sharp).unwrap() <= uncertainty(&p).unwrap() + 1e-12);
    }

    #[test]
    fn class_weights_scale_invariant(counts in proptest::collection::vec(1usize..500, 1..6), k in 1usize..20) {
        let w = class_weights(&counts).unwrap();
        let scaled: Vec<usize> = counts.iter().map(|c| c * k).collect();
        for (a, b) in w.iter().zip(class_weights(&scaled).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn garbage_never_exceeds_capacity(pushes in proptest::collection::vec(1usize..6, 0..8), init in 1usize..4, extra in 0usize..10) {
        let capacity = init + extra;
        let mut g = init_garbage(init, [1, 2, 2], 3, capacity, &mut seed::from_seed(1)).unwrap();
        let mut pushed = 0;
        for (cycle, &n) in pushes.iter().enumerate() {
            g.push_inverted(&Tensor::full(&[n, 1, 2, 2], 0.5), cycle + 1).unwrap();
            pushed += n;
            prop_assert!(g.len() <= capacity);
            prop_assert_eq!(g.noise_count(), init);
            prop_assert_eq!(g.len(), (init + pushed).min(capacity));
        }
        let prov = g.provenance();
        prop_assert!(prov[..init].iter().all(|p| *p == Provenance::Noise));
        let cycles: Vec<usize> = prov[init..].iter().map(|p| match p { Provenance::Inverted { cycle } => *cycle, _ => 0 }).collect();
        prop_assert!(cycles.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn ue_hand_cases() {
    for m in [2, 3, 5, 11] {
        let mut onehot = vec![0.0; m];
        onehot[m / 2] = 1.0;
        assert!(uncertainty(&onehot).unwrap().abs() < 1e-9);
        assert!((uncertainty(&vec![1.0 / m as f64; m]).unwrap() - 1.0).abs() < 1e-9);
    }
    let (num, den) = ue_terms(&[0.75, 0.25]).unwrap();
    assert!((num - 0.125).abs() < 1e-15 && (den - 0.5).abs() < 1e-15);
    assert!((uncertainty(&[0.75, 0.25]).unwrap() - 0.75).abs() < 1e-12);
    assert!(matches!(uncertainty(&[0.7, 0.7]), Err(Error::Contract(_))));
    assert!(matches!(uncertainty(&[1.2, -0.2]), Err(Error::Contract(_))));
}

#[test]
fn class_weight_hand_cases() {
    assert_eq!(class_weights(&[7, 7, 7, 7]).unwrap(), vec![1.0; 4]);
    let w = class_weights(&[900, 100]).unwrap();
    assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);
}

#[test]
fn predictions_flag_the_last_class() {
    let mut clf = Classifier::new(ClassifierSpec::mlp([1, 4, 4], 3), &mut seed::from_seed(0)).unwrap();
    clf.zero_output_layer();
    let x = Tensor::full(&[2, 1, 4, 4], 0.5);
    for p in ood_predict_batch(&clf, &x).unwrap() {
        assert_eq!(p.index, 0);
        assert!(!p.is_ood);
        assert!((p.ue - 1.0).abs() < 1e-9);
    }
    let single = ood_predict(&clf, &Tensor::full(&[1, 4, 4], 0.5)).unwrap();
    assert_eq!(single.probs.len(), 3);
    assert!(ood_predict(&clf, &Tensor::full(&[1, 5, 4], 0.5)).is_err());
}

#[test]
fn threshold_gap_sentinel_when_nothing_misrouted() {
    let clf = Classifier::new(ClassifierSpec::mlp([1, 4, 4], 3), &mut seed::from_seed(0)).unwrap();
    let preds = ood_predict_batch(&clf, &Tensor::full(&[3, 1, 4, 4], 0.3)).unwrap();
    let garbage: Vec<_> = preds
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.is_ood = true;
            q
        })
        .collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.index).collect();
    let r = threshold_from_predictions(&preds, &labels, &garbage).unwrap();
    assert!(r.no_misrouted_ood && r.gap == f64::INFINITY && r.violations == 0);
    assert_eq!(r.id_correct, 3);
}
