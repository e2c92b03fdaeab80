//! Property tests for metric, model, and sampler invariants.

use metapattern::data::{self, BalancedSampler};
use metapattern::eval;
use metapattern::nn::{Binding, ParameterSet};
use metapattern::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn scored_set() -> impl Strategy<Value = Vec<(f64, u8)>> {
    // coarse grid forces ties; fix the first two labels so both classes occur
    prop::collection::vec((0..=20u32, 0..2u8), 4..60).prop_map(|raw| {
        let mut v: Vec<(f64, u8)> = raw
            .into_iter()
            .map(|(s, l)| (s as f64 / 20.0, l))
            .collect();
        v[0].1 = 1;
        v[1].1 = 0;
        v
    })
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transforms(scored in scored_set()) {
        let base = eval::auc(&scored).unwrap();
        let shifted: Vec<(f64, u8)> = scored.iter().map(|&(s, l)| (3.0 * s + 7.0, l)).collect();
        let curved: Vec<(f64, u8)> = scored.iter().map(|&(s, l)| (s.exp(), l)).collect();
        prop_assert_eq!(base, eval::auc(&shifted).unwrap());
        prop_assert_eq!(base, eval::auc(&curved).unwrap());
    }

    #[test]
    fn auc_bounded_and_complement_symmetric(scored in scored_set()) {
        let a = eval::auc(&scored).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        // negating scores and swapping labels preserves every pair ordering
        let flipped: Vec<(f64, u8)> = scored.iter().map(|&(s, l)| (-s, 1 - l)).collect();
        prop_assert!((a - eval::auc(&flipped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn eer_threshold_minimizes_rate_gap(scored in scored_set(), probe in 0..=20u32) {
        let tau = eval::eer_threshold(&scored).unwrap();
        let (far, frr) = eval::error_rates(&scored, tau).unwrap();
        let t = probe as f64 / 20.0 + 0.025; // off-grid probe threshold
        let (pf, pr) = eval::error_rates(&scored, t).unwrap();
        prop_assert!((far - frr).abs() <= (pf - pr).abs() + 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-8.0f64..8.0, 6)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], logits).unwrap(), false);
        let s = tape.softmax_last(x).unwrap();
        let out = tape.value(s).data();
        for row in out.chunks(2) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn cdc_matches_explicit_decomposition(
        xs in prop::collection::vec(-1.0f64..1.0, 18),
        ws in prop::collection::vec(-1.0f64..1.0, 2 * 2 * 9),
        theta in 0.0f64..=1.0,
    ) {
        let x = Tensor::new(vec![1, 2, 3, 3], xs).unwrap();
        let w = Tensor::new(vec![2, 2, 3, 3], ws).unwrap();

        let mut params: ParameterSet<f64> = ParameterSet::new();
        params.insert("c.w", w.clone(), true);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut bind = Binding::frozen(&mut params, false);
        let cdc = bind.conv(&mut tape, "c", xv, 1, 1, theta).unwrap();
        let got = tape.value(cdc).data().to_vec();

        // independent route: vanilla conv minus theta * (1x1 conv with the
        // spatially summed kernel)
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(w.clone(), false);
        let main = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let mut wsum = vec![0.0; 2 * 2];
        for o in 0..2 {
            for c in 0..2 {
                wsum[o * 2 + c] = w.data()[(o * 2 + c) * 9..(o * 2 + c + 1) * 9].iter().sum();
            }
        }
        let wsv = tape.leaf(Tensor::new(vec![2, 2, 1, 1], wsum).unwrap(), false);
        let center = tape.conv2d(xv, wsv, None, 1, 0).unwrap();
        let scaled = tape.scale(center, theta).unwrap();
        let expect = tape.sub(main, scaled).unwrap();
        let want = tape.value(expect).data();

        for (g, e) in got.iter().zip(want) {
            prop_assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_sampler_keeps_classes_balanced(
        per_class in 1usize..4,
        draws in 1usize..8,
        seed in 0u64..50,
    ) {
        let ds = data::generate_dataset(2, 5, 32, seed).unwrap();
        let mut s = BalancedSampler::new(&ds, &[1], per_class, data::substream(seed, "prop")).unwrap();
        for _ in 0..draws {
            let batch = s.next_batch();
            prop_assert_eq!(batch.len(), 2 * per_class);
            let genuine = batch
                .iter()
                .filter(|&&i| ds.samples[i].label == data::GENUINE)
                .count();
            prop_assert_eq!(genuine, per_class);
            prop_assert!(batch.iter().all(|&i| ds.samples[i].domain == 1));
        }
    }
}
