//! Property tests for the split protocol, partition round trips, and the
//! metric computations.

use proptest::prelude::*;

use hsimamba_core::data::LabelGrid;
use hsimamba_core::metrics::{compute_metrics, ConfusionMatrix};
use hsimamba_core::spatial::partition;
use hsimamba_core::tensor::{Tape, Tensor};
use hsimamba_core::train::{make_splits, SplitRule};

fn grid_from_sizes(sizes: &[usize]) -> LabelGrid {
    let total: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(total);
    for (c, &n) in sizes.iter().enumerate() {
        data.extend(std::iter::repeat(c as u16 + 1).take(n));
    }
    LabelGrid::new(1, total, data)
}

proptest! {
    #[test]
    fn split_rules_hold_for_any_class_sizes(
        sizes in proptest::collection::vec(2usize..120, 1..5),
        seed in 0u64..1000,
    ) {
        let labels = grid_from_sizes(&sizes);
        let rule = SplitRule::default();
        let split = make_splits(&labels, rule, seed).unwrap();

        for (c, &n) in sizes.iter().enumerate() {
            let cs = &split.per_class[&(c as u16 + 1)];
            // disjoint and jointly exhaustive
            let mut all: Vec<usize> = cs.train.iter().chain(&cs.val).chain(&cs.test).copied().collect();
            let before = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), before, "no index repeats");
            prop_assert_eq!(all.len(), n, "all pixels covered");

            if n >= rule.small_class_threshold {
                prop_assert_eq!(cs.train.len(), 30);
                prop_assert_eq!(cs.val.len(), 10);
            } else {
                let half = n.div_ceil(2);
                prop_assert_eq!(cs.train.len() + cs.val.len(), half, "50/50 split");
                prop_assert_eq!(cs.test.len(), n - half);
                let expected_train = ((0.75 * half as f64) + 0.5).floor() as usize;
                prop_assert_eq!(cs.train.len(), expected_train, "3:1 with round-half-up");
            }
        }

        // seed determinism
        let again = make_splits(&labels, rule, seed).unwrap();
        prop_assert_eq!(split, again);
    }

    #[test]
    fn partition_scatter_identity_for_random_maps(
        m in proptest::collection::vec(0usize..7, 1..80),
    ) {
        let l = m.len();
        let part = partition(&m, 7).unwrap();
        let x = Tensor::new(vec![l, 3], (0..l * 3).map(|i| i as f64 * 0.37 - 5.0).collect()).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let mut acc = None;
        for idx in &part.indices {
            if idx.is_empty() { continue; }
            let piece = tape.gather_rows(xid, idx).unwrap();
            let placed = tape.scatter_rows(piece, idx, l).unwrap();
            acc = Some(match acc {
                None => placed,
                Some(a) => tape.add(a, placed).unwrap(),
            });
        }
        prop_assert_eq!(tape.value(acc.unwrap()).data(), x.data());
    }

    #[test]
    fn softmax_rows_are_stochastic(
        data in proptest::collection::vec(-30.0f64..30.0, 12..=12),
    ) {
        let x = Tensor::new(vec![3, 4], data).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let y = tape.softmax(xid, 1).unwrap();
        let out = tape.value(y);
        for r in 0..3 {
            let s: f64 = out.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(out.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn metrics_match_scalar_loop_oracle(
        counts in proptest::collection::vec(0u64..200, 16..=16),
    ) {
        let cm = ConfusionMatrix::from_counts(4, counts.clone());
        let m = compute_metrics(cm);

        // independent scalar-loop route
        let at = |r: usize, c: usize| counts[r * 4 + c];
        let total: u64 = counts.iter().sum();
        if total == 0 {
            prop_assert_eq!(m.oa, 0.0);
            return Ok(());
        }
        let mut diag = 0u64;
        for c in 0..4 { diag += at(c, c); }
        let oa = diag as f64 / total as f64;
        prop_assert_eq!(m.oa, oa);

        let mut recalls = Vec::new();
        for r in 0..4 {
            let mut row = 0u64;
            for c in 0..4 { row += at(r, c); }
            if row > 0 {
                recalls.push(at(r, r) as f64 / row as f64);
            }
        }
        let aa = if recalls.is_empty() { 0.0 } else { recalls.iter().sum::<f64>() / recalls.len() as f64 };
        prop_assert_eq!(m.aa, aa);

        let mut expected: u128 = 0;
        for c in 0..4 {
            let mut row = 0u64; let mut col = 0u64;
            for j in 0..4 { row += at(c, j); col += at(j, c); }
            expected += row as u128 * col as u128;
        }
        let p_e = expected as f64 / (total as f64 * total as f64);
        let kappa = if (1.0 - p_e).abs() < 1e-15 {
            if oa >= 1.0 { 1.0 } else { 0.0 }
        } else {
            (oa - p_e) / (1.0 - p_e)
        };
        prop_assert_eq!(m.kappa, kappa);
        prop_assert!(m.kappa >= -1.0 - 1e-12 && m.kappa <= 1.0 + 1e-12);
    }
}

#[test]
fn select_restore_identity_at_full_ratio() {
    use hsimamba_core::attention::{restore_order, select_and_sort};
    use hsimamba_core::rng::{self, seeded};
    let mut rng = seeded(301);
    for trial in 0..50 {
        let n = 1 + trial % 8;
        let x = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| rng::uniform(&mut rng, -2.0, 2.0)).collect(),
        )
        .unwrap();
        let scores: Vec<f64> = (0..n).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let (kept, seq) = select_and_sort(&mut tape, xid, &scores, 1.0).unwrap();
        // permutation is a full bijection at ρ = 1
        let mut perm = seq.permutation.clone();
        perm.sort_unstable();
        assert_eq!(perm, (0..n).collect::<Vec<_>>());
        let back = restore_order(&mut tape, kept, &seq, xid).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }
}
