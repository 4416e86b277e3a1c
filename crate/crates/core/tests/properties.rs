use std::collections::BTreeSet;

use proptest::prelude::*;
use trajmine::eval::{coverage, rmse, top_error_indices};
use trajmine::features::{partition, PartitionScheme};
use trajmine::flow::{FlowConfig, FlowModel};
use trajmine::mining::{mine, mine_all, ScoreTable};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-50.0..50.0f64, (-3i32..3).prop_map(f64::from)], 1..120)
}

proptest! {
    #[test]
    fn mined_sets_have_exact_size_and_lowest_scores(s in scores(), r in 0.01..=1.0f64) {
        let (delta, idx) = mine(&s, r).unwrap();
        let k = (r * s.len() as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(idx.len(), k);
        let picked: BTreeSet<usize> = idx.iter().copied().collect();
        let max_in = idx.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..s.len() {
            if !picked.contains(&i) {
                prop_assert!(s[i] >= max_in);
            }
        }
        if let Some(d) = delta {
            prop_assert!(idx.iter().all(|&i| s[i] <= d));
        } else {
            prop_assert_eq!(k, s.len());
        }
    }

    #[test]
    fn mining_is_nested_in_r(s in scores(), a in 0.01..=1.0f64, b in 0.01..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small: BTreeSet<usize> = mine(&s, lo).unwrap().1.into_iter().collect();
        let large: BTreeSet<usize> = mine(&s, hi).unwrap().1.into_iter().collect();
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn mining_ignores_constant_shift(s in scores(), c in -100.0..100.0f64, r in 0.01..=1.0f64) {
        let shifted: Vec<f64> = s.iter().map(|x| x + c.round()).collect();
        prop_assert_eq!(mine(&s, r).unwrap().1, mine(&shifted, r).unwrap().1);
    }

    #[test]
    fn zero_lambda_matches_course_subset(x in scores(), r in 0.01..=1.0f64) {
        let z: Vec<f64> = x.iter().rev().copied().collect();
        let t = ScoreTable::from_columns(x, z, 0.0).unwrap();
        let m = mine_all(&t, r).unwrap();
        prop_assert_eq!(m.d_yx, m.d_z);
    }

    #[test]
    fn rmse_is_permutation_invariant(mut e in prop::collection::vec(0.0..30.0f64, 1..50), seed in any::<u64>()) {
        let a = rmse(&e).unwrap();
        let n = e.len();
        e.rotate_left((seed as usize) % n);
        prop_assert!((rmse(&e).unwrap() - a).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn reference_labels_nest_and_cover_themselves(e in prop::collection::vec(0.0..30.0f64, 1..80), r in 0.01..=1.0f64) {
        let s = top_error_indices(&e, r).unwrap();
        let all = top_error_indices(&e, 1.0).unwrap();
        prop_assert_eq!(all.len(), e.len());
        prop_assert!(s.iter().all(|i| all.contains(i)));
        if !s.is_empty() {
            prop_assert_eq!(coverage(&s, &s).unwrap(), 1.0);
        }
    }

    #[test]
    fn partitions_tile_the_window(frames in 1usize..200, k in 1u32..12, len in 0.1..3.0f64) {
        for scheme in [PartitionScheme::FixSegNum(k), PartitionScheme::FixSegLen((len * 10.0).round() / 10.0)] {
            if let Ok(parts) = partition(frames, scheme) {
                prop_assert_eq!(parts.first().unwrap().start, 0);
                prop_assert_eq!(parts.last().unwrap().end, frames);
                for w in parts.windows(2) {
                    prop_assert_eq!(w[0].end, w[1].start);
                }
                prop_assert!(parts.iter().all(|p| !p.is_empty()));
            }
        }
    }

    #[test]
    fn flow_round_trip(seed in any::<u64>(), d in 1usize..9, v in prop::collection::vec(-4.0..4.0f64, 8)) {
        let m = FlowModel::random(d, &FlowConfig { coupling_layers: 3, hidden: 8 }, seed).unwrap();
        let (b, _) = m.forward(&v[..d]).unwrap();
        let back = m.inverse(&b).unwrap();
        for (x, y) in v[..d].iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
