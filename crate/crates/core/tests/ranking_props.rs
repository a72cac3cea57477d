mod common;

use common::{class_scores, random_mat, softmax, top_rows, Mat};
use dcat_core::ranking::{class_attention, keep_count, select_top, Projection};
use dcat_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so ties are common.
fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..5, 1..=12).prop_map(|v| v.into_iter().map(|x| x as f64 / 4.0).collect())
}

fn alpha() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(0.5), Just(0.25), Just(0.75), 0.01f64..=1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn select_top_equals_selection_oracle(scores in tied_scores(), a in alpha()) {
        let r = select_top(&scores, a).unwrap();
        prop_assert_eq!(r.kept, top_rows(&scores, a));
    }

    #[test]
    fn kept_sets_are_nested_in_alpha(scores in tied_scores(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = select_top(&scores, lo).unwrap().kept;
        let large = select_top(&scores, hi).unwrap().kept;
        prop_assert!(small.len() <= large.len());
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn permutation_moves_kept_rows_with_scores(
        scores in prop::collection::vec(0.0f64..1.0, 1..=12),
        a in alpha(),
        seed in any::<u64>(),
    ) {
        // distinct scores: a permutation must permute the kept set
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut distinct = scores.clone();
        distinct.sort_by(|x, y| x.partial_cmp(y).unwrap());
        distinct.dedup();
        prop_assume!(distinct.len() == scores.len());
        let base: Vec<usize> = select_top(&scores, a).unwrap().kept;
        let moved: Vec<usize> = select_top(&permuted, a).unwrap().kept.iter().map(|&r| perm[r - 1] + 1).collect();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn keep_count_is_least_covering_integer(n in 1usize..200, a in 0.001f64..=1.0) {
        let k = keep_count(a, n).unwrap();
        prop_assert!(k >= 1 && k <= n);
        prop_assert!((k as f64) >= a * n as f64 - 1e-9);
        prop_assert!(k == 1 || ((k - 1) as f64) < a * n as f64 - 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_mat(&mut rng, rows, cols);
        let s = x.tensor().softmax_rows().unwrap();
        let shifted = Mat::new(rows, cols, x.d.iter().map(|v| v + shift).collect()).tensor().softmax_rows().unwrap();
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            let oracle = softmax(x.row(r));
            for (a, b) in row.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn class_attention_matches_dense_reference(t in 2usize..8, heads in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * heads;
        let x = random_mat(&mut rng, t, d);
        let w = random_mat(&mut rng, d, d);
        let got = class_attention(&x.tensor(), Projection::Affine { weight: &w.tensor(), bias: None }, Projection::Identity, heads).unwrap();
        let want = class_scores(&x.mul(&w), &x, heads);
        prop_assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tape_softmax_is_invariant_to_row_shift() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::matrix(1, 3, vec![1000.0, 1001.0, 999.0]).unwrap());
    let s = tape.softmax_rows(x).unwrap();
    let want = softmax(&[0.0, 1.0, -1.0]);
    for (a, b) in tape.value(s).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}
