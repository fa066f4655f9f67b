//! Property tests over the small algebraic invariants.

use proptest::prelude::*;
use synre::corpus::relative_position_bucket;
use synre::tape::{softmax_slice, Tape};
use synre::tensor::Tensor;

proptest! {
    #[test]
    fn position_bucket_monotone_and_saturating(
        p in 0usize..200,
        clip in 1usize..64,
        offsets in proptest::collection::vec(0usize..400, 2),
    ) {
        let (a, b) = (offsets[0].min(offsets[1]), offsets[0].max(offsets[1]));
        let ba = relative_position_bucket(a, p, clip);
        let bb = relative_position_bucket(b, p, clip);
        prop_assert!(ba <= bb, "monotone in i - p");
        prop_assert!(bb < 2 * clip + 1, "stays inside the bucket range");
        // saturation outside the clip window
        prop_assert_eq!(relative_position_bucket(p + clip + 50, p, clip), 2 * clip);
        prop_assert_eq!(relative_position_bucket(0, p + clip.max(1) + 50, clip), 0);
    }

    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let y = softmax_slice(&xs);
        let sum: f64 = y.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_shift_invariance(
        xs in proptest::collection::vec(-20.0f64..20.0, 1..10),
        c in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let a = softmax_slice(&xs);
        let b = softmax_slice(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_invariant_under_permutation_within_segments(
        data in proptest::collection::vec(-10.0f64..10.0, 6),
        swap in 0usize..2,
    ) {
        // segments for p1=2, p2=4 over 6 columns: [0,1] [2,4] [5]
        let mut permuted = data.clone();
        if swap == 0 {
            permuted.swap(0, 1);
        } else {
            permuted.swap(2, 4);
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 6, data).unwrap());
        let b = tape.constant(Tensor::matrix(1, 6, permuted).unwrap());
        let pa = tape.piecewise_max(a, 2, 4).unwrap();
        let pb = tape.piecewise_max(b, 2, 4).unwrap();
        prop_assert_eq!(tape.value(pa).data(), tape.value(pb).data());
    }

    #[test]
    fn pooling_monotone_in_every_segment_element(
        data in proptest::collection::vec(-10.0f64..10.0, 6),
        bump_at in 0usize..6,
        bump in 0.0f64..5.0,
    ) {
        let mut bigger = data.clone();
        bigger[bump_at] += bump;
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 6, data).unwrap());
        let b = tape.constant(Tensor::matrix(1, 6, bigger).unwrap());
        let pa = tape.piecewise_max(a, 2, 4).unwrap();
        let pb = tape.piecewise_max(b, 2, 4).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            prop_assert!(y >= x);
        }
    }
}
