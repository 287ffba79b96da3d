mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cross_oracle, intra_oracle, random_unit_rows, triplet_oracle, Mat};
use petl_core::objectives::{
    dropout_augment, hinge_triplet, hmmc_loss, hmmc_terms, LossConfig, NegativeMode, RetrievalBatch,
};
use petl_core::PetlError;

fn table(s: &Mat) -> Vec<Vec<f64>> {
    s.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn mode_strategy() -> impl Strategy<Value = NegativeMode> {
    prop_oneof![Just(NegativeMode::Hardest), Just(NegativeMode::Sum)]
}

proptest! {
    #[test]
    fn hinge_matches_oracle(
        seed in 0u64..10_000,
        n in 2usize..10,
        margin in 0.0f64..1.0,
        mode in mode_strategy(),
        shared_ids in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Mat::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0));
        let ids: Vec<usize> = if shared_ids {
            (0..n).map(|_| rng.random_range(0..n.div_ceil(2))).collect()
        } else {
            (0..n).collect()
        };
        let (loss, _) = hinge_triplet(&s, margin, mode, Some(&ids)).unwrap();
        let want = triplet_oracle(&table(&s), margin, mode, &ids);
        prop_assert!((loss - want).abs() < 1e-10, "{} vs {}", loss, want);
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn hardest_never_exceeds_sum(seed in 0u64..10_000, n in 2usize..10, margin in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Mat::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0));
        let (hard, _) = hinge_triplet(&s, margin, NegativeMode::Hardest, None).unwrap();
        let (sum, _) = hinge_triplet(&s, margin, NegativeMode::Sum, None).unwrap();
        prop_assert!(hard <= sum + 1e-12);
    }

    #[test]
    fn hinge_gradient_matches_finite_differences(
        seed in 0u64..10_000,
        n in 2usize..7,
        mode in mode_strategy(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Mat::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0));
        let margin = 0.3;
        let (base, grad) = hinge_triplet(&s, margin, mode, None).unwrap();
        let h = 1e-7;
        for i in 0..n {
            for j in 0..n {
                let mut plus = s.clone();
                plus[[i, j]] += h;
                let mut minus = s.clone();
                minus[[i, j]] -= h;
                let (lp, gp) = hinge_triplet(&plus, margin, mode, None).unwrap();
                let (lm, gm) = hinge_triplet(&minus, margin, mode, None).unwrap();
                // Piecewise linear: compare only where both sides keep the same active set.
                if gp != grad || gm != grad {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                prop_assert!((fd - grad[[i, j]]).abs() < 1e-6, "({},{}) fd {} analytic {} base {}", i, j, fd, grad[[i, j]], base);
            }
        }
    }

    #[test]
    fn hmmc_is_sum_of_oracle_terms(seed in 0u64..10_000, b in 2usize..9, dim in 2usize..12, mode in mode_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_unit_rows(&mut rng, b, dim);
        let t = random_unit_rows(&mut rng, b, dim);
        let va = random_unit_rows(&mut rng, b, dim);
        let ta = random_unit_rows(&mut rng, b, dim);
        let ids: Vec<usize> = (0..b).collect();
        let cfg = LossConfig {
            margin_cross: 0.2,
            margin_image: 0.1,
            margin_text: 0.3,
            dropout_p: 0.2,
            negative_mode: mode,
        };
        let batch = RetrievalBatch::new(v.clone(), t.clone(), va.clone(), ta.clone(), ids.clone()).unwrap();
        let terms = hmmc_terms(&batch, &cfg).unwrap();
        prop_assert!((terms.cross - cross_oracle(&v, &t, 0.2, mode, &ids)).abs() < 1e-10);
        prop_assert!((terms.intra_image - intra_oracle(&v, &va, 0.1, mode, &ids)).abs() < 1e-10);
        prop_assert!((terms.intra_text - intra_oracle(&t, &ta, 0.3, mode, &ids)).abs() < 1e-10);
        prop_assert!((hmmc_loss(&batch, &cfg).unwrap() - terms.total()).abs() < 1e-12);
    }
}

#[test]
fn satisfied_margins_give_zero_loss_and_gradient() {
    let n = 5;
    let s = Mat::from_shape_fn((n, n), |(i, j)| if i == j { 0.9 } else { 0.1 });
    for mode in [NegativeMode::Hardest, NegativeMode::Sum] {
        let (loss, grad) = hinge_triplet(&s, 0.5, mode, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}

#[test]
fn hardest_ties_pick_the_lower_index() {
    let s = ndarray::array![[0.5, 0.4, 0.4], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
    let (_, grad) = hinge_triplet(&s, 0.2, NegativeMode::Hardest, None).unwrap();
    // Both entries serve as the hardest negative of their column; only the
    // lower one also wins row 0.
    assert_eq!(grad[[0, 1]], 2.0);
    assert_eq!(grad[[0, 2]], 1.0);
}

#[test]
fn all_same_image_has_no_negatives() {
    let s = Mat::from_elem((3, 3), 0.5);
    let (loss, grad) = hinge_triplet(&s, 0.2, NegativeMode::Sum, Some(&[4, 4, 4])).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn malformed_batches_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = random_unit_rows(&mut rng, 3, 4);
    let short = random_unit_rows(&mut rng, 2, 4);
    assert!(RetrievalBatch::new(v.clone(), short, v.clone(), v.clone(), vec![0, 1, 2]).is_err());
    assert!(RetrievalBatch::new(v.clone(), v.clone(), v.clone(), v.clone(), vec![0, 1]).is_err());
    assert!(matches!(
        hinge_triplet(&Mat::zeros((2, 3)), 0.2, NegativeMode::Sum, None),
        Err(PetlError::Input(_))
    ));
    let bad = LossConfig {
        margin_cross: -0.1,
        ..LossConfig::default()
    };
    let batch = RetrievalBatch::new(v.clone(), v.clone(), v.clone(), v, vec![0, 1, 2]).unwrap();
    assert!(matches!(hmmc_loss(&batch, &bad), Err(PetlError::Config(_))));
}

#[test]
fn dropout_zeroes_and_rescales() {
    let x = Mat::from_elem((20, 30), 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = dropout_augment(&x, 0.25, &mut rng).unwrap();
    for &v in y.iter() {
        assert!(v == 0.0 || (v - 2.0 / 0.75).abs() < 1e-12);
    }
    let dropped = y.iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
    assert!((dropped - 0.25).abs() < 0.08, "{dropped}");
    assert!(dropout_augment(&x, 1.0, &mut rng).is_err());
}
