mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cosine_table, random_unit_rows, recall_oracle, Mat};
use petl_core::retrieval::{
    kfold_aggregate, mean_recall, recall_at_k, similarity_matrix, six_recalls, Direction, MetricsRecord,
};

fn random_problem(seed: u64, n_img: usize, levels: usize) -> (Mat, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut caption_to_image = Vec::new();
    for i in 0..n_img {
        for _ in 0..rng.random_range(1..=5usize) {
            caption_to_image.push(i);
        }
    }
    let s = Mat::from_shape_simple_fn((n_img, caption_to_image.len()), || {
        rng.random_range(0..levels) as f64 / levels as f64
    });
    (s, caption_to_image)
}

fn candidates(s: &Mat, dir: Direction) -> usize {
    match dir {
        Direction::ImageQuery => s.ncols(),
        Direction::TextQuery => s.nrows(),
    }
}

proptest! {
    #[test]
    fn recall_matches_oracle(seed in 0u64..100_000, n_img in 1usize..15, coarse in any::<bool>()) {
        let (s, c2i) = random_problem(seed, n_img, if coarse { 4 } else { 10_000 });
        for dir in [Direction::ImageQuery, Direction::TextQuery] {
            for k in 1..=candidates(&s, dir) {
                let got = recall_at_k(&s, &c2i, k, dir).unwrap();
                prop_assert!((got - recall_oracle(&s, &c2i, k, dir)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recall_is_bounded_and_monotone_in_k(seed in 0u64..100_000, n_img in 1usize..15) {
        let (s, c2i) = random_problem(seed, n_img, 7);
        for dir in [Direction::ImageQuery, Direction::TextQuery] {
            let mut last = 0.0;
            for k in 1..=candidates(&s, dir) {
                let r = recall_at_k(&s, &c2i, k, dir).unwrap();
                prop_assert!((0.0..=100.0).contains(&r));
                prop_assert!(r >= last);
                last = r;
            }
            prop_assert_eq!(last, 100.0);
        }
    }

    #[test]
    fn recall_ignores_monotone_rescaling(seed in 0u64..100_000, n_img in 1usize..12, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (s, c2i) = random_problem(seed, n_img, 5);
        let t = s.mapv(|v| a * v + b);
        prop_assert_eq!(six_recalls_or_capped(&s, &c2i), six_recalls_or_capped(&t, &c2i));
    }

    #[test]
    fn similarity_is_cosine(seed in 0u64..100_000, n in 1usize..8, m in 1usize..8, d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_unit_rows(&mut rng, n, d);
        let b = random_unit_rows(&mut rng, m, d);
        let s = similarity_matrix(&a, &b).unwrap();
        let want = cosine_table(&a, &b);
        for i in 0..n {
            for j in 0..m {
                prop_assert!((s[[i, j]] - want[i][j]).abs() < 1e-12);
            }
        }
    }
}

fn six_recalls_or_capped(s: &Mat, c2i: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for dir in [Direction::ImageQuery, Direction::TextQuery] {
        for k in [1, 5, 10] {
            out.push(recall_at_k(s, c2i, k.min(candidates(s, dir)), dir).unwrap());
        }
    }
    out
}

#[test]
fn perfect_scores_give_full_recall() {
    let c2i: Vec<usize> = (0..12).flat_map(|i| [i; 5]).collect();
    let s = Mat::from_shape_fn((12, 60), |(i, c)| if c2i[c] == i { 1.0 } else { 0.0 });
    let r = six_recalls(&s, &c2i).unwrap();
    assert_eq!(r, [100.0; 6]);
    let rec = MetricsRecord::from_recalls(r, 5, 10).unwrap();
    assert_eq!(rec.mr, 100.0);
}

#[test]
fn reversed_scores_give_zero_recall_at_one() {
    let c2i: Vec<usize> = (0..12).flat_map(|i| [i; 5]).collect();
    let s = Mat::from_shape_fn((12, 60), |(i, c)| if c2i[c] == i { -1.0 } else { 1.0 });
    assert_eq!(recall_at_k(&s, &c2i, 1, Direction::ImageQuery).unwrap(), 0.0);
    assert_eq!(recall_at_k(&s, &c2i, 1, Direction::TextQuery).unwrap(), 0.0);
}

#[test]
fn bad_arguments_are_rejected() {
    let s = Mat::zeros((2, 3));
    assert!(recall_at_k(&s, &[0, 1, 1], 0, Direction::ImageQuery).is_err());
    assert!(recall_at_k(&s, &[0, 1, 1], 3, Direction::TextQuery).is_err());
    assert!(recall_at_k(&s, &[0, 1], 1, Direction::ImageQuery).is_err());
    assert!(recall_at_k(&s, &[0, 1, 2], 1, Direction::ImageQuery).is_err());
    assert!(mean_recall(&[]).is_err());
    assert!(kfold_aggregate(&[]).is_err());
}

#[test]
fn kfold_mean_of_identical_records_is_identity() {
    let rec = MetricsRecord::from_recalls([10.0, 20.0, 30.0, 40.0, 50.0, 60.0], 7, 100).unwrap();
    assert_eq!(kfold_aggregate(&[rec, rec, rec]).unwrap(), rec);
    assert_eq!(rec.mr, 35.0);
    let row = rec.to_csv_row();
    assert_eq!(row.split(',').count(), MetricsRecord::FIELDS.len());
    assert_eq!(MetricsRecord::csv_header(), MetricsRecord::FIELDS.join(","));
}
