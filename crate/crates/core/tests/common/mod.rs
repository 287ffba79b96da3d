//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use petl_core::encoder::EncoderConfig;
use petl_core::objectives::NegativeMode;
use petl_core::retrieval::Direction;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Array2<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Mat {
    let mut m = Mat::zeros((n, d));
    for mut row in m.rows_mut() {
        loop {
            for x in row.iter_mut() {
                *x = StandardNormal.sample(rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row /= norm;
                break;
            }
        }
    }
    m
}

/// Pairwise cosine table built with explicit loops.
pub fn cosine_table(a: &Mat, b: &Mat) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| {
            let ai = a.row(i).to_vec();
            (0..b.nrows())
                .map(|j| {
                    let bj = b.row(j).to_vec();
                    dot(&ai, &bj) / (dot(&ai, &ai).sqrt() * dot(&bj, &bj).sqrt())
                })
                .collect()
        })
        .collect()
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// One triplet term over a score table with positives on the diagonal.
/// Row `i` pairs anchor `i` with candidates `j`; the column pass swaps roles.
pub fn triplet_oracle(s: &[Vec<f64>], margin: f64, mode: NegativeMode, ids: &[usize]) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| ids[j] != ids[i]).collect();
        let pos = s[i][i];
        match mode {
            NegativeMode::Sum => {
                for &j in &negatives {
                    total += hinge(margin - pos + s[i][j]);
                    total += hinge(margin - pos + s[j][i]);
                }
            }
            NegativeMode::Hardest => {
                let mut best_row: Option<usize> = None;
                let mut best_col: Option<usize> = None;
                for &j in &negatives {
                    if best_row.is_none_or(|b| s[i][j] > s[i][b]) {
                        best_row = Some(j);
                    }
                    if best_col.is_none_or(|b| s[j][i] > s[b][i]) {
                        best_col = Some(j);
                    }
                }
                if let Some(j) = best_row {
                    total += hinge(margin - pos + s[i][j]);
                }
                if let Some(j) = best_col {
                    total += hinge(margin - pos + s[j][i]);
                }
            }
        }
    }
    total
}

pub fn cross_oracle(v: &Mat, t: &Mat, margin: f64, mode: NegativeMode, ids: &[usize]) -> f64 {
    triplet_oracle(&cosine_table(v, t), margin, mode, ids)
}

pub fn intra_oracle(x: &Mat, x_aug: &Mat, margin: f64, mode: NegativeMode, ids: &[usize]) -> f64 {
    triplet_oracle(&cosine_table(x, x_aug), margin, mode, ids)
}

/// Ranks candidates by descending score, lower index first on ties, and
/// checks whether any relevant candidate lands in the top `k`.
fn hit_at_k(scores: &[f64], relevant: &[bool], k: usize) -> bool {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().take(k).any(|&c| relevant[c])
}

pub fn recall_oracle(s: &Mat, caption_to_image: &[usize], k: usize, direction: Direction) -> f64 {
    let (n_img, n_cap) = s.dim();
    let hits: usize = match direction {
        Direction::ImageQuery => (0..n_img)
            .filter(|&i| {
                let scores: Vec<f64> = (0..n_cap).map(|c| s[[i, c]]).collect();
                let relevant: Vec<bool> = caption_to_image.iter().map(|&img| img == i).collect();
                hit_at_k(&scores, &relevant, k)
            })
            .count(),
        Direction::TextQuery => (0..n_cap)
            .filter(|&c| {
                let scores: Vec<f64> = (0..n_img).map(|i| s[[i, c]]).collect();
                let relevant: Vec<bool> = (0..n_img).map(|i| i == caption_to_image[c]).collect();
                hit_at_k(&scores, &relevant, k)
            })
            .count(),
    };
    let queries = match direction {
        Direction::ImageQuery => n_img,
        Direction::TextQuery => n_cap,
    };
    100.0 * hits as f64 / queries as f64
}

fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (k - i) as f64)
}

/// Expected mR of a uniformly random ranking: an image query misses only when
/// all `k` retrieved captions come from other images, a caption query hits
/// with probability `k / n_images`.
pub fn chance_mr(caption_to_image: &[usize], n_images: usize) -> f64 {
    let n_cap = caption_to_image.len();
    let mut sum = 0.0;
    for k in [1usize, 5, 10] {
        let k_img = k.min(n_cap);
        let tr: f64 = (0..n_images)
            .map(|i| {
                let own = caption_to_image.iter().filter(|&&c| c == i).count();
                1.0 - choose(n_cap - own, k_img) / choose(n_cap, k_img)
            })
            .sum::<f64>()
            / n_images as f64;
        let ir = k.min(n_images) as f64 / n_images as f64;
        sum += 100.0 * (tr + ir);
    }
    sum / 6.0
}

/// Closed-form parameter count of one pre-norm block of width `w` with an
/// MLP ratio of 4: two LayerNorms, fused QKV, output projection, MLP.
pub fn block_params(w: u64) -> u64 {
    2 * w + (3 * w * w + 3 * w) + (w * w + w) + 2 * w + (4 * w * w + 4 * w) + (4 * w * w + w)
}

pub fn backbone_oracle(c: &EncoderConfig) -> u64 {
    let (dv, dt, d, l) = (
        c.vision_width as u64,
        c.text_width as u64,
        c.embed_dim as u64,
        c.layers as u64,
    );
    let patches = (c.image_size / c.patch_size) as u64;
    let patch_dim = 3 * (c.patch_size * c.patch_size) as u64;
    let visual = patch_dim * dv + dv + (patches * patches + 1) * dv + 2 * dv + l * block_params(dv) + 2 * dv + dv * d;
    let text = c.vocab_size as u64 * dt + c.context_length as u64 * dt + l * block_params(dt) + 2 * dt + dt * d;
    visual + text
}
