//! Retrieval scoring: similarity matrices, R@K in both directions, mR and
//! fold averaging.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::encoder::{encode, DualEncoderModel, Embedding, EncoderInput};
use crate::error::{PetlError, Result};
use crate::petl::count_parameters;

/// Rows are images, columns are captions.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Mat,
    /// Source image (row) of every caption (column).
    pub caption_to_image: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// An image queries the captions ("text retrieval").
    ImageQuery,
    /// A caption queries the images ("image retrieval").
    TextQuery,
}

/// Recall percentages for both directions plus parameter counts.
///
/// Field names are the CSV/JSON column names.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub tr_r1: f64,
    pub tr_r5: f64,
    pub tr_r10: f64,
    pub ir_r1: f64,
    pub ir_r5: f64,
    pub ir_r10: f64,
    pub mr: f64,
    pub params_trainable: u64,
    pub params_total: u64,
}

impl MetricsRecord {
    pub const FIELDS: [&'static str; 9] = [
        "tr_r1",
        "tr_r5",
        "tr_r10",
        "ir_r1",
        "ir_r5",
        "ir_r10",
        "mr",
        "params_trainable",
        "params_total",
    ];

    pub fn from_recalls(recalls: [f64; 6], params_trainable: u64, params_total: u64) -> Result<Self> {
        let mr = mean_recall(&recalls)?;
        let [tr_r1, tr_r5, tr_r10, ir_r1, ir_r5, ir_r10] = recalls;
        Ok(MetricsRecord {
            tr_r1,
            tr_r5,
            tr_r10,
            ir_r1,
            ir_r5,
            ir_r10,
            mr,
            params_trainable,
            params_total,
        })
    }

    pub fn recalls(&self) -> [f64; 6] {
        [self.tr_r1, self.tr_r5, self.tr_r10, self.ir_r1, self.ir_r5, self.ir_r10]
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let r = self.recalls();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            r[0], r[1], r[2], r[3], r[4], r[5], self.mr, self.params_trainable, self.params_total
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("metrics serialize")
    }
}

pub fn similarity_matrix(images: &Mat, captions: &Mat) -> Result<Mat> {
    if images.ncols() != captions.ncols() {
        return Err(PetlError::input(format!(
            "embedding widths differ: {} vs {}",
            images.ncols(),
            captions.ncols()
        )));
    }
    Ok(images.dot(&captions.t()))
}

fn check_labels(s: &Mat, caption_to_image: &[usize]) -> Result<()> {
    if caption_to_image.len() != s.ncols() {
        return Err(PetlError::input(format!(
            "{} caption labels for {} captions",
            caption_to_image.len(),
            s.ncols()
        )));
    }
    if let Some(&bad) = caption_to_image.iter().find(|&&i| i >= s.nrows()) {
        return Err(PetlError::input(format!("caption label {bad} names no image")));
    }
    Ok(())
}

/// Percentage of queries whose ground truth ranks in the top `k`. Ranking is
/// by descending score with ties going to the lower index. An image query
/// succeeds if any of its captions makes the cut.
pub fn recall_at_k(s: &Mat, caption_to_image: &[usize], k: usize, direction: Direction) -> Result<f64> {
    check_labels(s, caption_to_image)?;
    let candidates = match direction {
        Direction::ImageQuery => s.ncols(),
        Direction::TextQuery => s.nrows(),
    };
    if k == 0 || k > candidates {
        return Err(PetlError::input(format!("K={k} outside 1..={candidates} candidates")));
    }
    // Number of candidates ranked strictly ahead of `target` in `scores`.
    let rank = |scores: ndarray::ArrayView1<f64>, target: usize| {
        let ts = scores[target];
        scores
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > ts || (v == ts && j < target))
            .count()
    };
    let hits = match direction {
        Direction::ImageQuery => {
            let mut hits = 0usize;
            for (i, row) in s.rows().into_iter().enumerate() {
                // Best-ranked own caption: highest score, lowest index on ties.
                let best = caption_to_image
                    .iter()
                    .enumerate()
                    .filter(|(_, &img)| img == i)
                    .map(|(j, _)| j)
                    .fold(None::<usize>, |acc, j| match acc {
                        Some(b) if row[b] >= row[j] => Some(b),
                        _ => Some(j),
                    });
                if best.is_some_and(|j| rank(row, j) < k) {
                    hits += 1;
                }
            }
            (hits, s.nrows())
        }
        Direction::TextQuery => {
            let hits = s
                .columns()
                .into_iter()
                .zip(caption_to_image)
                .filter(|(col, &img)| rank(col.view(), img) < k)
                .count();
            (hits, s.ncols())
        }
    };
    if hits.1 == 0 {
        return Err(PetlError::input("no queries to score"));
    }
    Ok(100.0 * hits.0 as f64 / hits.1 as f64)
}

/// Arithmetic mean of the six R@K values.
pub fn mean_recall(recalls: &[f64]) -> Result<f64> {
    if recalls.len() != 6 {
        return Err(PetlError::input(format!(
            "mR needs 6 recall values, got {}",
            recalls.len()
        )));
    }
    Ok(recalls.iter().sum::<f64>() / 6.0)
}

/// The six recalls (text retrieval R@1/5/10, image retrieval R@1/5/10).
/// `K` is capped at the candidate count, where recall is 100 by definition.
pub fn six_recalls(s: &Mat, caption_to_image: &[usize]) -> Result<[f64; 6]> {
    let mut out = [0.0; 6];
    for (slot, (direction, k)) in out.iter_mut().zip([
        (Direction::ImageQuery, 1),
        (Direction::ImageQuery, 5),
        (Direction::ImageQuery, 10),
        (Direction::TextQuery, 1),
        (Direction::TextQuery, 5),
        (Direction::TextQuery, 10),
    ]) {
        let candidates = match direction {
            Direction::ImageQuery => s.ncols(),
            Direction::TextQuery => s.nrows(),
        };
        *slot = recall_at_k(s, caption_to_image, k.min(candidates), direction)?;
    }
    Ok(out)
}

/// Preprocessed images and tokenized captions of one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalSplit {
    pub images: Vec<Array3<f64>>,
    pub captions: Vec<Vec<usize>>,
    pub caption_to_image: Vec<usize>,
    pub image_ids: Vec<String>,
}

impl RetrievalSplit {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_captions(&self) -> usize {
        self.captions.len()
    }

    /// Caption indices of image `i`.
    pub fn captions_of(&self, i: usize) -> Vec<usize> {
        self.caption_to_image
            .iter()
            .enumerate()
            .filter(|(_, &img)| img == i)
            .map(|(j, _)| j)
            .collect()
    }
}

fn stack(rows: Vec<Embedding>, dim: usize) -> Mat {
    let mut m = Mat::zeros((rows.len(), dim));
    for (i, e) in rows.iter().enumerate() {
        m.row_mut(i).assign(&e.0);
    }
    m
}

/// Deterministic image and caption embeddings of a split, `(nᵢ × D, nₜ × D)`.
pub fn embed_split(model: &DualEncoderModel, split: &RetrievalSplit) -> Result<(Mat, Mat)> {
    let dim = model.config().embed_dim;
    let images = split
        .images
        .par_iter()
        .map(|img| encode(&EncoderInput::Image(img), model, None))
        .collect::<Result<Vec<_>>>()?;
    let captions = split
        .captions
        .par_iter()
        .map(|ids| encode(&EncoderInput::Text(ids), model, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((stack(images, dim), stack(captions, dim)))
}

pub fn evaluate_retrieval(model: &DualEncoderModel, split: &RetrievalSplit) -> Result<MetricsRecord> {
    if split.images.is_empty() || split.captions.is_empty() {
        return Err(PetlError::input("cannot evaluate an empty split"));
    }
    let (v, t) = embed_split(model, split)?;
    let s = similarity_matrix(&v, &t)?;
    let recalls = six_recalls(&s, &split.caption_to_image)?;
    let report = count_parameters(model);
    MetricsRecord::from_recalls(recalls, report.trainable, report.total)
}

/// Field-wise mean over folds.
pub fn kfold_aggregate(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    if records.is_empty() {
        return Err(PetlError::input("no records to aggregate"));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mean_count =
        |f: fn(&MetricsRecord) -> u64| (records.iter().map(|r| f(r) as f64).sum::<f64>() / n).round() as u64;
    Ok(MetricsRecord {
        tr_r1: mean(|r| r.tr_r1),
        tr_r5: mean(|r| r.tr_r5),
        tr_r10: mean(|r| r.tr_r10),
        ir_r1: mean(|r| r.ir_r1),
        ir_r5: mean(|r| r.ir_r5),
        ir_r10: mean(|r| r.ir_r10),
        mr: mean(|r| r.mr),
        params_trainable: mean_count(|r| r.params_trainable),
        params_total: mean_count(|r| r.params_total),
    })
}
