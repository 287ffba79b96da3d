//! HMMC objective: a bi-directional cross-modal triplet loss plus two
//! intra-modal triplet losses whose positives come from a dropout-augmented
//! forward pass.
//!
//! All three terms share one shape. Given a similarity matrix `S` whose
//! diagonal holds the positive pairs, pair `i` contributes
//! `[m − S[i,i] + S[i,j]]₊` over row negatives and `[m − S[i,i] + S[j,i]]₊`
//! over column negatives. The cross-modal term uses `S = V·Tᵀ`, the
//! intra-modal terms use `S = V·V⁺ᵀ` and `S = T·T⁺ᵀ`.

use ndarray::{Array1, Zip};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, NodeId};
use crate::error::{PetlError, Result};

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Only the most similar admissible negative per direction.
    #[default]
    Hardest,
    /// Every admissible negative.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Cross-modal margin λ.
    #[serde(rename = "lambda")]
    pub margin_cross: f64,
    /// Image intra-modal margin αᵥ.
    #[serde(rename = "alpha_v")]
    pub margin_image: f64,
    /// Text intra-modal margin αₜ.
    #[serde(rename = "alpha_t")]
    pub margin_text: f64,
    pub dropout_p: f64,
    pub negative_mode: NegativeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_cross: 0.2,
            margin_image: 0.2,
            margin_text: 0.2,
            dropout_p: 0.2,
            negative_mode: NegativeMode::Hardest,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("lambda", self.margin_cross),
            ("alpha_v", self.margin_image),
            ("alpha_t", self.margin_text),
        ] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(PetlError::config(format!("margin {name}={m} must be >= 0")));
            }
        }
        check_dropout(self.dropout_p)
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(PetlError::config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Clean and augmented embeddings of `B` image-caption pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalBatch {
    pub v: Mat,
    pub t: Mat,
    pub v_aug: Mat,
    pub t_aug: Mat,
    /// Source image of each pair; pairs sharing an image are not negatives.
    pub image_id: Vec<usize>,
}

impl RetrievalBatch {
    pub fn new(v: Mat, t: Mat, v_aug: Mat, t_aug: Mat, image_id: Vec<usize>) -> Result<Self> {
        let shape = v.dim();
        if t.dim() != shape || v_aug.dim() != shape || t_aug.dim() != shape {
            return Err(PetlError::input("batch matrices must share one shape"));
        }
        if image_id.len() != shape.0 {
            return Err(PetlError::input(format!(
                "{} image ids for a batch of {}",
                image_id.len(),
                shape.0
            )));
        }
        for m in [&v, &t, &v_aug, &t_aug] {
            check_unit_rows(m)?;
        }
        Ok(RetrievalBatch {
            v,
            t,
            v_aug,
            t_aug,
            image_id,
        })
    }

    pub fn len(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.nrows() == 0
    }
}

fn check_unit_rows(m: &Mat) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(PetlError::input(format!("row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise
/// `1/(1−p)`. Entries are drawn in row-major order.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

pub fn dropout_augment(x: &Mat, p: f64, rng: &mut dyn RngCore) -> Result<Mat> {
    check_dropout(p)?;
    if p == 0.0 {
        return Ok(x.clone());
    }
    Ok(x * &dropout_mask(x.dim(), p, rng))
}

/// Loss over a square similarity matrix with positives on the diagonal, and
/// its gradient with respect to every entry.
///
/// `labels[i] == labels[j]` excludes `j` as a negative of `i`. Hardest mode
/// breaks ties toward the lower index.
pub fn hinge_triplet(s: &Mat, margin: f64, mode: NegativeMode, labels: Option<&[usize]>) -> Result<(f64, Mat)> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(PetlError::input(format!(
            "similarity matrix is {}x{}, not square",
            n,
            s.ncols()
        )));
    }
    if n < 2 {
        return Err(PetlError::input("triplet losses need a batch of at least 2"));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(PetlError::input(format!("{} labels for a batch of {n}", l.len())));
        }
    }
    let admissible = Mat::from_shape_fn((n, n), |(i, j)| {
        let same = match labels {
            Some(l) => l[i] == l[j],
            None => i == j,
        };
        if same {
            0.0
        } else {
            1.0
        }
    });
    let diag: Array1<f64> = s.diag().to_owned();
    // row_hinge[i,j] = m − S[i,i] + S[i,j];  col_hinge[j,i] = m − S[i,i] + S[j,i]
    let row_hinge = s - &diag.view().insert_axis(ndarray::Axis(1)) + margin;
    let col_hinge = s - &diag.view().insert_axis(ndarray::Axis(0)) + margin;

    let (row_active, col_active) = match mode {
        NegativeMode::Sum => {
            let active = |h: &Mat| {
                let mut a = Mat::zeros(h.dim());
                Zip::from(&mut a).and(h).and(&admissible).for_each(|a, &h, &m| {
                    if m > 0.0 && h > 0.0 {
                        *a = 1.0;
                    }
                });
                a
            };
            (active(&row_hinge), active(&col_hinge))
        }
        NegativeMode::Hardest => {
            let masked = Mat::from_shape_fn((n, n), |(i, j)| {
                if admissible[[i, j]] > 0.0 {
                    s[[i, j]]
                } else {
                    f64::NEG_INFINITY
                }
            });
            let mut row_a = Mat::zeros((n, n));
            let mut col_a = Mat::zeros((n, n));
            for i in 0..n {
                if let Some(j) = argmax_first(masked.row(i).iter().copied()) {
                    if row_hinge[[i, j]] > 0.0 {
                        row_a[[i, j]] = 1.0;
                    }
                }
                if let Some(j) = argmax_first(masked.column(i).iter().copied()) {
                    if col_hinge[[j, i]] > 0.0 {
                        col_a[[j, i]] = 1.0;
                    }
                }
            }
            (row_a, col_a)
        }
    };
    let loss = (&row_hinge * &row_active).sum() + (&col_hinge * &col_active).sum();
    let mut grad = &row_active + &col_active;
    let row_counts = row_active.sum_axis(ndarray::Axis(1));
    let col_counts = col_active.sum_axis(ndarray::Axis(0));
    for i in 0..n {
        grad[[i, i]] -= row_counts[i] + col_counts[i];
    }
    Ok((loss, grad))
}

fn argmax_first(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in values.enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

fn similarity(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.dim() != b.dim() {
        return Err(PetlError::input(format!(
            "embedding shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    check_unit_rows(a)?;
    check_unit_rows(b)?;
    Ok(a.dot(&b.t()))
}

/// Intra-modal triplet loss between clean anchors and their augmented views.
pub fn intra_modal_loss(
    anchors: &Mat,
    positives: &Mat,
    margin: f64,
    mode: NegativeMode,
    image_id: Option<&[usize]>,
) -> Result<f64> {
    let s = similarity(anchors, positives)?;
    Ok(hinge_triplet(&s, margin, mode, image_id)?.0)
}

/// Bi-directional cross-modal triplet loss; row `i` of `v` and `t` is a
/// matching pair.
pub fn cross_modal_loss(v: &Mat, t: &Mat, margin: f64, mode: NegativeMode, image_id: Option<&[usize]>) -> Result<f64> {
    let s = similarity(v, t)?;
    Ok(hinge_triplet(&s, margin, mode, image_id)?.0)
}

/// The three terms of the HMMC loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmmcTerms {
    pub cross: f64,
    pub intra_image: f64,
    pub intra_text: f64,
}

impl HmmcTerms {
    pub fn total(&self) -> f64 {
        self.cross + self.intra_image + self.intra_text
    }
}

pub fn hmmc_terms(batch: &RetrievalBatch, cfg: &LossConfig) -> Result<HmmcTerms> {
    cfg.validate()?;
    let ids = Some(batch.image_id.as_slice());
    let mode = cfg.negative_mode;
    Ok(HmmcTerms {
        cross: cross_modal_loss(&batch.v, &batch.t, cfg.margin_cross, mode, ids)?,
        intra_image: intra_modal_loss(&batch.v, &batch.v_aug, cfg.margin_image, mode, ids)?,
        intra_text: intra_modal_loss(&batch.t, &batch.t_aug, cfg.margin_text, mode, ids)?,
    })
}

pub fn hmmc_loss(batch: &RetrievalBatch, cfg: &LossConfig) -> Result<f64> {
    Ok(hmmc_terms(batch, cfg)?.total())
}

/// HMMC loss on graph nodes holding `B × D` unit-norm embeddings.
pub fn graph_hmmc(
    g: &mut Graph,
    v: NodeId,
    t: NodeId,
    v_aug: NodeId,
    t_aug: NodeId,
    image_id: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    let term = |g: &mut Graph, a: NodeId, b: NodeId, margin: f64| -> Result<NodeId> {
        let s = g.matmul_nt(a, b);
        let (loss, grad) = hinge_triplet(g.value(s), margin, cfg.negative_mode, Some(image_id))?;
        g.record_kinks(grad.iter().map(|x| x.to_bits()));
        Ok(g.scalar_fn(s, loss, grad))
    };
    let cross = term(g, v, t, cfg.margin_cross)?;
    let intra_v = term(g, v, v_aug, cfg.margin_image)?;
    let intra_t = term(g, t, t_aug, cfg.margin_text)?;
    let sum = g.add(cross, intra_v);
    Ok(g.add(sum, intra_t))
}
