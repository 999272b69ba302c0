//! Training objectives: token cross-entropy, cosine alignment (used for both
//! the prompt and caption targets), the triplet term, and their gated sum.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, Mat};
use crate::error::{Error, Result};
use crate::types::LossBreakdown;

/// Row norms may deviate from one by at most this much.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub nouns: f64,
    pub clip: f64,
    pub lgcl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, nouns: 1.0, clip: 1.0, lgcl: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_lgcl: bool,
    /// Epochs (1-based, counted per task) during which the prompt loss is
    /// active; afterwards the caption loss takes over.
    pub nouns_epochs: u32,
    pub weights: LossWeights,
    pub lgcl_margin: f64,
    /// `false` drops the `max(0, ·)` around the triplet term.
    pub lgcl_hinged: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { use_lgcl: true, nouns_epochs: 2, weights: LossWeights::default(), lgcl_margin: 1.0, lgcl_hinged: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        for (name, v) in [("ce", w.ce), ("nouns", w.nouns), ("clip", w.clip), ("lgcl", w.lgcl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(alloc::format!("weight {name} must be finite and >= 0")));
            }
        }
        if !self.lgcl_margin.is_finite() {
            return Err(Error::Config("lgcl_margin must be finite".into()));
        }
        Ok(())
    }
}

/// Which auxiliary terms apply at a given point of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gate {
    pub nouns: bool,
    pub clip: bool,
    pub lgcl: bool,
}

/// `epoch` is 1-based within the task. `pool_ready` says whether the negative
/// pool has at least one entry.
pub fn gate(cfg: &LossConfig, task: usize, epoch: u32, pool_ready: bool) -> Gate {
    if !cfg.use_lgcl {
        return Gate { nouns: false, clip: false, lgcl: false };
    }
    let early = epoch <= cfg.nouns_epochs;
    Gate { nouns: early, clip: !early, lgcl: task > 0 && pool_ready }
}

/// Returns `(mean loss, softmax probabilities, unmasked count)`.
pub fn softmax_cross_entropy(logits: &Mat, labels: &[Option<usize>]) -> Result<(f64, Mat, usize)> {
    if labels.len() != logits.rows {
        return Err(Error::DimensionMismatch { expected: logits.rows, got: labels.len() });
    }
    let mut probs = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    let mut count = 0;
    for (r, label) in labels.iter().enumerate() {
        let Some(t) = *label else { continue };
        if t >= logits.cols {
            return Err(Error::TokenOutOfRange { id: t as u32, size: logits.cols });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = probs.row_mut(r);
        let mut z = 0.0;
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = libm::exp(v - max);
            z += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= z;
        }
        total += libm::log(z) + max - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllMasked);
    }
    Ok((total / count as f64, probs, count))
}

/// Mean negative log-likelihood over unmasked positions.
pub fn cross_entropy(logits: &Mat, labels: &[Option<usize>]) -> Result<f64> {
    softmax_cross_entropy(logits, labels).map(|(l, _, _)| l)
}

fn check_unit_rows(m: &Mat) -> Result<()> {
    for r in 0..m.rows {
        let n = libm::sqrt(m.row(r).iter().map(|v| v * v).sum::<f64>());
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized { row: r, norm: n });
        }
    }
    Ok(())
}

fn check_same(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(alloc::format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

/// `mean_i (1 − a_i · b_i)` over unit rows.
pub fn cosine_alignment(a: &Mat, b: &Mat) -> Result<f64> {
    check_same(a, b)?;
    check_unit_rows(a)?;
    check_unit_rows(b)?;
    let s: f64 = (0..a.rows).map(|r| 1.0 - dot(a.row(r), b.row(r))).sum();
    Ok(s / a.rows as f64)
}

/// Image embeddings against prompt embeddings.
pub fn nouns_loss(e_img: &Mat, e_prompt: &Mat) -> Result<f64> {
    cosine_alignment(e_img, e_prompt)
}

/// Image embeddings against full-caption embeddings.
pub fn clip_loss(e_img: &Mat, e_caption: &Mat) -> Result<f64> {
    cosine_alignment(e_img, e_caption)
}

/// Returns the mean triplet value and which rows have an active hinge.
pub fn triplet_terms(e_img: &Mat, e_pos: &Mat, e_neg: &Mat, margin: f64, hinged: bool) -> Result<(f64, Vec<bool>)> {
    check_same(e_img, e_pos)?;
    check_same(e_img, e_neg)?;
    check_unit_rows(e_img)?;
    check_unit_rows(e_pos)?;
    check_unit_rows(e_neg)?;
    let mut total = 0.0;
    let mut active = Vec::with_capacity(e_img.rows);
    for r in 0..e_img.rows {
        let x = e_img.row(r);
        let v = margin - dot(x, e_pos.row(r)) + dot(x, e_neg.row(r));
        if hinged && v <= 0.0 {
            active.push(false);
        } else {
            active.push(true);
            total += v;
        }
    }
    Ok((total / e_img.rows as f64, active))
}

pub fn lgcl_loss(e_img: &Mat, e_pos: &Mat, e_neg: &Mat, margin: f64) -> Result<f64> {
    triplet_terms(e_img, e_pos, e_neg, margin, true).map(|(l, _)| l)
}

/// Gradient of the hinged triplet loss with respect to `e_img`.
pub fn lgcl_grad(e_img: &Mat, e_pos: &Mat, e_neg: &Mat, margin: f64) -> Result<Mat> {
    let (_, active) = triplet_terms(e_img, e_pos, e_neg, margin, true)?;
    let mut g = Mat::zeros(e_img.rows, e_img.cols);
    let n = e_img.rows as f64;
    for r in 0..e_img.rows {
        if active[r] {
            for ((o, p), q) in g.row_mut(r).iter_mut().zip(e_pos.row(r)).zip(e_neg.row(r)) {
                *o = (q - p) / n;
            }
        }
    }
    Ok(g)
}

/// Weighted sum of the present components.
pub fn total_loss(parts: &LossBreakdown, cfg: &LossConfig) -> Result<f64> {
    let w = cfg.weights;
    let mut total = 0.0;
    for (name, v, wt) in [
        ("ce", Some(parts.ce), w.ce),
        ("nouns", parts.nouns, w.nouns),
        ("clip", parts.clip, w.clip),
        ("lgcl", parts.lgcl, w.lgcl),
    ] {
        if let Some(v) = v {
            if v < 0.0 {
                return Err(Error::NegativeComponent(name));
            }
            total += wt * v;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;


    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&m(&[&[0.0, 0.0, 0.0, 0.0]]), &[Some(2)]).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12);
        let l = cross_entropy(&m(&[&[50.0, 0.0, 0.0]]), &[Some(0)]).unwrap();
        assert!(l < 1e-12);
        assert!(matches!(cross_entropy(&m(&[&[0.0, 0.0]]), &[None]), Err(Error::AllMasked)));
        assert!(cross_entropy(&m(&[&[0.0, 0.0]]), &[Some(2)]).is_err());
    }

    #[test]
    fn triplet_examples() {
        let x = m(&[&[1.0, 0.0]]);
        let l = lgcl_loss(&x, &m(&[&[1.0, 0.0]]), &m(&[&[-1.0, 0.0]]), 1.0).unwrap();
        assert_eq!(l, 0.0);
        let l = lgcl_loss(&x, &m(&[&[0.0, 1.0]]), &m(&[&[0.0, 1.0]]), 1.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(lgcl_loss(&x, &m(&[&[1.0, 0.0], &[1.0, 0.0]]), &x, 1.0).is_err());
    }

    #[test]
    fn unnormalized_rejected() {
        let a = m(&[&[2.0, 0.0]]);
        assert!(matches!(nouns_loss(&a, &a), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn gating_table() {
        let cfg = LossConfig::default();
        assert_eq!(gate(&cfg, 0, 1, true), Gate { nouns: true, clip: false, lgcl: false });
        assert_eq!(gate(&cfg, 2, 4, true), Gate { nouns: false, clip: true, lgcl: true });
        assert_eq!(gate(&cfg, 1, 2, false), Gate { nouns: true, clip: false, lgcl: false });
        let off = LossConfig { use_lgcl: false, ..cfg };
        assert_eq!(gate(&off, 3, 1, true), Gate { nouns: false, clip: false, lgcl: false });
    }

    #[test]
    fn total_rejects_negative() {
        let parts = LossBreakdown { ce: 1.0, nouns: Some(-0.1), clip: None, lgcl: None, total: 0.9 };
        assert!(total_loss(&parts, &LossConfig::default()).is_err());
        let parts = LossBreakdown { ce: 1.0, nouns: Some(0.5), clip: None, lgcl: Some(0.0), total: 1.5 };
        assert_eq!(total_loss(&parts, &LossConfig::default()).unwrap(), 1.5);
    }
}
