//! Domain types shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image stored row-major as `height × width × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidSample("image dimensions must be positive".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(alloc::format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// One image with its reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub captions: Vec<String>,
    pub task_id: usize,
}

impl Sample {
    pub fn new(image_id: impl Into<String>, image: Image, captions: Vec<String>, task_id: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::InvalidSample("sample has no captions".into()));
        }
        if captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::InvalidSample("caption is empty after trimming".into()));
        }
        Ok(Self { image_id: image_id.into(), image, captions, task_id })
    }
}

/// Train/validation/test samples of one task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Ordered sequence of tasks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskStream {
    pub names: Vec<String>,
    pub tasks: Vec<TaskSplit>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Token ids of one caption.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub has_bos: bool,
    pub has_eos: bool,
}

impl TokenSeq {
    pub fn plain(ids: Vec<u32>) -> Self {
        Self { ids, has_bos: false, has_eos: false }
    }
}

/// Dense embedding; `normalized` records whether `values` has unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVec {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVec {
    pub fn raw(values: Vec<f64>) -> Self {
        Self { values, normalized: false }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

/// Scales `v` to unit L2 norm. Zero vectors are rejected rather than clamped.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVec> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok(EmbeddingVec { values: v.iter().map(|x| x / n).collect(), normalized: true })
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &EmbeddingVec, v: &EmbeddingVec) -> Result<f64> {
    cosine(&u.values, &v.values)
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Per-step loss components. Absent components count as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub nouns: Option<f64>,
    pub clip: Option<f64>,
    pub lgcl: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is the unweighted component sum.
    pub fn new(ce: f64, nouns: Option<f64>, clip: Option<f64>, lgcl: Option<f64>) -> Self {
        let total = ce + nouns.unwrap_or(0.0) + clip.unwrap_or(0.0) + lgcl.unwrap_or(0.0);
        Self { ce, nouns, clip, lgcl, total }
    }
}
