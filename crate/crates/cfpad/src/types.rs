//! Shared data model: batches, feature maps, embeddings, logits, scores.
//!
//! Every type validates its invariants at construction and is immutable
//! afterwards, so values can be shared freely across workers. Scores are
//! oriented so that higher means more bona fide.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Label value for a genuine (live) presentation.
pub const BONA_FIDE: u8 = 1;
/// Label value for a presentation attack.
pub const ATTACK: u8 = 0;

/// A mini-batch of images with binary labels and optional domain/video tags.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    images: Tensor4,
    labels: Vec<u8>,
    domain_tags: Option<Vec<u32>>,
    video_ids: Option<Vec<String>>,
}

impl LabeledBatch {
    pub fn new(
        images: Tensor4,
        labels: Vec<u8>,
        domain_tags: Option<Vec<u32>>,
        video_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let b = images.batch();
        if b == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one sample".into()));
        }
        if images.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "batch images must have 3 channels, got {}",
                images.channels()
            )));
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("batch images".into()));
        }
        if labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "labels length {} does not match batch size {b}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!(
                "labels must be 0 (attack) or 1 (bona fide), got {bad}"
            )));
        }
        if let Some(tags) = &domain_tags {
            if tags.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "domain_tags length {} does not match batch size {b}",
                    tags.len()
                )));
            }
        }
        if let Some(ids) = &video_ids {
            if ids.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "video_ids length {} does not match batch size {b}",
                    ids.len()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            domain_tags,
            video_ids,
        })
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn domain_tags(&self) -> Option<&[u32]> {
        self.domain_tags.as_deref()
    }

    pub fn video_ids(&self) -> Option<&[String]> {
        self.video_ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A 4-D activation block flowing through the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor4,
}

impl FeatureMap {
    pub fn new(values: Tensor4) -> Result<Self> {
        let (b, c, h, w) = values.shape();
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dimensions must all be >= 1, got [{b}, {c}, {h}, {w}]"
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor4 {
        &self.values
    }

    pub fn into_values(self) -> Tensor4 {
        self.values
    }
}

/// Per-sample pooled feature vector the interventions act on.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    batch: usize,
    dim: usize,
}

impl Embedding {
    pub fn new(values: Vec<f64>, batch: usize, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be >= 2, got {dim}"
            )));
        }
        if values.len() != batch * dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding data length {} does not match [{batch}, {dim}]",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { values, batch, dim })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One sample's vector.
    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.dim..(b + 1) * self.dim]
    }
}

/// Two-class classifier outputs, `[B, 2]` with column 1 = bona fide.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    values: Vec<f64>,
    batch: usize,
}

impl Logits {
    pub fn new(values: Vec<f64>, batch: usize) -> Result<Self> {
        if values.len() != batch * 2 {
            return Err(Error::ShapeMismatch(format!(
                "logits length {} does not match [{batch}, 2]",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { values, batch })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn row(&self, b: usize) -> [f64; 2] {
        [self.values[2 * b], self.values[2 * b + 1]]
    }
}

/// One frame-level score row: fused per video and fed to the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub video_id: String,
    pub frame_id: u64,
    pub score: f64,
    pub label: u8,
}

impl ScoreRecord {
    pub fn new(video_id: String, frame_id: u64, score: f64, label: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "score must be in [0, 1], got {score}"
            )));
        }
        if label > 1 {
            return Err(Error::InvalidArgument(format!(
                "label must be 0 or 1, got {label}"
            )));
        }
        Ok(Self {
            video_id,
            frame_id,
            score,
            label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize) -> Tensor4 {
        Tensor4::zeros(b, 3, 4, 4)
    }

    #[test]
    fn batch_rejects_bad_labels() {
        let err = LabeledBatch::new(images(2), vec![0, 2], None, None).unwrap_err();
        assert!(err.to_string().contains("labels"));
    }

    #[test]
    fn batch_rejects_tag_length_mismatch() {
        assert!(LabeledBatch::new(images(2), vec![0, 1], Some(vec![0]), None).is_err());
        assert!(LabeledBatch::new(images(2), vec![0, 1], Some(vec![0, 1]), None).is_ok());
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let mut t = Tensor4::zeros(1, 1, 2, 2);
        t.set(0, 0, 0, 0, f64::NAN);
        assert!(FeatureMap::new(t).is_err());
    }

    #[test]
    fn embedding_requires_dim_two() {
        assert!(Embedding::new(vec![1.0], 1, 1).is_err());
        assert!(Embedding::new(vec![1.0, 2.0], 1, 2).is_ok());
    }

    #[test]
    fn score_range_enforced_without_clamping() {
        assert!(ScoreRecord::new("v".into(), 0, 1.2, 1).is_err());
        assert!(ScoreRecord::new("v".into(), 0, 0.3, 1).is_ok());
    }
}
