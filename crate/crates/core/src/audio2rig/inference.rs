//! Chunked inference over arbitrarily long clips.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Audio2RigModel, ModelError};
use crate::featio::{resample_features, FeatureSequence};
use crate::rig::{EmotionLabel, EmotionTimeline, RigSequence, RIG_CHANNELS, RIG_FPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub chunk_frames: usize,
    pub overlap_frames: usize,
    /// Root seed for everything stochastic downstream of the model.
    pub deterministic_seed: u64,
}

impl Default for InferenceConfig {
    /// Ten-second chunks with a one-second crossfade.
    fn default() -> Self {
        Self { chunk_frames: 600, overlap_frames: 60, deterministic_seed: 0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.chunk_frames <= 2 * self.overlap_frames {
            return Err(ModelError::Inference("chunk_frames must exceed twice the overlap"));
        }
        Ok(())
    }
}

/// Chunk start offsets: stride `chunk - overlap`, stopping at the first chunk
/// that reaches the end.
fn chunk_starts(frames: usize, chunk: usize, overlap: usize) -> Vec<usize> {
    let stride = chunk - overlap;
    let mut starts = vec![0];
    while starts.last().unwrap() + chunk < frames {
        starts.push(starts.last().unwrap() + stride);
    }
    starts
}

/// Runs the model over overlapping chunks and crossfades the overlaps
/// linearly. Each chunk sees positions starting from zero.
pub fn predict_chunked(
    model: &Audio2RigModel,
    features: &ArrayView2<f64>,
    labels: &[EmotionLabel],
    cfg: &InferenceConfig,
) -> Result<Array2<f64>, ModelError> {
    cfg.validate()?;
    let frames = features.nrows();
    if labels.len() != frames {
        return Err(ModelError::TimelineLength { expected: frames, found: labels.len() });
    }
    if frames <= cfg.chunk_frames {
        return model.predict(features, labels);
    }
    let overlap = cfg.overlap_frames;
    let starts = chunk_starts(frames, cfg.chunk_frames, overlap);
    let mut out = Array2::zeros((frames, RIG_CHANNELS));
    for (i, &start) in starts.iter().enumerate() {
        let end = (start + cfg.chunk_frames).min(frames);
        let pred = model.predict(&features.slice(s![start..end, ..]), &labels[start..end])?;
        let len = end - start;
        for (k, row) in pred.rows().into_iter().enumerate() {
            let mut w = 1.0;
            if i > 0 && k < overlap {
                w = (k + 1) as f64 / (overlap + 1) as f64;
            }
            if i + 1 < starts.len() && k >= len - overlap {
                w = 1.0 - (k + overlap + 1 - len) as f64 / (overlap + 1) as f64;
            }
            out.row_mut(start + k).scaled_add(w, &row);
        }
    }
    Ok(out)
}

/// Features (any rate) plus a 60 fps emotion timeline to a rig sequence.
/// Features not at 60 Hz are resampled first; the timeline must match the
/// resampled length.
pub fn infer(
    features: &FeatureSequence,
    timeline: &EmotionTimeline,
    model: &Audio2RigModel,
    cfg: &InferenceConfig,
) -> Result<RigSequence, ModelError> {
    if features.width() != model.config.feature_dim {
        return Err(crate::encoders::EncoderError::WidthMismatch {
            expected: model.config.feature_dim,
            found: features.width(),
        }
        .into());
    }
    let aligned;
    let features = if features.rate_hz() == RIG_FPS {
        features
    } else {
        aligned = resample_features(features, RIG_FPS)?;
        &aligned
    };
    if timeline.len() != features.frames() {
        return Err(ModelError::TimelineLength { expected: features.frames(), found: timeline.len() });
    }
    let values = predict_chunked(model, &features.data().view(), timeline.labels(), cfg)?;
    RigSequence::new(values).map_err(|_| ModelError::NonFinite { layer: model.layers.len() })
}
