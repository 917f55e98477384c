//! Content and emotion encoders feeding the transformer.
//!
//! Content: a per-frame affine projection of the audio features plus the
//! sinusoidal position table. Emotion: embedding lookup followed by two
//! affine layers with a leaky ReLU between them. The two are summed frame by
//! frame, which is the only place emotion enters the network.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

use crate::nn::{join, leaky_relu, standard_normal, Linear, Parameters};
use crate::rig::EmotionLabel;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("positional encoding needs an even model width, got {0}")]
    OddWidth(usize),
    #[error("feature width {found} does not match the encoder's {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("emotion id {0} is out of range 0..7")]
    LabelOutOfRange(usize),
    #[error("{frames} frames but {labels} emotion labels")]
    LabelCount { frames: usize, labels: usize },
    #[error("cannot combine {content} wide content with {emotion} wide emotion vector")]
    ShapeMismatch { content: usize, emotion: usize },
}

fn inv_frequency(pair: usize, d_model: usize) -> f64 {
    10000f64.powf((2 * pair) as f64 / d_model as f64).recip()
}

/// `frames × d_model` table with `sin` on even and `cos` on odd columns.
pub fn positional_encoding(frames: usize, d_model: usize) -> Result<Array2<f64>, EncoderError> {
    if !d_model.is_multiple_of(2) {
        return Err(EncoderError::OddWidth(d_model));
    }
    let freqs: Vec<f64> = (0..d_model / 2).map(|i| inv_frequency(i, d_model)).collect();
    Ok(Array2::from_shape_fn((frames, d_model), |(pos, dim)| {
        let angle = pos as f64 * freqs[dim / 2];
        if dim % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Grow-only cache of the position table.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    d_model: usize,
    table: Array2<f64>,
}

impl PositionalTable {
    pub fn new(d_model: usize) -> Result<Self, EncoderError> {
        Ok(Self { d_model, table: positional_encoding(0, d_model)? })
    }

    pub fn rows(&mut self, frames: usize) -> ArrayView2<'_, f64> {
        if self.table.nrows() < frames {
            self.table = positional_encoding(frames.next_power_of_two(), self.d_model)
                .expect("width validated in new");
        }
        self.table.slice(s![..frames, ..])
    }
}

/// Learnable tensors of both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub content_proj: Linear,
    pub emotion_embed: Array2<f64>,
    pub emotion_fc1: Linear,
    pub emotion_fc2: Linear,
    pub leaky_slope: f64,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        feature_dim: usize,
        emotion_dim: usize,
        d_model: usize,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            content_proj: Linear::init(feature_dim, d_model, rng),
            emotion_embed: standard_normal((EmotionLabel::COUNT, emotion_dim), rng),
            emotion_fc1: Linear::init(emotion_dim, d_model, rng),
            emotion_fc2: Linear::init(d_model, d_model, rng),
            leaky_slope,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            content_proj: Linear::zeros(self.content_proj.inputs(), self.content_proj.outputs()),
            emotion_embed: Array2::zeros(self.emotion_embed.raw_dim()),
            emotion_fc1: Linear::zeros(self.emotion_fc1.inputs(), self.emotion_fc1.outputs()),
            emotion_fc2: Linear::zeros(self.emotion_fc2.inputs(), self.emotion_fc2.outputs()),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.content_proj.inputs()
    }

    pub fn d_model(&self) -> usize {
        self.content_proj.outputs()
    }

    /// Zeroes every emotion-pathway tensor, making outputs label-invariant.
    pub fn zero_emotion_pathway(&mut self) {
        self.emotion_embed.fill(0.0);
        for fc in [&mut self.emotion_fc1, &mut self.emotion_fc2] {
            fc.weight.fill(0.0);
            fc.bias.fill(0.0);
        }
    }

    fn check_width(&self, features: &ArrayView2<f64>) -> Result<(), EncoderError> {
        if features.ncols() != self.feature_dim() {
            return Err(EncoderError::WidthMismatch { expected: self.feature_dim(), found: features.ncols() });
        }
        Ok(())
    }

    /// Projected features without the position table.
    pub fn project_content(&self, features: &ArrayView2<f64>) -> Result<Array2<f64>, EncoderError> {
        self.check_width(features)?;
        Ok(self.content_proj.forward(features))
    }

    pub fn encode_content(&self, features: &ArrayView2<f64>) -> Result<Array2<f64>, EncoderError> {
        let projected = self.project_content(features)?;
        Ok(projected + positional_encoding(features.nrows(), self.d_model())?)
    }

    pub fn encode_emotion(&self, label: EmotionLabel) -> Array1<f64> {
        self.emotion_forward(label).2
    }

    pub fn encode_emotion_id(&self, id: usize) -> Result<Array1<f64>, EncoderError> {
        EmotionLabel::from_id(id)
            .map(|l| self.encode_emotion(l))
            .ok_or(EncoderError::LabelOutOfRange(id))
    }

    /// (embedding row, first pre-activation, output)
    fn emotion_forward(&self, label: EmotionLabel) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let code = self.emotion_embed.row(label.id()).to_owned();
        let pre = self.emotion_fc1.forward_vec(&code);
        let act = pre.mapv(|v| leaky_relu(v, self.leaky_slope));
        let out = self.emotion_fc2.forward_vec(&act);
        (code, pre, out)
    }

    /// Content encoding plus each frame's emotion encoding.
    pub fn encode(&self, features: &ArrayView2<f64>, labels: &[EmotionLabel]) -> Result<Array2<f64>, EncoderError> {
        if labels.len() != features.nrows() {
            return Err(EncoderError::LabelCount { frames: features.nrows(), labels: labels.len() });
        }
        let mut hidden = self.encode_content(features)?;
        for label in EmotionLabel::ALL {
            if !labels.contains(&label) {
                continue;
            }
            let e = self.encode_emotion(label);
            for (mut row, _) in hidden.rows_mut().into_iter().zip(labels).filter(|(_, &l)| l == label) {
                row += &e;
            }
        }
        Ok(hidden)
    }

    /// Accumulates encoder gradients given the gradient w.r.t. [`Self::encode`]'s output.
    pub fn backward(&self, features: &ArrayView2<f64>, labels: &[EmotionLabel], d_hidden: &Array2<f64>, grad: &mut EncoderParams) {
        self.content_proj.backward(features, d_hidden, &mut grad.content_proj);
        for label in EmotionLabel::ALL {
            let mut d_out = Array1::zeros(self.d_model());
            let mut used = false;
            for (row, _) in d_hidden.rows().into_iter().zip(labels).filter(|(_, &l)| l == label) {
                d_out += &row;
                used = true;
            }
            if !used {
                continue;
            }
            let (code, pre, _) = self.emotion_forward(label);
            let act = pre.mapv(|v| leaky_relu(v, self.leaky_slope));
            let mut d_act = self.emotion_fc2.backward_vec(&act, &d_out, &mut grad.emotion_fc2);
            d_act.zip_mut_with(&pre, |d, &p| {
                if p < 0.0 {
                    *d *= self.leaky_slope
                }
            });
            let d_code = self.emotion_fc1.backward_vec(&code, &d_act, &mut grad.emotion_fc1);
            let mut row = grad.emotion_embed.row_mut(label.id());
            row += &d_code;
        }
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.content_proj.visit(&join(prefix, "content_proj"), f);
        self.emotion_embed.visit(&join(prefix, "emotion_embed"), f);
        self.emotion_fc1.visit(&join(prefix, "emotion_fc1"), f);
        self.emotion_fc2.visit(&join(prefix, "emotion_fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.content_proj.visit_mut(&join(prefix, "content_proj"), f);
        self.emotion_embed.visit_mut(&join(prefix, "emotion_embed"), f);
        self.emotion_fc1.visit_mut(&join(prefix, "emotion_fc1"), f);
        self.emotion_fc2.visit_mut(&join(prefix, "emotion_fc2"), f);
    }
}

/// Adds `emotion` to every content row.
pub fn combine(content: &Array2<f64>, emotion: &Array1<f64>) -> Result<Array2<f64>, EncoderError> {
    if content.ncols() != emotion.len() {
        return Err(EncoderError::ShapeMismatch { content: content.ncols(), emotion: emotion.len() });
    }
    Ok(content + emotion)
}
