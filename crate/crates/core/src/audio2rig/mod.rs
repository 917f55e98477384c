//! Transformer-encoder regression from encoded audio to rig controllers.
//!
//! The model is the two encoders, a stack of post-norm encoder layers and an
//! affine head producing [`RIG_CHANNELS`] values per frame. All arithmetic is
//! `f64`; the training path records a tape and backpropagates by hand.

mod gradcheck;
mod inference;
mod layer;
mod weights;

pub use gradcheck::{grad_check, GradCheckReport, GroupError, Probe};
pub use inference::{infer, predict_chunked, InferenceConfig};
pub use layer::{EncoderLayer, LayerTape};
pub use weights::{decode_weights, encode_weights, read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderError, EncoderParams};
use crate::featio::FeatureError;
use crate::nn::{flatten, join, unflatten, Linear, Parameters};
use crate::rig::{EmotionLabel, RIG_CHANNELS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: usize },
    #[error("hidden width {found} does not match model width {expected}")]
    HiddenWidth { expected: usize, found: usize },
    #[error("empty input sequence")]
    Empty,
    #[error("emotion timeline has {found} labels for {expected} output frames")]
    TimelineLength { expected: usize, found: usize },
    #[error("model expects feature family {expected:?}, got {found:?}")]
    FamilyMismatch { expected: String, found: String },
    #[error("invalid inference configuration: {0}")]
    Inference(&'static str),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("weights manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("weights i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters, stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Producer of the expected features (e.g. `wav2vec2-base`).
    pub feature_family: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub emotion_dim: usize,
    pub output_dim: usize,
}

impl Default for ModelConfig {
    /// Reference architecture: 768-wide encoder features, 10 layers at width 512.
    fn default() -> Self {
        Self {
            feature_dim: 768,
            feature_family: "wav2vec2-base".into(),
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_layers: 10,
            dropout: 0.1,
            leaky_slope: 0.2,
            emotion_dim: 512,
            output_dim: RIG_CHANNELS,
        }
    }
}

impl ModelConfig {
    /// A small configuration for desk-scale experiments and tests.
    pub fn desk(feature_dim: usize, d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            feature_dim,
            feature_family: "synthetic".into(),
            d_model,
            n_heads,
            d_ff: 2 * d_model,
            n_layers,
            dropout: 0.0,
            leaky_slope: 0.2,
            emotion_dim: d_model,
            output_dim: RIG_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.feature_dim == 0 || self.d_model == 0 || self.d_ff == 0 || self.emotion_dim == 0 {
            return fail("widths must be positive");
        }
        if !self.d_model.is_multiple_of(2) {
            return fail("d_model must be even");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !self.leaky_slope.is_finite() {
            return fail("leaky_slope must be finite");
        }
        if self.output_dim != RIG_CHANNELS {
            return fail("output width must equal the rig channel count");
        }
        Ok(())
    }
}

/// Recorded forward pass for one clip.
#[derive(Clone, Debug)]
pub struct Tape {
    layers: Vec<LayerTape>,
    head_input: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Audio2RigModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl Audio2RigModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(
            config.feature_dim,
            config.emotion_dim,
            config.d_model,
            config.leaky_slope,
            &mut rng,
        );
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(config.d_model, config.d_ff, &mut rng))
            .collect();
        let head = Linear::init(config.d_model, config.output_dim, &mut rng);
        Ok(Self { config, encoder, layers, head })
    }

    /// Same architecture with every tensor zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
            head: Linear::zeros(self.head.inputs(), self.head.outputs()),
        }
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(self)
    }

    pub fn add_assign(&mut self, other: &Self) {
        let add = flatten(other);
        let mut mine = flatten(self);
        mine.iter_mut().zip(&add).for_each(|(a, b)| *a += b);
        unflatten(self, &mine);
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, data| data.iter_mut().for_each(|v| *v *= factor));
    }

    fn check_hidden(&self, hidden: &Array2<f64>) -> Result<(), ModelError> {
        if hidden.nrows() == 0 {
            return Err(ModelError::Empty);
        }
        if hidden.ncols() != self.config.d_model {
            return Err(ModelError::HiddenWidth { expected: self.config.d_model, found: hidden.ncols() });
        }
        Ok(())
    }

    fn run<R: Rng + ?Sized>(
        &self,
        hidden: &Array2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, Tape), ModelError> {
        self.check_hidden(hidden)?;
        let mut x = hidden.clone();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let dropout = rng.as_deref_mut().map(|r| (self.config.dropout, r));
            let (y, tape) = layer.forward(&x, self.config.n_heads, dropout);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: i });
            }
            tapes.push(tape);
            x = y;
        }
        let out = self.head.forward(&x.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: self.layers.len() });
        }
        Ok((out, Tape { layers: tapes, head_input: x }))
    }

    /// Transformer stack and head on an already-encoded `T × d_model` input.
    /// Dropout is off; repeated calls agree bitwise.
    pub fn forward(&self, hidden: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.run::<ChaCha8Rng>(hidden, None)?.0)
    }

    /// Per-layer, per-head attention probabilities for `hidden`.
    pub fn attention_maps(&self, hidden: &Array2<f64>) -> Result<Vec<Vec<Array2<f64>>>, ModelError> {
        let (_, tape) = self.run::<ChaCha8Rng>(hidden, None)?;
        Ok(tape.layers.into_iter().map(|t| t.probs).collect())
    }

    /// Encodes features and per-frame labels, then runs [`Self::forward`].
    pub fn predict(&self, features: &ArrayView2<f64>, labels: &[EmotionLabel]) -> Result<Array2<f64>, ModelError> {
        let hidden = self.encoder.encode(features, labels)?;
        self.forward(&hidden)
    }

    /// Training forward pass. `rng` enables dropout at the configured rate.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        features: &ArrayView2<f64>,
        labels: &[EmotionLabel],
        rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, Tape), ModelError> {
        let hidden = self.encoder.encode(features, labels)?;
        self.run(&hidden, rng)
    }

    /// Gradients of a loss w.r.t. every parameter, given `dL/dpred`.
    pub fn backward(&self, features: &ArrayView2<f64>, labels: &[EmotionLabel], tape: &Tape, d_pred: &Array2<f64>) -> Self {
        let mut grad = self.zeros_like();
        let mut dx = self.head.backward(&tape.head_input.view(), d_pred, &mut grad.head);
        for ((layer, layer_tape), layer_grad) in self.layers.iter().zip(&tape.layers).zip(&mut grad.layers).rev() {
            dx = layer.backward(layer_tape, &dx, layer_grad);
        }
        self.encoder.backward(features, labels, &dx, &mut grad.encoder);
        grad
    }
}

impl Parameters for Audio2RigModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
