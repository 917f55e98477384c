//! Supervised training: MSE loss, Adam, step-decay learning rate, and a
//! synthetic dataset for desk-scale runs.

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio2rig::{Audio2RigModel, ModelError};
use crate::featio::{read_feature_file, resample_features, write_feature_file, FeatureError, FeatureSequence};
use crate::nn::{flatten, standard_normal, unflatten};
use crate::rig::{EmotionLabel, RIG_CHANNELS, RIG_FPS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: prediction {pred:?} vs target {target:?}")]
    Shape { pred: (usize, usize), target: (usize, usize) },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("clip {item}: {features} feature frames at 60 fps but {target} target frames")]
    FrameMismatch { item: usize, features: usize, target: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn check_shapes(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(), TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::Shape { pred: pred.dim(), target: target.dim() });
    }
    Ok(())
}

/// Mean of squared differences over every entry.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, TrainError> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}

/// `d mse / d pred`.
pub fn mse_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<Array2<f64>, TrainError> {
    check_shapes(pred, target)?;
    Ok((pred - target) * (2.0 / pred.len() as f64))
}

/// Learning rate after `epoch` completed epochs: `lr0 · gamma^floor(epoch / step_size)`.
pub fn steplr(lr0: f64, step_size: usize, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi((epoch / step_size) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    /// Clips per optimiser step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            step_size: 100,
            gamma: 0.995,
            epochs: 3000,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::Config("gamma must be in (0, 1]"));
        }
        if self.step_size == 0 {
            return Err(TrainError::Config("step_size must be at least 1"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config("lr0 must be finite and non-negative"));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1"));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(TrainError::Config("Adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One training clip at 60 fps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub features: Array2<f64>,
    pub labels: Vec<EmotionLabel>,
    pub target: Array2<f64>,
}

impl TrainItem {
    pub fn emotion(&self) -> EmotionLabel {
        self.labels[0]
    }
}

/// Ground-truth map used by the synthetic generator: a few latent
/// activations `a = tanh(x W + b + offset[emotion])` mixed linearly into the
/// controllers, `target = a M`. Each column of `M` has absolute sum
/// [`MIX_BOUND`], so targets stay strictly inside `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub emotion_offsets: Array2<f64>,
    pub mixing: Array2<f64>,
}

pub const MIX_BOUND: f64 = 0.9;
/// Latent activations behind the synthetic targets.
pub const SYNTHETIC_LATENTS: usize = 8;

impl GroundTruth {
    pub fn latents(&self, features: &Array2<f64>, emotion: EmotionLabel) -> Array2<f64> {
        let pre = features.dot(&self.weight) + &self.bias + self.emotion_offsets.row(emotion.id());
        pre.mapv(f64::tanh)
    }

    pub fn target(&self, features: &Array2<f64>, emotion: EmotionLabel) -> Array2<f64> {
        self.latents(features, emotion).dot(&self.mixing)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub truth: GroundTruth,
    pub items: Vec<TrainItem>,
}

/// Smooth multi-sinusoid feature tracks at 60 fps.
fn synthetic_features<R: Rng + ?Sized>(frames: usize, width: usize, rng: &mut R) -> Array2<f64> {
    let mut x = Array2::zeros((frames, width));
    for mut col in x.columns_mut() {
        for _ in 0..3 {
            let freq = rng.random_range(0.5..4.0) / RIG_FPS;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.4..0.8);
            for (t, v) in col.iter_mut().enumerate() {
                *v += amp * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
            }
        }
    }
    x
}

/// Reproducible stand-in corpus: random smooth features, a random label per
/// clip, and targets from a fixed random [`GroundTruth`], inside the default
/// `[-1, 1]` controller bounds.
pub fn gen_synthetic(seed: u64, n_items: usize, frames: RangeInclusive<usize>, feature_dim: usize) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (feature_dim as f64).sqrt();
    let k = SYNTHETIC_LATENTS;
    let mut mixing = standard_normal((k, RIG_CHANNELS), &mut rng);
    for mut col in mixing.columns_mut() {
        let norm = col.iter().map(|v| v.abs()).sum::<f64>();
        col.mapv_inplace(|v| MIX_BOUND * v / norm);
    }
    let truth = GroundTruth {
        weight: standard_normal((feature_dim, k), &mut rng) * scale,
        bias: standard_normal((1, k), &mut rng).index_axis_move(Axis(0), 0) * 0.1,
        emotion_offsets: standard_normal((EmotionLabel::COUNT, k), &mut rng) * 0.5,
        mixing,
    };
    let items = (0..n_items)
        .map(|_| {
            let t = rng.random_range(frames.clone());
            let emotion = EmotionLabel::ALL[rng.random_range(0..EmotionLabel::COUNT)];
            let features = synthetic_features(t, feature_dim, &mut rng);
            let target = truth.target(&features, emotion);
            TrainItem { features, labels: vec![emotion; t], target }
        })
        .collect();
    SyntheticDataset { seed, truth, items }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Mean per-clip MSE with dropout off.
pub fn evaluate(model: &Audio2RigModel, items: &[TrainItem]) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let losses = items
        .par_iter()
        .map(|item| {
            let pred = model.predict(&item.features.view(), &item.labels)?;
            mse_loss(&pred, &item.target)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains in place. Each epoch shuffles the clips, splits them into batches
/// of `cfg.batch` whole clips and takes one Adam step per batch on the mean
/// clip MSE. `on_epoch` sees every recorded loss as it is produced.
pub fn train(
    model: &mut Audio2RigModel,
    items: &[TrainItem],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>, TrainError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for item in items {
        if item.features.ncols() != model.config.feature_dim {
            return Err(ModelError::Encoder(crate::encoders::EncoderError::WidthMismatch {
                expected: model.config.feature_dim,
                found: item.features.ncols(),
            })
            .into());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = flatten(model);
    let mut adam = Adam::new(params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = steplr(cfg.lr0, cfg.step_size, cfg.gamma, epoch);
        order.shuffle(&mut rng);
        let mut clip_loss = vec![0.0; items.len()];
        for batch in order.chunks(cfg.batch) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let current: &Audio2RigModel = model;
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| {
                    let item = &items[i];
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                    let (pred, tape) = current.forward_train(&item.features.view(), &item.labels, Some(&mut drop_rng))?;
                    let loss = mse_loss(&pred, &item.target)?;
                    let d_pred = mse_grad(&pred, &item.target)?;
                    let grad = current.backward(&item.features.view(), &item.labels, &tape, &d_pred);
                    Ok((loss, flatten(&grad)))
                })
                .collect::<Result<Vec<_>, TrainError>>();
            let results = match results {
                Ok(r) => r,
                Err(TrainError::Model(ModelError::NonFinite { .. })) => return Err(TrainError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            let mut grads = vec![0.0; params.len()];
            for (&i, (loss, g)) in batch.iter().zip(&results) {
                clip_loss[i] = *loss;
                grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grads, lr);
            unflatten(model, &params);
        }
        // summed in clip order so the value does not depend on the shuffle
        let loss = clip_loss.iter().sum::<f64>() / items.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let record = EpochLoss { epoch, lr, loss };
        on_epoch(&record);
        curve.push(record);
    }
    Ok(curve)
}

pub fn write_loss_csv<W: Write>(curve: &[EpochLoss], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "lr", "loss"]).map_err(csv_io)?;
    for e in curve {
        w.write_record([e.epoch.to_string(), format!("{:e}", e.lr), format!("{:e}", e.loss)])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}

/// One `features / target / emotion` triple; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub target: PathBuf,
    pub emotion: EmotionLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub items: Vec<ManifestEntry>,
}

/// Loads every clip; features are resampled to 60 fps when needed and must
/// then match the target's frame count. Targets are `EMOF` files of width 174.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TrainItem>, TrainError> {
    let path = path.as_ref();
    let manifest: TrainManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::with_capacity(manifest.items.len());
    for (i, entry) in manifest.items.iter().enumerate() {
        let mut features = read_feature_file(base.join(&entry.features))?;
        if features.rate_hz() != RIG_FPS {
            features = resample_features(&features, RIG_FPS)?;
        }
        let target = read_feature_file(base.join(&entry.target))?;
        if target.width() != RIG_CHANNELS {
            return Err(ModelError::HiddenWidth { expected: RIG_CHANNELS, found: target.width() }.into());
        }
        if target.frames() != features.frames() {
            return Err(TrainError::FrameMismatch { item: i, features: features.frames(), target: target.frames() });
        }
        let frames = features.frames();
        items.push(TrainItem {
            features: features.into_data(),
            labels: vec![entry.emotion; frames],
            target: target.into_data(),
        });
    }
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(items)
}

/// Writes a dataset as `EMOF` files plus `manifest.json` under `dir`.
pub fn export_dataset(items: &[TrainItem], dir: impl AsRef<Path>) -> Result<PathBuf, TrainError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let features = PathBuf::from(format!("clip{i:03}.features.emof"));
        let target = PathBuf::from(format!("clip{i:03}.target.emof"));
        write_feature_file(&FeatureSequence::new(item.features.clone(), RIG_FPS)?, dir.join(&features))?;
        write_feature_file(&FeatureSequence::new(item.target.clone(), RIG_FPS)?, dir.join(&target))?;
        entries.push(ManifestEntry { features, target, emotion: item.emotion() });
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&TrainManifest { items: entries })?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio2rig::ModelConfig;
    use ndarray::array;

    #[test]
    fn mse_examples() {
        let t = Array2::from_elem((3, 4), 0.25);
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        assert!((mse_loss(&(&t + 0.1), &t).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse_loss(&array![[0.0, 0.0]], &array![[3.0, 4.0]]).unwrap(), 12.5);
        assert!(mse_loss(&t, &Array2::zeros((3, 5))).is_err());
    }

    #[test]
    fn steplr_examples() {
        for e in 0..100 {
            assert_eq!(steplr(1e-3, 100, 0.995, e), 1e-3);
        }
        assert_eq!(steplr(1e-3, 100, 0.995, 100), 1e-3 * 0.995);
        assert!((steplr(1e-4, 100, 0.995, 250) - 9.90025e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.5, -1.25, 3.0];
        let before = p.clone();
        adam.step(&mut p, &[0.0; 3], 1e-2);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr·g/(|g| + eps)
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[2.0, -0.5], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-8 && (p[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let a = gen_synthetic(3, 32, 40..=80, 16);
        assert_eq!(a, gen_synthetic(3, 32, 40..=80, 16));
        assert_ne!(a.items, gen_synthetic(4, 32, 40..=80, 16).items);
        assert_eq!(a.items.len(), 32);
        for item in &a.items {
            let t = item.features.nrows();
            assert!((40..=80).contains(&t));
            assert_eq!(item.target.dim(), (t, RIG_CHANNELS));
            assert!(item.target.iter().all(|v| v.abs() < MIX_BOUND));
        }
        for (i, r) in a.truth.emotion_offsets.rows().into_iter().enumerate() {
            for s in a.truth.emotion_offsets.rows().into_iter().skip(i + 1) {
                assert_ne!(r, s);
            }
        }
    }

    #[test]
    fn emotion_changes_targets_through_offsets() {
        let d = gen_synthetic(5, 1, 10..=10, 8);
        let x = &d.items[0].features;
        let happy = d.truth.target(x, EmotionLabel::Happy);
        let sad = d.truth.target(x, EmotionLabel::Sad);
        // scalar re-evaluation of the generator
        for ((t, c), &h) in happy.indexed_iter() {
            let (mut want_h, mut want_s) = (0.0, 0.0);
            for j in 0..SYNTHETIC_LATENTS {
                let pre = x.row(t).dot(&d.truth.weight.column(j)) + d.truth.bias[j];
                want_h += (pre + d.truth.emotion_offsets[[1, j]]).tanh() * d.truth.mixing[[j, c]];
                want_s += (pre + d.truth.emotion_offsets[[2, j]]).tanh() * d.truth.mixing[[j, c]];
            }
            assert!((h - want_h).abs() < 1e-12);
            assert!((sad[[t, c]] - want_s).abs() < 1e-12);
        }
        assert_ne!(happy, sad);
    }

    fn tiny() -> (Audio2RigModel, Vec<TrainItem>) {
        let model = Audio2RigModel::new(ModelConfig::desk(6, 8, 2, 1), 1).unwrap();
        (model, gen_synthetic(1, 4, 6..=9, 6).items)
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (mut model, items) = tiny();
        let before = model.clone();
        let cfg = TrainConfig { lr0: 0.0, epochs: 5, batch: 2, ..TrainConfig::default() };
        let curve = train(&mut model, &items, &cfg, |_| {}).unwrap();
        assert_eq!(model, before);
        assert!(curve.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig { lr0: 1e-2, epochs: 30, batch: 2, seed: 9, ..TrainConfig::default() };
        let (mut a, items) = tiny();
        let (mut b, _) = tiny();
        let ca = train(&mut a, &items, &cfg, |_| {}).unwrap();
        let cb = train(&mut b, &items, &cfg, |_| {}).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert!(ca.last().unwrap().loss < ca[0].loss);
    }

    #[test]
    fn bad_config_and_empty_data_are_rejected() {
        let (mut model, items) = tiny();
        let cfg = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
        assert!(matches!(train(&mut model, &items, &cfg, |_| {}), Err(TrainError::Config(_))));
        assert!(matches!(
            train(&mut model, &[], &TrainConfig::default(), |_| {}),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = gen_synthetic(2, 3, 5..=7, 4).items;
        let path = export_dataset(&items, dir.path()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in items.iter().zip(&loaded) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.features.mapv(|v| v as f32 as f64), b.features);
        }
    }

    #[test]
    fn loss_csv_has_header() {
        let mut out = Vec::new();
        write_loss_csv(&[EpochLoss { epoch: 0, lr: 1e-3, loss: 0.5 }], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("epoch,lr,loss\n0,"));
    }
}
