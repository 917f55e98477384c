//! Blink analytics and injection: eye aspect ratio, a linear window
//! classifier, event extraction, a log-normal blink-rate model, and
//! raised-cosine lid closures written into rig sequences.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rig::{ControllerMap, EyeRole, RigSequence};

/// Frames per classifier window: the current frame and three on each side.
pub const WINDOW: usize = 7;
const HALF_WINDOW: usize = WINDOW / 2;
/// Frames of one injected blink at 60 fps.
pub const BLINK_FRAMES: usize = 13;
/// EAR traces are sampled at this rate.
pub const TRACE_FPS: f64 = 30.0;
/// Shortest run of positive frames reported as a blink.
pub const MIN_EVENT_FRAMES: usize = 2;

#[derive(Debug, Error)]
pub enum BlinkError {
    #[error("landmarks p1 and p4 coincide")]
    DegenerateLandmarks,
    #[error("training data cannot be separated: {0}")]
    DegenerateData(&'static str),
    #[error("{found} windows but {labels} labels")]
    LabelCount { found: usize, labels: usize },
    #[error("trace has {found} frames, at least {min} needed")]
    TraceTooShort { min: usize, found: usize },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("need at least 2 rates at or below {max}, got {found}")]
    TooFewRates { max: f64, found: usize },
    #[error("rates must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("invalid blink-rate model: {0}")]
    Model(&'static str),
    #[error("controller map has no {0:?} channels")]
    MissingRole(EyeRole),
    #[error("classifier: {0}")]
    Json(#[from] serde_json::Error),
    #[error("EAR trace: {0}")]
    Csv(#[from] csv::Error),
    #[error("blink i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Six eye landmarks in image coordinates: `p1`/`p4` are the corners,
/// `p2`, `p3` the upper lid and `p6`, `p5` the lower lid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeLandmarks {
    pub points: [[f64; 2]; 6],
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Eye aspect ratio `(|p2−p6| + |p3−p5|) / (2|p1−p4|)`.
pub fn ear(lm: &EyeLandmarks) -> Result<f64, BlinkError> {
    let [p1, p2, p3, p4, p5, p6] = lm.points;
    let width = dist(p1, p4);
    if width == 0.0 {
        return Err(BlinkError::DegenerateLandmarks);
    }
    Ok((dist(p2, p6) + dist(p3, p5)) / (2.0 * width))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { lambda: 1e-2, epochs: 200, batch: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub samples: usize,
    pub positives: usize,
    pub objective: f64,
    pub train_accuracy: f64,
    pub config: SvmConfig,
}

/// Linear decision over a 7-frame EAR window; positive score means blink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlinkClassifier {
    pub weights: [f64; WINDOW],
    pub bias: f64,
    pub training: Option<TrainingInfo>,
}

impl BlinkClassifier {
    pub fn score(&self, window: &[f64; WINDOW]) -> f64 {
        self.weights.iter().zip(window).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn is_blink(&self, window: &[f64; WINDOW]) -> bool {
        self.score(window) > 0.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BlinkError> {
        let clf: Self = serde_json::from_str(text)?;
        if clf.weights.iter().chain([&clf.bias]).any(|v| !v.is_finite()) {
            return Err(BlinkError::Model("classifier weights must be finite"));
        }
        Ok(clf)
    }
}

fn hinge_objective(w: &[f64; WINDOW], b: f64, xs: &[[f64; WINDOW]], ys: &[f64], lambda: f64) -> f64 {
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum::<f64>()
        / xs.len() as f64;
    0.5 * lambda * dot(w, w) + loss
}

fn dot(a: &[f64; WINDOW], b: &[f64; WINDOW]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear SVM: `λ/2‖w‖² + mean hinge`, minimised by seeded mini-batch
/// subgradient steps of size `1/(λ (t + t₀))`, with `t₀` chosen so the first
/// step is at most 0.1. Features are standardised during
/// training and the returned weights act on raw EAR values. The iterate with
/// the lowest full objective is kept.
pub fn train_blink_classifier(
    windows: &[[f64; WINDOW]],
    labels: &[bool],
    cfg: &SvmConfig,
) -> Result<BlinkClassifier, BlinkError> {
    if windows.len() != labels.len() {
        return Err(BlinkError::LabelCount { found: windows.len(), labels: labels.len() });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(BlinkError::DegenerateData("both classes must be present"));
    }
    if let Some(i) = windows.iter().flatten().position(|v| !v.is_finite()) {
        return Err(BlinkError::NonFinite(i / WINDOW));
    }
    if !(cfg.lambda > 0.0) || cfg.batch == 0 {
        return Err(BlinkError::Model("lambda must be positive and batch at least 1"));
    }

    let n = windows.len() as f64;
    let mut mean = [0.0; WINDOW];
    let mut scale = [0.0; WINDOW];
    for x in windows {
        for k in 0..WINDOW {
            mean[k] += x[k] / n;
        }
    }
    for x in windows {
        for k in 0..WINDOW {
            scale[k] += (x[k] - mean[k]).powi(2) / n;
        }
    }
    if scale.iter().all(|&v| v == 0.0) {
        return Err(BlinkError::DegenerateData("all windows are identical"));
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<[f64; WINDOW]> = windows.iter().map(|x| std::array::from_fn(|k| (x[k] - mean[k]) / scale[k])).collect();
    let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let (mut w, mut b) = ([0.0; WINDOW], 0.0);
    let mut best = (hinge_objective(&w, b, &xs, &ys, cfg.lambda), w, b);
    let t0 = (1.0 / (0.1 * cfg.lambda)).max(1.0);
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            t += 1;
            let eta = 1.0 / (cfg.lambda * (t as f64 + t0));
            let mut gw = w.map(|v| cfg.lambda * v);
            let mut gb = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                if ys[i] * (dot(&w, &xs[i]) + b) < 1.0 {
                    for k in 0..WINDOW {
                        gw[k] -= ys[i] * xs[i][k] * inv;
                    }
                    gb -= ys[i] * inv;
                }
            }
            for k in 0..WINDOW {
                w[k] -= eta * gw[k];
            }
            b -= eta * gb;
        }
        let obj = hinge_objective(&w, b, &xs, &ys, cfg.lambda);
        if obj < best.0 {
            best = (obj, w, b);
        }
    }
    let (objective, w, b) = best;
    let weights: [f64; WINDOW] = std::array::from_fn(|k| w[k] / scale[k]);
    let bias = b - (0..WINDOW).map(|k| w[k] * mean[k] / scale[k]).sum::<f64>();
    let mut clf = BlinkClassifier { weights, bias, training: None };
    let correct = windows.iter().zip(labels).filter(|(x, &l)| clf.is_blink(x) == l).count();
    clf.training = Some(TrainingInfo {
        samples: windows.len(),
        positives,
        objective,
        train_accuracy: correct as f64 / n,
        config: *cfg,
    });
    Ok(clf)
}

/// A maximal run of blinking frames, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlinkEvent {
    pub start_frame: usize,
    pub end_frame: usize,
    pub fps: u32,
}

impl BlinkEvent {
    pub fn overlaps(&self, other: &BlinkEvent) -> bool {
        self.start_frame <= other.end_frame && other.start_frame <= self.end_frame
    }
}

/// Window centred on every frame, edges padded by repeating the end values.
pub fn windows_of(trace: &[f64]) -> Vec<[f64; WINDOW]> {
    let last = trace.len() as isize - 1;
    (0..trace.len() as isize)
        .map(|t| std::array::from_fn(|k| trace[(t + k as isize - HALF_WINDOW as isize).clamp(0, last) as usize]))
        .collect()
}

/// Maximal runs of `true` with at least `min_len` frames.
pub fn runs(flags: &[bool], min_len: usize, fps: u32) -> Vec<BlinkEvent> {
    let mut events = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().chain([&false]).enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_len {
                    events.push(BlinkEvent { start_frame: s, end_frame: t - 1, fps });
                }
                start = None;
            }
            _ => {}
        }
    }
    events
}

fn check_trace(trace: &[f64]) -> Result<(), BlinkError> {
    if trace.len() < WINDOW {
        return Err(BlinkError::TraceTooShort { min: WINDOW, found: trace.len() });
    }
    if let Some(i) = trace.iter().position(|v| !v.is_finite()) {
        return Err(BlinkError::NonFinite(i));
    }
    Ok(())
}

/// Classifies every frame of a 30 fps EAR trace and reports runs of at least
/// [`MIN_EVENT_FRAMES`] positive frames.
pub fn detect_blinks(trace: &[f64], clf: &BlinkClassifier) -> Result<Vec<BlinkEvent>, BlinkError> {
    check_trace(trace)?;
    let flags: Vec<bool> = windows_of(trace).iter().map(|w| clf.is_blink(w)).collect();
    Ok(runs(&flags, MIN_EVENT_FRAMES, TRACE_FPS as u32))
}

/// Baseline detector: every run of frames with EAR below `threshold`.
pub fn detect_threshold(trace: &[f64], threshold: f64) -> Vec<BlinkEvent> {
    let flags: Vec<bool> = trace.iter().map(|&e| e < threshold).collect();
    runs(&flags, 1, TRACE_FPS as u32)
}

pub fn read_ear_csv<R: Read>(input: R) -> Result<Vec<f64>, BlinkError> {
    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        frame: usize,
        ear: f64,
    }
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: Row = row?;
        out.push(row.ear);
    }
    Ok(out)
}

pub fn write_ear_csv<W: Write>(trace: &[f64], out: W) -> Result<(), BlinkError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "ear"])?;
    for (t, e) in trace.iter().enumerate() {
        w.write_record([t.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Log-normal distribution of blinks per minute with an upper cut-off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlinkFrequencyModel {
    pub mu_ln: f64,
    pub sigma_ln: f64,
    pub max_rate: f64,
}

impl Default for BlinkFrequencyModel {
    fn default() -> Self {
        Self { mu_ln: 3.518, sigma_ln: 0.532, max_rate: 100.0 }
    }
}

impl BlinkFrequencyModel {
    fn distribution(&self) -> Result<LogNormal<f64>, BlinkError> {
        if !(self.sigma_ln > 0.0 && self.sigma_ln.is_finite() && self.mu_ln.is_finite()) {
            return Err(BlinkError::Model("sigma_ln must be positive and parameters finite"));
        }
        if !(self.max_rate > 0.0) {
            return Err(BlinkError::Model("max_rate must be positive"));
        }
        LogNormal::new(self.mu_ln, self.sigma_ln).map_err(|_| BlinkError::Model("invalid log-normal parameters"))
    }

    /// First `n` raw draws and those at or below `max_rate`.
    pub fn sample_rates(&self, n: usize, seed: u64) -> Result<RateSample, BlinkError> {
        let dist = self.distribution()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let retained = raw.iter().copied().filter(|&r| r <= self.max_rate).collect();
        Ok(RateSample { raw, retained })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateSample {
    pub raw: Vec<f64>,
    pub retained: Vec<f64>,
}

/// Maximum-likelihood fit on the log scale after dropping rates above 100.
/// `sigma_ln` is the population standard deviation; a zero spread is
/// reported as is.
pub fn fit_lognormal(rates: &[f64]) -> Result<BlinkFrequencyModel, BlinkError> {
    let max_rate = BlinkFrequencyModel::default().max_rate;
    if let Some(&r) = rates.iter().find(|&&r| !(r > 0.0)) {
        return Err(BlinkError::NonPositiveRate(r));
    }
    let logs: Vec<f64> = rates.iter().filter(|&&r| r <= max_rate).map(|r| r.ln()).collect();
    if logs.len() < 2 {
        return Err(BlinkError::TooFewRates { max: max_rate, found: logs.len() });
    }
    let n = logs.len() as f64;
    let mu_ln = logs.iter().sum::<f64>() / n;
    let sigma_ln = (logs.iter().map(|l| (l - mu_ln).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BlinkFrequencyModel { mu_ln, sigma_ln, max_rate })
}

/// Blink start frames over `duration_s`: draw a rate (redrawing above the
/// cut-off), wait `60 / rate` seconds, repeat.
pub fn sample_blink_times(
    model: &BlinkFrequencyModel,
    duration_s: f64,
    fps: f64,
    seed: u64,
) -> Result<Vec<usize>, BlinkError> {
    let dist = model.distribution()?;
    if !(duration_s > 0.0 && fps > 0.0) {
        return Err(BlinkError::Model("duration and fps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::new();
    let mut t = 0.0;
    loop {
        let rate = loop {
            let r = dist.sample(&mut rng);
            if r <= model.max_rate {
                break r;
            }
        };
        t += 60.0 / rate;
        if t >= duration_s {
            return Ok(starts);
        }
        starts.push((t * fps).floor() as usize);
    }
}

/// Lid closure weight `0.5(1 − cos(2πk/12))` for `k` in `0..13`.
pub fn closure_profile(k: usize) -> f64 {
    if k >= BLINK_FRAMES {
        return 0.0;
    }
    let period = (BLINK_FRAMES - 1) as f64;
    0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / period).cos())
}

/// Blends lid-closure channels toward their closed value (the channel's
/// upper bound) with a 13-frame raised cosine starting at each start frame.
/// Overlapping blinks use the larger weight; windows past the end are cut.
pub fn inject_blinks(seq: &RigSequence, starts: &[usize], map: &ControllerMap) -> Result<RigSequence, BlinkError> {
    let lids = map.role_indices(EyeRole::LidClosure);
    if lids.is_empty() {
        return Err(BlinkError::MissingRole(EyeRole::LidClosure));
    }
    let frames = seq.len();
    let mut weight = vec![0.0f64; frames];
    for &s in starts {
        for k in 0..BLINK_FRAMES {
            if let Some(w) = weight.get_mut(s + k) {
                *w = w.max(closure_profile(k));
            }
        }
    }
    let mut out = seq.clone();
    let values = out.values_mut();
    for &c in &lids {
        let closed = map.entry(c).max;
        for (t, &p) in weight.iter().enumerate() {
            if p > 0.0 {
                let v = values[[t, c]];
                values[[t, c]] = v * (1.0 - p) + closed * p;
            }
        }
    }
    Ok(out)
}

/// Synthetic 30 fps EAR traces with known blink events, used to train and
/// evaluate the classifier in the absence of labelled video.
pub mod synth {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    pub struct LabelledTrace {
        pub ear: Vec<f64>,
        /// Frames inside a blink (closure at least half way).
        pub blinking: Vec<bool>,
        pub events: Vec<BlinkEvent>,
    }

    /// Per trace: an open-eye baseline in `[0.25, 0.35]` with slow drift and
    /// tracking noise; 2 to 6 blinks of 3 to 9 frames dipping to
    /// `[0.02, 0.12]`; plus distractors that a threshold detector trips on,
    /// namely single-frame tracking glitches and shallow squints.
    pub fn labelled_trace(seed: u64, frames: usize) -> LabelledTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = rng.random_range(0.25..0.35);
        let drift_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let drift_period = rng.random_range(90.0..300.0);
        let mut ear: Vec<f64> = (0..frames)
            .map(|t| {
                base + 0.015 * (std::f64::consts::TAU * t as f64 / drift_period + drift_phase).sin()
                    + rng.random_range(-0.01..0.01)
            })
            .collect();
        let mut blinking = vec![false; frames];
        // Occupied frames, with a margin, so blinks and distractors never touch.
        let mut busy = vec![false; frames];
        let place = |len: usize, rng: &mut ChaCha8Rng, busy: &mut Vec<bool>| -> Option<usize> {
            for _ in 0..50 {
                let s = rng.random_range(4..frames.saturating_sub(len + 4).max(5));
                let lo = s.saturating_sub(6);
                let hi = (s + len + 6).min(frames);
                if s + len + 4 <= frames && !busy[lo..hi].iter().any(|&b| b) {
                    busy[lo..hi].iter_mut().for_each(|b| *b = true);
                    return Some(s);
                }
            }
            None
        };
        let n_blinks = rng.random_range(2..=6);
        for _ in 0..n_blinks {
            let len = rng.random_range(3..=9);
            let Some(s) = place(len, &mut rng, &mut busy) else { continue };
            let depth = rng.random_range(0.02..0.12);
            for k in 0..len {
                let c = 0.5 * (1.0 - (std::f64::consts::TAU * (k + 1) as f64 / (len + 1) as f64).cos());
                let t = s + k;
                ear[t] = ear[t] * (1.0 - c) + depth * c;
                blinking[t] = c >= 0.5;
            }
        }
        let n_glitches = rng.random_range(0..=3);
        for _ in 0..n_glitches {
            if let Some(s) = place(1, &mut rng, &mut busy) {
                ear[s] = rng.random_range(0.08..0.19);
            }
        }
        let n_squints = rng.random_range(0..=2);
        for _ in 0..n_squints {
            let len = rng.random_range(10..=30);
            if let Some(s) = place(len, &mut rng, &mut busy) {
                let level = rng.random_range(0.17..0.21);
                for t in s..s + len {
                    ear[t] = level + rng.random_range(-0.01..0.01);
                }
            }
        }
        let events = runs(&blinking, 1, TRACE_FPS as u32);
        LabelledTrace { ear, blinking, events }
    }

    /// Per-frame windows and labels from a set of traces.
    pub fn training_set(traces: &[LabelledTrace]) -> (Vec<[f64; WINDOW]>, Vec<bool>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for tr in traces {
            xs.extend(windows_of(&tr.ear));
            ys.extend_from_slice(&tr.blinking);
        }
        (xs, ys)
    }

    /// The classifier trained on 100 labelled traces of 300 frames.
    pub fn reference_classifier() -> Result<BlinkClassifier, BlinkError> {
        let traces: Vec<_> = (0..100).map(|i| labelled_trace(10_000 + i, 300)).collect();
        let (xs, ys) = training_set(&traces);
        train_blink_classifier(&xs, &ys, &SvmConfig::default())
    }

    /// One-to-one overlap matching; returns (true positives, false
    /// positives, false negatives).
    pub fn match_events(found: &[BlinkEvent], truth: &[BlinkEvent]) -> (usize, usize, usize) {
        let mut used = vec![false; truth.len()];
        let mut tp = 0;
        for f in found {
            if let Some(i) = (0..truth.len()).find(|&i| !used[i] && f.overlaps(&truth[i])) {
                used[i] = true;
                tp += 1;
            }
        }
        (tp, found.len() - tp, truth.len() - tp)
    }

    /// Open eye with one 5-frame blink and, later, one isolated low frame.
    pub fn dip_and_glitch_trace() -> Vec<f64> {
        let mut t = vec![0.3; 40];
        t[10..15].copy_from_slice(&[0.2, 0.1, 0.05, 0.1, 0.2]);
        t[28] = 0.15;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::synth::*;
    use super::*;
    use ndarray::Array2;

    fn lm(points: [[f64; 2]; 6]) -> EyeLandmarks {
        EyeLandmarks { points }
    }

    #[test]
    fn ear_examples() {
        let open = lm([[0.0, 0.0], [1.0, 1.0], [3.0, 1.0], [4.0, 0.0], [3.0, -1.0], [1.0, -1.0]]);
        assert_eq!(ear(&open).unwrap(), 0.5);
        let closed = lm([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [4.0, 0.0], [3.0, 0.0], [1.0, 0.0]]);
        assert_eq!(ear(&closed).unwrap(), 0.0);
        let scaled = lm(open.points.map(|[x, y]| [x * 3.7, y * 3.7]));
        assert!((ear(&scaled).unwrap() - 0.5).abs() < 1e-12);
        let bad = lm([[1.0, 1.0]; 6]);
        assert!(matches!(ear(&bad), Err(BlinkError::DegenerateLandmarks)));
    }

    #[test]
    fn separable_data_is_learned_exactly() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let level = 0.28 + 0.002 * i as f64;
            xs.push([level; WINDOW]);
            ys.push(false);
            let mut dip = [level; WINDOW];
            dip[2..5].copy_from_slice(&[0.12, 0.05, 0.12]);
            xs.push(dip);
            ys.push(true);
        }
        let clf = train_blink_classifier(&xs, &ys, &SvmConfig::default()).unwrap();
        assert_eq!(clf.training.as_ref().unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn flipped_labels_negate_the_separator() {
        let traces: Vec<_> = (0..5).map(|i| labelled_trace(i, 200)).collect();
        let (xs, ys) = training_set(&traces);
        let cfg = SvmConfig { epochs: 30, ..SvmConfig::default() };
        let a = train_blink_classifier(&xs, &ys, &cfg).unwrap();
        let flipped: Vec<bool> = ys.iter().map(|y| !y).collect();
        let b = train_blink_classifier(&xs, &flipped, &cfg).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa + wb).abs() < 1e-9 * wa.abs().max(1.0));
        }
        assert!((a.bias + b.bias).abs() < 1e-9 * a.bias.abs().max(1.0));
    }

    #[test]
    fn degenerate_training_data() {
        let xs = vec![[0.3; WINDOW]; 4];
        let err = train_blink_classifier(&xs, &[true, false, true, false], &SvmConfig::default());
        assert!(matches!(err, Err(BlinkError::DegenerateData(_))));
        let err = train_blink_classifier(&xs, &[true; 4], &SvmConfig::default());
        assert!(matches!(err, Err(BlinkError::DegenerateData(_))));
        assert!(train_blink_classifier(&xs, &[true], &SvmConfig::default()).is_err());
    }

    #[test]
    fn detection_examples() {
        let clf = reference_classifier().unwrap();
        assert!(detect_blinks(&[0.3; 60], &clf).unwrap().is_empty());
        let mut v = vec![0.3; 40];
        v[18..23].copy_from_slice(&[0.2, 0.1, 0.05, 0.1, 0.2]);
        assert_eq!(detect_blinks(&v, &clf).unwrap().len(), 1);
        let trace = dip_and_glitch_trace();
        assert_eq!(detect_blinks(&trace, &clf).unwrap().len(), 1);
        assert_eq!(detect_threshold(&trace, 0.2).len(), 2);
        assert!(matches!(detect_blinks(&[0.3; 6], &clf), Err(BlinkError::TraceTooShort { .. })));
    }

    #[test]
    fn runs_are_maximal() {
        let f = [true, true, false, true, false, true, true, true];
        let ev = runs(&f, 2, 30);
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].start_frame, ev[0].end_frame), (0, 1));
        assert_eq!((ev[1].start_frame, ev[1].end_frame), (5, 7));
    }

    #[test]
    fn windows_pad_by_repetition() {
        let w = windows_of(&[1.0, 2.0, 3.0]);
        assert_eq!(w[0], [1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 3.0]);
        assert_eq!(w[2], [1.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn lognormal_fit_examples() {
        let e3 = 3f64.exp();
        let m = fit_lognormal(&[e3, e3, e3]).unwrap();
        assert!((m.mu_ln - 3.0).abs() < 1e-15);
        assert_eq!(m.sigma_ln, 0.0);
        let with_outlier = fit_lognormal(&[e3, e3, 150.0]).unwrap();
        assert_eq!(with_outlier, m);
        assert!(matches!(fit_lognormal(&[e3, 150.0]), Err(BlinkError::TooFewRates { .. })));
        assert!(fit_lognormal(&[e3, 0.0, e3]).is_err());
    }

    #[test]
    fn lognormal_recovers_parameters() {
        let model = BlinkFrequencyModel::default();
        let s = model.sample_rates(100_000, 1).unwrap();
        let logs: Vec<f64> = s.raw.iter().map(|r| r.ln()).collect();
        let n = logs.len() as f64;
        let mu = logs.iter().sum::<f64>() / n;
        let sd = (logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mu - 3.518).abs() < 0.01 && (sd - 0.532).abs() < 0.01);
        let mut sorted = s.raw.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[sorted.len() / 2] - 3.518f64.exp()).abs() < 0.5);
        assert!(s.retained.iter().all(|&r| r <= 100.0));
    }

    #[test]
    fn blink_times_are_seeded_and_spaced() {
        let model = BlinkFrequencyModel::default();
        let a = sample_blink_times(&model, 60.0, 60.0, 4).unwrap();
        assert_eq!(a, sample_blink_times(&model, 60.0, 60.0, 4).unwrap());
        assert!(a.windows(2).all(|w| w[1] - w[0] >= 35));
        assert!(a.iter().all(|&f| f < 3600));
        assert!((5..120).contains(&a.len()));
        assert!(sample_blink_times(&model, 0.0, 60.0, 4).is_err());
    }

    #[test]
    fn profile_shape() {
        assert_eq!(closure_profile(0), 0.0);
        assert_eq!(closure_profile(6), 1.0);
        assert!(closure_profile(12) < 1e-15);
        for k in 0..6 {
            assert!((closure_profile(k) - closure_profile(12 - k)).abs() < 1e-15);
        }
    }

    #[test]
    fn injection_touches_only_lids_inside_window() {
        let map = ControllerMap::default_map();
        let values = Array2::from_shape_fn((200, 174), |(t, c)| ((t * 7 + c) % 11) as f64 * 0.05 - 0.2);
        let seq = RigSequence::new(values).unwrap();
        assert_eq!(inject_blinks(&seq, &[], &map).unwrap(), seq);
        let out = inject_blinks(&seq, &[100], &map).unwrap();
        let lids = map.role_indices(EyeRole::LidClosure);
        for ((t, c), &v) in out.values().indexed_iter() {
            let inside = (101..112).contains(&t) && lids.contains(&c);
            if !inside {
                assert_eq!(v.to_bits(), seq.values()[[t, c]].to_bits());
            }
        }
        for &c in &lids {
            assert_eq!(out.values()[[106, c]], map.entry(c).max);
        }
        let tail = inject_blinks(&seq, &[195], &map).unwrap();
        assert_eq!(tail.len(), 200);
    }

    #[test]
    fn classifier_json_round_trip() {
        let clf = BlinkClassifier { weights: [0.5; WINDOW], bias: -1.0, training: None };
        assert_eq!(BlinkClassifier::from_json(&clf.to_json()).unwrap(), clf);
    }

    #[test]
    fn ear_csv_round_trip() {
        let mut buf = Vec::new();
        write_ear_csv(&[0.3, 0.25, 0.05], &mut buf).unwrap();
        assert_eq!(read_ear_csv(buf.as_slice()).unwrap(), vec![0.3, 0.25, 0.05]);
    }
}
