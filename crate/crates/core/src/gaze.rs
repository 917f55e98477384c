//! Procedural gaze: random keyframes in a disk around the centre, linearly
//! interpolated and written to both eyes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rig::{ControllerMap, EyeRole, RigSequence};

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("invalid gaze configuration: {0}")]
    Config(&'static str),
    #[error("controller map has no {0:?} channels")]
    MissingRole(EyeRole),
    #[error("gaze track: {0}")]
    Csv(#[from] csv::Error),
    #[error("gaze i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GazeConfig {
    pub interval_min: usize,
    pub interval_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub return_center_prob: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        Self { interval_min: 15, interval_max: 45, radius_min: 0.1, radius_max: 0.2, return_center_prob: 0.4 }
    }
}

impl GazeConfig {
    pub fn validate(&self) -> Result<(), GazeError> {
        if self.interval_min == 0 || self.interval_max < self.interval_min {
            return Err(GazeError::Config("need 1 <= interval_min <= interval_max"));
        }
        if !(self.radius_min >= 0.0 && self.radius_max >= self.radius_min && self.radius_max.is_finite()) {
            return Err(GazeError::Config("need 0 <= radius_min <= radius_max"));
        }
        if !(0.0..=1.0).contains(&self.return_center_prob) {
            return Err(GazeError::Config("return_center_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One sampling step: wait `interval` frames, then look at `target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeDraw {
    pub interval: usize,
    pub target: (f64, f64),
    pub centered: bool,
}

/// Endless seeded stream of gaze draws.
pub struct GazeSampler {
    cfg: GazeConfig,
    rng: ChaCha8Rng,
}

impl GazeSampler {
    pub fn new(cfg: GazeConfig, seed: u64) -> Result<Self, GazeError> {
        cfg.validate()?;
        Ok(Self { cfg, rng: ChaCha8Rng::seed_from_u64(seed) })
    }
}

impl Iterator for GazeSampler {
    type Item = GazeDraw;

    fn next(&mut self) -> Option<GazeDraw> {
        let interval = self.rng.random_range(self.cfg.interval_min..=self.cfg.interval_max);
        if self.rng.random_bool(self.cfg.return_center_prob) {
            return Some(GazeDraw { interval, target: (0.0, 0.0), centered: true });
        }
        let r = self.rng.random_range(self.cfg.radius_min..=self.cfg.radius_max);
        let theta = self.rng.random_range(0.0..std::f64::consts::TAU);
        Some(GazeDraw { interval, target: (r * theta.cos(), r * theta.sin()), centered: false })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeKey {
    pub frame: usize,
    pub horizontal: f64,
    pub vertical: f64,
}

/// Piecewise-linear gaze path; holds the last keyframe to the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeTrack {
    pub keyframes: Vec<GazeKey>,
}

impl GazeTrack {
    /// Interpolated `(horizontal, vertical)` at `frame`.
    pub fn at(&self, frame: usize) -> (f64, f64) {
        let keys = &self.keyframes;
        let i = keys.partition_point(|k| k.frame <= frame);
        if i == 0 {
            return keys.first().map_or((0.0, 0.0), |k| (k.horizontal, k.vertical));
        }
        let a = keys[i - 1];
        let Some(b) = keys.get(i) else {
            return (a.horizontal, a.vertical);
        };
        let w = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        (a.horizontal + w * (b.horizontal - a.horizontal), a.vertical + w * (b.vertical - a.vertical))
    }

    pub fn write_csv<W: Write>(&self, frames: usize, out: W) -> Result<(), GazeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["frame", "h", "v"])?;
        for t in 0..frames {
            let (h, v) = self.at(t);
            w.write_record([t.to_string(), h.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Starts at the centre on frame 0 and appends one keyframe per draw while
/// it lands inside the clip. The eye drifts across each whole interval.
pub fn sample_gaze_track(cfg: &GazeConfig, n_frames: usize, seed: u64) -> Result<GazeTrack, GazeError> {
    if n_frames == 0 {
        return Err(GazeError::Config("n_frames must be at least 1"));
    }
    let mut keyframes = vec![GazeKey { frame: 0, horizontal: 0.0, vertical: 0.0 }];
    let mut frame = 0;
    for draw in GazeSampler::new(*cfg, seed)? {
        frame += draw.interval;
        if frame >= n_frames {
            break;
        }
        keyframes.push(GazeKey { frame, horizontal: draw.target.0, vertical: draw.target.1 });
    }
    Ok(GazeTrack { keyframes })
}

/// Writes the track to every horizontal and vertical gaze channel.
pub fn inject_gaze(seq: &RigSequence, track: &GazeTrack, map: &ControllerMap) -> Result<RigSequence, GazeError> {
    let horizontal = map.role_indices(EyeRole::GazeHorizontal);
    let vertical = map.role_indices(EyeRole::GazeVertical);
    if horizontal.is_empty() {
        return Err(GazeError::MissingRole(EyeRole::GazeHorizontal));
    }
    if vertical.is_empty() {
        return Err(GazeError::MissingRole(EyeRole::GazeVertical));
    }
    let mut out = seq.clone();
    let values = out.values_mut();
    for t in 0..values.nrows() {
        let (h, v) = track.at(t);
        for &c in &horizontal {
            values[[t, c]] = h;
        }
        for &c in &vertical {
            values[[t, c]] = v;
        }
    }
    Ok(out)
}
