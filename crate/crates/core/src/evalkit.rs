//! Evaluation metrics: regional mean absolute error and left/right
//! controller correlation.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rig::{ControllerMap, RigSequence, Side};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequences differ in shape: {pred:?} vs {truth:?}")]
    Shape { pred: (usize, usize), truth: (usize, usize) },
    #[error("channel index {0} out of range")]
    Index(usize),
    #[error("no channels selected")]
    NoChannels,
    #[error("sequence is empty")]
    Empty,
    #[error("controller map has {map} entries but the sequence has {seq} channels")]
    MapWidth { map: usize, seq: usize },
    #[error("correlation output: {0}")]
    Csv(#[from] csv::Error),
    #[error("evaluation i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean of `|pred − truth|` over all frames and the listed channels.
pub fn mae(pred: &RigSequence, truth: &RigSequence, indices: &[usize]) -> Result<f64, EvalError> {
    let (p, t) = (pred.values(), truth.values());
    if p.dim() != t.dim() {
        return Err(EvalError::Shape { pred: p.dim(), truth: t.dim() });
    }
    if indices.is_empty() {
        return Err(EvalError::NoChannels);
    }
    if p.nrows() == 0 {
        return Err(EvalError::Empty);
    }
    if let Some(&c) = indices.iter().find(|&&c| c >= p.ncols()) {
        return Err(EvalError::Index(c));
    }
    // running mean: a constant error comes back bit-exact, which a sum
    // followed by one division does not guarantee
    let mut mean = 0.0;
    let mut n = 0.0;
    for (pr, tr) in p.rows().into_iter().zip(t.rows()) {
        for &c in indices {
            n += 1.0;
            mean += ((pr[c] - tr[c]).abs() - mean) / n;
        }
    }
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub full: f64,
    pub mouth: f64,
    pub eye: f64,
}

/// MAE over every controller, the mouth area (jaw, mouth, teeth, tongue) and
/// the eye area (eye, brow).
pub fn mae_report(pred: &RigSequence, truth: &RigSequence, map: &ControllerMap) -> Result<MaeReport, EvalError> {
    check_map(pred, map)?;
    let all: Vec<usize> = (0..map.len()).collect();
    Ok(MaeReport {
        full: mae(pred, truth, &all)?,
        mouth: mae(pred, truth, &map.mouth_area())?,
        eye: mae(pred, truth, &map.eye_area())?,
    })
}

fn check_map(seq: &RigSequence, map: &ControllerMap) -> Result<(), EvalError> {
    let width = seq.values().ncols();
    if map.len() != width {
        return Err(EvalError::MapWidth { map: map.len(), seq: width });
    }
    Ok(())
}

/// Pearson coefficients of every left controller (rows) against every
/// right controller (columns). Constant channels have no defined
/// correlation; their rows or columns hold 0 and are flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub values: Array2<f64>,
    pub left_constant: Vec<bool>,
    pub right_constant: Vec<bool>,
}

impl CorrelationMatrix {
    /// Coefficient between `left[i]` and its mirror partner, if the partner
    /// is among the right channels.
    pub fn paired(&self, map: &ControllerMap) -> Vec<(usize, usize, f64)> {
        self.left
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| {
                let pair = map.entry(l).pair?;
                let j = self.right.iter().position(|&r| r == pair)?;
                Some((l, pair, self.values[[i, j]]))
            })
            .collect()
    }

    /// CSV with a corner cell, right channel names across and left channel
    /// names down.
    pub fn write_csv<W: Write>(&self, map: &ControllerMap, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let header = std::iter::once("left\\right".to_string()).chain(self.right.iter().map(|&c| map.entry(c).name.clone()));
        w.write_record(header)?;
        for (i, &l) in self.left.iter().enumerate() {
            let mut row = vec![map.entry(l).name.clone()];
            row.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn centered(seq: &RigSequence, c: usize) -> (Vec<f64>, f64) {
    let col = seq.channel(c);
    let mean = col.sum() / col.len() as f64;
    let dev: Vec<f64> = col.iter().map(|v| v - mean).collect();
    let ss = dev.iter().map(|d| d * d).sum();
    (dev, ss)
}

/// Left × right Pearson correlation matrix across frames.
pub fn lr_correlation(seq: &RigSequence, map: &ControllerMap) -> Result<CorrelationMatrix, EvalError> {
    check_map(seq, map)?;
    if seq.len() < 2 {
        return Err(EvalError::Empty);
    }
    let left = map.side_indices(Side::Left);
    let right = map.side_indices(Side::Right);
    let ls: Vec<_> = left.iter().map(|&c| centered(seq, c)).collect();
    let rs: Vec<_> = right.iter().map(|&c| centered(seq, c)).collect();
    let mut values = Array2::zeros((left.len(), right.len()));
    for (i, (lx, sxx)) in ls.iter().enumerate() {
        for (j, (ry, syy)) in rs.iter().enumerate() {
            if *sxx == 0.0 || *syy == 0.0 {
                continue;
            }
            let sxy: f64 = lx.iter().zip(ry).map(|(a, b)| a * b).sum();
            // Equal spreads take the exact route so mirrored channels give ±1.
            let denom = if sxx == syy { *sxx } else { (sxx * syy).sqrt() };
            values[[i, j]] = (sxy / denom).clamp(-1.0, 1.0);
        }
    }
    Ok(CorrelationMatrix {
        left_constant: ls.iter().map(|(_, s)| *s == 0.0).collect(),
        right_constant: rs.iter().map(|(_, s)| *s == 0.0).collect(),
        left,
        right,
        values,
    })
}
