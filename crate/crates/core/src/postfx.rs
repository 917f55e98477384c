//! Temporal smoothing and per-controller clamping of rig sequences.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rig::{ControllerMap, RigSequence};

#[derive(Debug, Error, PartialEq)]
pub enum PostError {
    #[error("Savitzky-Golay window must be odd and at least 1, got {0}")]
    EvenWindow(usize),
    #[error("polynomial order {order} must be below window {window}")]
    OrderTooHigh { window: usize, order: usize },
    #[error("controller map has {map} entries but the sequence has {seq} channels")]
    MapWidth { map: usize, seq: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothConfig {
    pub window: usize,
    pub order: usize,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self { window: 15, order: 3 }
    }
}

/// Least-squares smoothing weights for the centre sample of a `window`-wide
/// polynomial fit of degree `order`.
pub fn savgol_coeffs(window: usize, order: usize) -> Result<Array1<f64>, PostError> {
    if window.is_multiple_of(2) {
        return Err(PostError::EvenWindow(window));
    }
    if order >= window {
        return Err(PostError::OrderTooHigh { window, order });
    }
    let half = (window / 2) as f64;
    let cols = order + 1;
    // Vandermonde matrix A (window × cols); the centre row of A (AᵀA)⁻¹ Aᵀ is
    // e₀ᵀ (AᵀA)⁻¹ Aᵀ, so solve (AᵀA) y = e₀ and take A y.
    let a = Array2::from_shape_fn((window, cols), |(i, j)| (i as f64 - half).powi(j as i32));
    let ata = a.t().dot(&a);
    let mut rhs = Array1::zeros(cols);
    rhs[0] = 1.0;
    let y = solve_spd(ata, rhs);
    Ok(a.dot(&y))
}

/// Gaussian elimination with partial pivoting; the normal matrices here are
/// tiny and well conditioned for the supported window sizes.
fn solve_spd(mut m: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs())).unwrap();
        if pivot != col {
            for k in 0..n {
                m.swap([col, k], [pivot, k]);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[[row, k]] * x[k]).sum();
        x[row] = (b[row] - s) / m[[row, row]];
    }
    x
}

/// Mirror index (`x[-k] = x[k]`, `x[n-1+k] = x[n-1-k]`), repeated as needed.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Window actually used for a sequence of `frames`: the configured window, or
/// the largest odd window that fits, and the order reduced to stay below it.
pub fn effective_window(cfg: SmoothConfig, frames: usize) -> (usize, usize) {
    let mut window = cfg.window;
    if frames < window {
        window = if frames % 2 == 1 { frames } else { frames.saturating_sub(1) };
    }
    let window = window.max(1);
    (window, cfg.order.min(window - 1))
}

/// Filters one channel with mirror padding at both ends.
pub fn smooth_channel(x: &[f64], coeffs: &Array1<f64>) -> Vec<f64> {
    let n = x.len();
    let half = (coeffs.len() / 2) as isize;
    (0..n as isize)
        .map(|t| coeffs.iter().enumerate().map(|(k, c)| c * x[mirror(t + k as isize - half, n)]).sum())
        .collect()
}

/// Savitzky-Golay smoothing of every controller along time.
pub fn smooth_sequence(seq: &RigSequence, cfg: SmoothConfig) -> Result<RigSequence, PostError> {
    let frames = seq.len();
    if frames == 0 {
        return Ok(seq.clone());
    }
    let (window, order) = effective_window(cfg, frames);
    let coeffs = savgol_coeffs(window, order)?;
    let mut out = seq.values().clone();
    for (c, mut col) in out.columns_mut().into_iter().enumerate() {
        let src: Vec<f64> = seq.channel(c).to_vec();
        for (dst, v) in col.iter_mut().zip(smooth_channel(&src, &coeffs)) {
            *dst = v;
        }
    }
    Ok(RigSequence::new(out).expect("filtering keeps values finite"))
}

/// Clamps each controller to its `[min, max]` from the map.
pub fn clamp_sequence(seq: &RigSequence, map: &ControllerMap) -> Result<RigSequence, PostError> {
    let width = seq.values().ncols();
    if map.len() != width {
        return Err(PostError::MapWidth { map: map.len(), seq: width });
    }
    let bounds = map.bounds();
    let mut out = seq.values().clone();
    for (mut col, &(lo, hi)) in out.columns_mut().into_iter().zip(&bounds) {
        col.mapv_inplace(|v| v.clamp(lo, hi));
    }
    Ok(RigSequence::new(out).expect("clamping keeps values finite"))
}

/// Smoothing (unless disabled) followed by clamping.
pub fn postprocess(seq: &RigSequence, map: &ControllerMap, smooth: Option<SmoothConfig>) -> Result<RigSequence, PostError> {
    match smooth {
        Some(cfg) => clamp_sequence(&smooth_sequence(seq, cfg)?, map),
        None => clamp_sequence(seq, map),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::RIG_CHANNELS;

    #[test]
    fn five_two_coefficients() {
        let c = savgol_coeffs(5, 2).unwrap();
        let expected = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{c}");
        }
    }

    #[test]
    fn fifteen_three_centre_and_sum() {
        let c = savgol_coeffs(15, 3).unwrap();
        assert!((c[7] - 167.0 / 1105.0).abs() < 1e-12);
        assert!((c.sum() - 1.0).abs() < 1e-12);
        for k in 0..7 {
            assert!((c[k] - c[14 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_cubic_closed_form_oracle() {
        // Closed form for orders 2/3: c_k = 3(3m² + 3m − 1 − 5k²) / ((2m+3)(2m+1)(2m−1)), m = half width.
        for m in 2..10i32 {
            let c = savgol_coeffs((2 * m + 1) as usize, 3).unwrap();
            let denom = ((2 * m + 3) * (2 * m + 1) * (2 * m - 1)) as f64;
            for k in -m..=m {
                let want = 3.0 * (3 * m * m + 3 * m - 1 - 5 * k * k) as f64 / denom;
                assert!((c[(k + m) as usize] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_windows() {
        assert_eq!(savgol_coeffs(4, 2), Err(PostError::EvenWindow(4)));
        assert_eq!(savgol_coeffs(3, 3), Err(PostError::OrderTooHigh { window: 3, order: 3 }));
    }

    #[test]
    fn mirror_indices() {
        let got: Vec<_> = (-3..8).map(|i| mirror(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(mirror(-4, 1), 0);
    }

    #[test]
    fn cubic_is_preserved_in_the_interior() {
        let x: Vec<f64> = (0..40).map(|t| 0.001 * (t as f64).powi(3) - 0.02 * (t * t) as f64 + 0.3).collect();
        let y = smooth_channel(&x, &savgol_coeffs(15, 3).unwrap());
        for t in 7..33 {
            assert!((x[t] - y[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_sequence_is_unchanged() {
        let seq = RigSequence::new(Array2::from_elem((30, RIG_CHANNELS), 0.4)).unwrap();
        let out = smooth_sequence(&seq, SmoothConfig::default()).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn short_sequences_fall_back() {
        assert_eq!(effective_window(SmoothConfig::default(), 100), (15, 3));
        assert_eq!(effective_window(SmoothConfig::default(), 10), (9, 3));
        assert_eq!(effective_window(SmoothConfig::default(), 3), (3, 2));
        assert_eq!(effective_window(SmoothConfig::default(), 2), (1, 0));
        assert_eq!(effective_window(SmoothConfig::default(), 1), (1, 0));
        let seq = RigSequence::new(Array2::from_shape_fn((4, RIG_CHANNELS), |(t, c)| (t * c) as f64 * 1e-3)).unwrap();
        assert!(smooth_sequence(&seq, SmoothConfig::default()).is_ok());
    }

    #[test]
    fn clamp_respects_map_bounds() {
        let map = ControllerMap::default_map();
        let seq = RigSequence::new(Array2::from_elem((3, RIG_CHANNELS), -1.7)).unwrap();
        let out = clamp_sequence(&seq, &map).unwrap();
        for (c, &(lo, _)) in map.bounds().iter().enumerate() {
            assert!(out.channel(c).iter().all(|&v| v == lo));
        }
        let in_range = RigSequence::new(Array2::from_elem((3, RIG_CHANNELS), 0.5)).unwrap();
        assert_eq!(clamp_sequence(&in_range, &map).unwrap(), in_range);
    }
}
