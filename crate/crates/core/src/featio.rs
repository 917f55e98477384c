//! Audio feature ingestion and rate conversion.
//!
//! Features normally come from an external speech encoder running at 50 Hz.
//! They are read from a small binary container (`EMOF`) or headerless CSV,
//! and resampled onto the 60 fps rig clock with endpoint-aligned linear
//! interpolation. A log-mel cepstral extractor is included as a reference
//! feature family for setups without an external encoder.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"EMOF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Feature family tag recorded for the built-in cepstral extractor.
pub const FALLBACK_FAMILY: &str = "reference-mfcc";

/// Native rate of speech-encoder hidden states.
pub const ENCODER_RATE_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("feature sequence must have at least {min} frames, got {found}")]
    TooShort { min: usize, found: usize },
    #[error("invalid rate {0} Hz")]
    InvalidRate(f64),
    #[error("ragged CSV: row {row} has {found} columns, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("audio clip of {samples} samples is shorter than one {window}-sample analysis window")]
    ShortClip { samples: usize, window: usize },
    #[error("invalid extractor configuration: {0}")]
    Config(&'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("feature i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A `T × F` matrix of per-frame audio features at `rate_hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f64>,
    rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(data: Array2<f64>, rate_hz: f64) -> Result<Self, FeatureError> {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(FeatureError::InvalidRate(rate_hz));
        }
        if data.nrows() == 0 {
            return Err(FeatureError::TooShort { min: 1, found: 0 });
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureError::NonFinite { row, col });
        }
        Ok(Self { data, rate_hz })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.rate_hz
    }
}

/// Encodes a feature sequence as an `EMOF` byte stream.
pub fn write_features<W: Write>(seq: &FeatureSequence, mut out: W) -> Result<(), FeatureError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + seq.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.rate_hz as f32).to_le_bytes());
    for &v in seq.data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, FeatureError> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let rate = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() < expected {
        return Err(FeatureError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FeatureError::TrailingBytes(bytes.len() - expected));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).expect("shape checked above");
    FeatureSequence::new(data, rate)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence, FeatureError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    write_features(seq, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Reads a headerless CSV of `T` rows by `F` columns.
pub fn read_feature_csv(path: impl AsRef<Path>, rate_hz: f64) -> Result<FeatureSequence, FeatureError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(FeatureError::Ragged { row, expected, found: record.len() });
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| FeatureError::NonFinite { row, col })?;
            values.push(v);
        }
        rows += 1;
    }
    let data = Array2::from_shape_vec((rows, width.unwrap_or(0)), values).expect("rectangular");
    FeatureSequence::new(data, rate_hz)
}

/// Linearly resamples every feature column onto a `dst_rate` grid.
///
/// The output has `round(T * dst_rate / src_rate)` frames and its first and
/// last frames coincide with the input's, so no value is extrapolated.
pub fn resample_features(seq: &FeatureSequence, dst_rate: f64) -> Result<FeatureSequence, FeatureError> {
    if !(dst_rate.is_finite() && dst_rate > 0.0) {
        return Err(FeatureError::InvalidRate(dst_rate));
    }
    let t_in = seq.frames();
    if t_in < 2 {
        return Err(FeatureError::TooShort { min: 2, found: t_in });
    }
    let t_out = ((t_in as f64 * dst_rate / seq.rate_hz).round() as usize).max(1);
    let src = &seq.data;
    let mut out = Array2::zeros((t_out, seq.width()));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let pos = if t_out > 1 {
            (t * (t_in - 1)) as f64 / (t_out - 1) as f64
        } else {
            0.0
        };
        let i0 = (pos.floor() as usize).min(t_in - 1);
        if i0 == t_in - 1 {
            row.assign(&src.row(i0));
            continue;
        }
        let frac = pos - i0 as f64;
        for ((o, &a), &b) in row.iter_mut().zip(src.row(i0)).zip(src.row(i0 + 1)) {
            *o = (a + frac * (b - a)).clamp(a.min(b), a.max(b));
        }
    }
    FeatureSequence::new(out, dst_rate)
}

/// A mono audio clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::InvalidRate(0.0));
        }
        if samples.is_empty() {
            return Err(FeatureError::ShortClip { samples: 0, window: 1 });
        }
        Ok(Self { samples, sample_rate })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FallbackConfig {
    /// Samples between frame starts; `sample_rate / 50` yields 50 Hz output.
    pub frame_hop: usize,
    /// Analysis window length in samples (Hann windowed).
    pub window: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
}

impl FallbackConfig {
    /// 25 ms windows, 20 ms hop at the given sample rate.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            frame_hop: (sample_rate / 50) as usize,
            window: (sample_rate as usize * 25) / 1000,
            n_mels: 40,
            n_coeffs: 13,
        }
    }
}

const LOG_FLOOR: f64 = 1e-10;

/// Power spectrum of a frame zero-padded to `n_fft` (`n_fft / 2 + 1` bins).
pub struct PowerSpectrum {
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl PowerSpectrum {
    pub fn new(n_fft: usize) -> Self {
        Self { n_fft, fft: FftPlanner::new().plan_fft_forward(n_fft) }
    }

    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = (0..self.n_fft)
            .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft / 2 + 1` bins, 0 Hz to Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            bank[[m, b]] = w;
        }
    }
    bank
}

/// Orthonormal DCT-II matrix, `n_out × n_in`.
fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
    })
}

/// Log-mel cepstral features at `sample_rate / frame_hop` Hz.
///
/// Frame `t` analyses samples `[t * hop, t * hop + window)`, zero-padded past
/// the clip end; `T = floor(samples / hop)`. Band energies are floored at
/// `1e-10` before the natural log.
pub fn extract_fallback_features(clip: &AudioClip, cfg: &FallbackConfig) -> Result<FeatureSequence, FeatureError> {
    if cfg.frame_hop == 0 || cfg.window == 0 {
        return Err(FeatureError::Config("hop and window must be positive"));
    }
    if cfg.n_mels == 0 || cfg.n_coeffs == 0 || cfg.n_coeffs > cfg.n_mels {
        return Err(FeatureError::Config("need 0 < n_coeffs <= n_mels"));
    }
    if clip.samples.len() < cfg.window {
        return Err(FeatureError::ShortClip { samples: clip.samples.len(), window: cfg.window });
    }
    let n_fft = cfg.window.next_power_of_two();
    let spectrum = PowerSpectrum::new(n_fft);
    let bank = mel_filterbank(cfg.n_mels, n_fft, clip.sample_rate as f64);
    let dct = dct_matrix(cfg.n_coeffs, cfg.n_mels);
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos())
        .collect();

    let frames = clip.samples.len() / cfg.frame_hop;
    let mut out = Array2::zeros((frames, cfg.n_coeffs));
    let mut frame = vec![0.0; cfg.window];
    for t in 0..frames {
        let start = t * cfg.frame_hop;
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = clip.samples.get(start + i).copied().unwrap_or(0.0) * hann[i];
        }
        let power = Array1::from(spectrum.compute(&frame));
        let log_mel = bank.dot(&power).mapv(|e| e.max(LOG_FLOOR).ln());
        out.row_mut(t).assign(&dct.dot(&log_mel));
    }
    FeatureSequence::new(out, clip.sample_rate as f64 / cfg.frame_hop as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(rows: usize, cols: usize, rate: f64, f: impl Fn(usize, usize) -> f64) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c)), rate).unwrap()
    }

    #[test]
    fn header_echo_and_bitwise_round_trip() {
        let s = seq(50, 768, 50.0, |r, c| ((r * 31 + c * 7) % 97) as f32 as f64 * 0.013);
        let mut bytes = Vec::new();
        write_features(&s, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 20 + 50 * 768 * 4);
        let back = decode_features(&bytes).unwrap();
        assert_eq!((back.frames(), back.width(), back.rate_hz()), (50, 768, 50.0));
        let mut again = Vec::new();
        write_features(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let s = seq(4, 3, 50.0, |r, c| (r + c) as f64);
        let mut bytes = Vec::new();
        write_features(&s, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(decode_features(&bytes), Err(FeatureError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_version_and_nan_are_rejected() {
        let s = seq(2, 2, 50.0, |_, _| 1.0);
        let mut bytes = Vec::new();
        write_features(&s, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(FeatureError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_features(&bad), Err(FeatureError::UnsupportedVersion(9))));
        let mut bad = bytes.clone();
        bad[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&bad), Err(FeatureError::NonFinite { row: 0, col: 0 })));
        bytes.push(0);
        assert!(matches!(decode_features(&bytes), Err(FeatureError::TrailingBytes(1))));
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, "1,2,3\n4, 5 ,6\n").unwrap();
        let s = read_feature_csv(&path, 50.0).unwrap();
        assert_eq!(s.data(), &array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        std::fs::write(&path, "1,2,3\n4,5\n").unwrap();
        assert!(read_feature_csv(&path, 50.0).is_err());
    }

    #[test]
    fn resample_50_to_60_frame_count_and_linear_column() {
        let s = seq(50, 2, 50.0, |r, c| if c == 0 { r as f64 } else { 3.25 });
        let out = resample_features(&s, 60.0).unwrap();
        assert_eq!(out.frames(), 60);
        assert_eq!(out.rate_hz(), 60.0);
        for t in 0..60 {
            assert_eq!(out.data()[[t, 0]], t as f64 * 49.0 / 59.0);
            assert_eq!(out.data()[[t, 1]], 3.25);
        }
    }

    #[test]
    fn resample_identity_and_errors() {
        let s = seq(17, 3, 50.0, |r, c| ((r * 13 + c) as f64).sin());
        assert_eq!(resample_features(&s, 50.0).unwrap(), s);
        let one = seq(1, 3, 50.0, |_, _| 0.0);
        assert!(matches!(resample_features(&one, 60.0), Err(FeatureError::TooShort { .. })));
        assert!(matches!(resample_features(&s, 0.0), Err(FeatureError::InvalidRate(_))));
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.4..0.4)).collect()
    }

    #[test]
    fn one_second_at_16k_gives_50_frames() {
        let clip = AudioClip::new(noise(16000, 1), 16000).unwrap();
        let cfg = FallbackConfig::for_rate(16000);
        assert_eq!(cfg.frame_hop, 320);
        let f = extract_fallback_features(&clip, &cfg).unwrap();
        assert_eq!((f.frames(), f.width(), f.rate_hz()), (50, 13, 50.0));
    }

    #[test]
    fn silence_gives_identical_frames() {
        let clip = AudioClip::new(vec![0.0; 8000], 16000).unwrap();
        let f = extract_fallback_features(&clip, &FallbackConfig::for_rate(16000)).unwrap();
        for t in 1..f.frames() {
            assert_eq!(f.data().row(t), f.data().row(0));
        }
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.1; 100], 16000).unwrap();
        assert!(matches!(
            extract_fallback_features(&clip, &FallbackConfig::for_rate(16000)),
            Err(FeatureError::ShortClip { .. })
        ));
    }

    #[test]
    fn doubling_amplitude_only_shifts_c0() {
        let samples = noise(16000, 2);
        let cfg = FallbackConfig::for_rate(16000);
        let a = extract_fallback_features(&AudioClip::new(samples.clone(), 16000).unwrap(), &cfg).unwrap();
        let doubled: Vec<f64> = samples.iter().map(|s| 2.0 * s).collect();
        let b = extract_fallback_features(&AudioClip::new(doubled, 16000).unwrap(), &cfg).unwrap();
        // orthonormal DCT: a uniform ln 4 shift over n_mels bands lands on c0 as sqrt(n_mels)·ln 4
        let expected = (cfg.n_mels as f64).sqrt() * 4f64.ln();
        for t in 0..a.frames() {
            assert!((b.data()[[t, 0]] - a.data()[[t, 0]] - expected).abs() < 1e-9);
            for k in 1..cfg.n_coeffs {
                assert!((b.data()[[t, k]] - a.data()[[t, k]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn power_spectrum_matches_direct_dft() {
        let frame = noise(400, 3);
        let n = 512;
        let fast = PowerSpectrum::new(n).compute(&frame);
        for (k, &p) in fast.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let direct = re * re + im * im;
            assert!((p - direct).abs() <= 1e-9 * direct.max(1.0), "bin {k}");
        }
    }

    #[test]
    fn every_mel_filter_has_support() {
        let bank = mel_filterbank(40, 512, 16000.0);
        for row in bank.rows() {
            assert!(row.sum() > 0.0);
        }
    }
}
