//! PCM audio to 26-dimensional log mel filterbank features.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::numerics::Matrix;

pub const CORPUS_SAMPLE_RATE: u32 = 8000;
pub const ENERGY_FLOOR: f64 = 1e-10;
const FBNK_MAGIC: &[u8; 4] = b"FBNK";
const FBNK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: sample rate {got} Hz, expected {expected} Hz")]
    SampleRate {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("{path}: unsupported audio format: {reason}")]
    Format { path: String, reason: String },
    #[error("utterance `{utterance_id}` has {samples} samples, fewer than one {needed}-sample window")]
    TooShort {
        utterance_id: String,
        samples: usize,
        needed: usize,
    },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("{path}: bad feature file: {reason}")]
    Cache { path: String, reason: String },
    #[error("feature matrix `{0}` is empty or contains non-finite values")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub pre_emphasis: f64,
    pub num_filters: usize,
    pub fft_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_ms: 25.0,
            shift_ms: 10.0,
            pre_emphasis: 0.97,
            num_filters: 26,
            fft_size: 256,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<(), FeatureError> {
        if !(self.window_ms > self.shift_ms && self.shift_ms > 0.0) {
            return Err(FeatureError::Config(format!(
                "need window_ms > shift_ms > 0, got {} / {}",
                self.window_ms, self.shift_ms
            )));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(FeatureError::Config(format!(
                "pre_emphasis {} outside [0, 1)",
                self.pre_emphasis
            )));
        }
        if self.num_filters == 0 {
            return Err(FeatureError::Config("num_filters must be >= 1".into()));
        }
        let win = self.window_samples(sample_rate);
        if !self.fft_size.is_power_of_two() || self.fft_size < win {
            return Err(FeatureError::Config(format!(
                "fft_size {} must be a power of two >= window of {win} samples",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.shift_ms / 1000.0).round() as usize
    }
}

/// Per-utterance `T × D` log filterbank energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Matrix,
    pub utterance_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: Matrix, utterance_id: impl Into<String>) -> Result<Self, FeatureError> {
        let utterance_id = utterance_id.into();
        if frames.rows() == 0 || !frames.is_finite() {
            return Err(FeatureError::Invalid(utterance_id));
        }
        Ok(FeatureMatrix {
            frames,
            utterance_id,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Reads a mono 16-bit PCM WAV at the corpus rate of 8 kHz.
pub fn read_wav(path: &Path) -> Result<AudioBuffer, FeatureError> {
    let shown = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => FeatureError::Io {
            path: shown.clone(),
            source,
        },
        other => FeatureError::Format {
            path: shown.clone(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(FeatureError::Format {
            path: shown,
            reason: format!("{:?} {}-bit, expected 16-bit PCM", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(FeatureError::Format {
            path: shown,
            reason: format!("{} channels, expected mono", spec.channels),
        });
    }
    if spec.sample_rate != CORPUS_SAMPLE_RATE {
        return Err(FeatureError::SampleRate {
            path: shown,
            expected: CORPUS_SAMPLE_RATE,
            got: spec.sample_rate,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| FeatureError::Format {
            path: shown,
            reason: e.to_string(),
        })?;
    Ok(AudioBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes samples in `[-1, 1]` as mono 16-bit PCM.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| FeatureError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(io_err)?;
    }
    w.finalize().map_err(io_err)
}

/// `y[0] = x[0]`, `y[t] = x[t] − alpha·x[t−1]`.
pub fn pre_emphasize(samples: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    if let Some(&first) = samples.first() {
        out.push(first);
    }
    for w in samples.windows(2) {
        out.push(w[1] - alpha * w[0]);
    }
    out
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Number of full windows: `floor((n − win)/shift) + 1`, or 0 if `n < win`.
pub fn frame_count(n: usize, win: usize, shift: usize) -> usize {
    if n < win {
        0
    } else {
        (n - win) / shift + 1
    }
}

/// Splits the signal into Hamming-windowed frames.
pub fn frame_signal(
    samples: &[f64],
    sample_rate: u32,
    cfg: &FeatureConfig,
    utterance_id: &str,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let win = cfg.window_samples(sample_rate);
    let shift = cfg.shift_samples(sample_rate);
    let count = frame_count(samples.len(), win, shift);
    if count == 0 {
        return Err(FeatureError::TooShort {
            utterance_id: utterance_id.to_string(),
            samples: samples.len(),
            needed: win,
        });
    }
    let window = hamming(win);
    Ok((0..count)
        .map(|f| {
            samples[f * shift..f * shift + win]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters spanning 0 Hz to Nyquist, evaluated at FFT bin
/// frequencies.
#[derive(Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
    fft_size: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFilterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFilterbank")
            .field("num_filters", &self.weights.len())
            .field("fft_size", &self.fft_size)
            .finish()
    }
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.num_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.num_filters + 1) as f64))
            .collect();
        let bins = cfg.fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
        let weights = (0..cfg.num_filters)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        MelFilterbank {
            weights,
            centers_hz: edges[1..=cfg.num_filters].to_vec(),
            fft_size: cfg.fft_size,
            fft,
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Magnitude spectrum of the zero-padded frame, bins `0..=fft_size/2`.
    pub fn magnitude_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for (b, &s) in buf.iter_mut().zip(frame) {
            b.re = s;
        }
        self.fft.process(&mut buf);
        buf[..self.fft_size / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    /// Log filter energies from a precomputed magnitude spectrum.
    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| {
                let e: f64 = w.iter().zip(spectrum).map(|(a, b)| a * b).sum();
                e.max(ENERGY_FLOOR).ln()
            })
            .collect()
    }

    pub fn log_energies(&self, frame: &[f64]) -> Vec<f64> {
        self.apply(&self.magnitude_spectrum(frame))
    }
}

/// Log filterbank of one windowed frame.
pub fn log_filterbank(frame: &[f64], cfg: &FeatureConfig, sample_rate: u32) -> Vec<f64> {
    MelFilterbank::new(cfg, sample_rate).log_energies(frame)
}

/// Log filterbank energies before mean normalization.
pub fn raw_log_filterbank(
    audio: &AudioBuffer,
    cfg: &FeatureConfig,
    utterance_id: &str,
) -> Result<Matrix, FeatureError> {
    cfg.validate(audio.sample_rate)?;
    let emphasized = pre_emphasize(&audio.samples, cfg.pre_emphasis);
    let frames = frame_signal(&emphasized, audio.sample_rate, cfg, utterance_id)?;
    let bank = MelFilterbank::new(cfg, audio.sample_rate);
    let rows: Vec<Vec<f64>> = frames.iter().map(|f| bank.log_energies(f)).collect();
    Ok(Matrix::from_rows(&rows))
}

/// Subtracts the per-column mean in place.
pub fn mean_normalize(m: &mut Matrix) {
    let t = m.rows() as f64;
    for c in 0..m.cols() {
        let mean = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / t;
        for r in 0..m.rows() {
            let v = m.get(r, c) - mean;
            m.set(r, c, v);
        }
    }
}

/// Pre-emphasis, framing, log filterbank and per-utterance mean
/// normalization.
pub fn extract_features(
    audio: &AudioBuffer,
    cfg: &FeatureConfig,
    utterance_id: &str,
) -> Result<FeatureMatrix, FeatureError> {
    let mut m = raw_log_filterbank(audio, cfg, utterance_id)?;
    mean_normalize(&mut m);
    FeatureMatrix::new(m, utterance_id)
}

/// Writes the binary feature cache: `"FBNK"`, version, T, D (u32 LE) then
/// `T×D` little-endian f32 values.
pub fn write_feature_file(path: &Path, feats: &FeatureMatrix) -> Result<(), FeatureError> {
    let io = |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut buf = Vec::with_capacity(16 + feats.frames.data().len() * 4);
    buf.extend_from_slice(FBNK_MAGIC);
    buf.extend_from_slice(&FBNK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim() as u32).to_le_bytes());
    for &v in feats.frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_feature_file(path: &Path, utterance_id: &str) -> Result<FeatureMatrix, FeatureError> {
    let shown = path.display().to_string();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|source| FeatureError::Io {
        path: shown.clone(),
        source,
    })?)
    .read_to_end(&mut bytes)
    .map_err(|source| FeatureError::Io {
        path: shown.clone(),
        source,
    })?;
    let bad = |reason: String| FeatureError::Cache {
        path: shown.clone(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..4] != FBNK_MAGIC {
        return Err(bad("missing FBNK header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, t, d) = (word(4), word(8) as usize, word(12) as usize);
    if version != FBNK_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if bytes.len() != 16 + t * d * 4 {
        return Err(bad(format!(
            "expected {} payload bytes for {t}x{d}, found {}",
            t * d * 4,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let frames = Matrix::from_vec(t, d, data).expect("length checked");
    FeatureMatrix::new(frames, utterance_id)
}
