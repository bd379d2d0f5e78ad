//! Framewise 26-dimensional audio descriptors: zero-crossing rate, spectral
//! centroid/bandwidth/rolloff, mean chroma, RMS energy and 20 MFCCs.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AudioSignal;
use crate::model::FrameClock;

pub const AUDIO_FEATURE_DIM: usize = 26;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("invalid analysis config: {0}")]
    Config(String),
    #[error("window length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("window has {got} samples, extractor expects {expected}")]
    WindowLength { got: usize, expected: usize },
    #[error("empty audio signal")]
    EmptySignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioFeatureConfig {
    pub window: usize,
    pub hop: usize,
    pub rolloff_fraction: f64,
    pub mel_bands: usize,
    pub mfcc_count: usize,
    pub log_floor: f64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self { window: 2048, hop: 512, rolloff_fraction: 0.85, mel_bands: 40, mfcc_count: 20, log_floor: 1e-10 }
    }
}

impl AudioFeatureConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.hop == 0 || self.window < self.hop {
            return Err(AudioError::Config(format!("need window >= hop >= 1 (window {}, hop {})", self.window, self.hop)));
        }
        if !self.window.is_power_of_two() {
            return Err(AudioError::NotPowerOfTwo(self.window));
        }
        if !(self.rolloff_fraction > 0.0 && self.rolloff_fraction <= 1.0) {
            return Err(AudioError::Config(format!("rolloff fraction {} outside (0, 1]", self.rolloff_fraction)));
        }
        if self.mfcc_count + 6 != AUDIO_FEATURE_DIM || self.mel_bands < self.mfcc_count {
            return Err(AudioError::Config(format!(
                "{} MFCCs over {} mel bands does not give a {AUDIO_FEATURE_DIM}-dim vector",
                self.mfcc_count, self.mel_bands
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(AudioError::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// One analysis window: the raw (zero-padded) slice and its Hann-tapered copy.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisWindow {
    pub start: usize,
    pub raw: Vec<f64>,
    pub tapered: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatureFrame {
    pub zcr: f64,
    pub spectral_centroid: f64,
    pub spectral_bandwidth: f64,
    pub spectral_rolloff: f64,
    pub chroma_mean: f64,
    pub rmse: f64,
    pub mfcc: [f64; 20],
}

impl AudioFeatureFrame {
    pub fn to_array(&self) -> [f64; AUDIO_FEATURE_DIM] {
        let mut out = [0.0; AUDIO_FEATURE_DIM];
        out[..6].copy_from_slice(&[
            self.zcr,
            self.spectral_centroid,
            self.spectral_bandwidth,
            self.spectral_rolloff,
            self.chroma_mean,
            self.rmse,
        ]);
        out[6..].copy_from_slice(&self.mfcc);
        out
    }

    pub fn from_array(v: &[f64; AUDIO_FEATURE_DIM]) -> Self {
        let mut mfcc = [0.0; 20];
        mfcc.copy_from_slice(&v[6..]);
        Self {
            zcr: v[0],
            spectral_centroid: v[1],
            spectral_bandwidth: v[2],
            spectral_rolloff: v[3],
            chroma_mean: v[4],
            rmse: v[5],
            mfcc,
        }
    }
}

/// Column names in feature-vector order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> =
        ["zcr", "spectral_centroid", "spectral_bandwidth", "spectral_rolloff", "chroma_mean", "rmse"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    names.extend((0..20).map(|i| format!("mfcc{i}")));
    names
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect()
}

/// Slices starting at every multiple of `hop`, `ceil(len / hop)` of them, the
/// tail zero-padded to `window` samples.
pub fn analysis_frames(signal: &AudioSignal, window: usize, hop: usize) -> Result<Vec<AnalysisWindow>, AudioError> {
    if hop == 0 || window < hop {
        return Err(AudioError::Config(format!("need window >= hop >= 1 (window {window}, hop {hop})")));
    }
    let len = signal.samples.len();
    if len == 0 {
        return Err(AudioError::EmptySignal);
    }
    let taper = hann(window);
    Ok((0..len.div_ceil(hop))
        .map(|k| {
            let start = k * hop;
            let mut raw = vec![0.0; window];
            let end = (start + window).min(len);
            raw[..end - start].copy_from_slice(&signal.samples[start..end]);
            let tapered = raw.iter().zip(&taper).map(|(x, w)| x * w).collect();
            AnalysisWindow { start, raw, tapered }
        })
        .collect())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the non-negative FFT bins, spanning 0 Hz to Nyquist.
fn mel_filterbank(bands: usize, window: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = window / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / window as f64;
                    let rise = (f - lo) / (mid - lo);
                    let fall = (hi - f) / (hi - mid);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `count` coefficients.
fn dct_ii(input: &[f64], count: usize) -> Vec<f64> {
    let n = input.len() as f64;
    (0..count)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Fraction of adjacent sample pairs with strictly opposite signs.
pub fn zero_crossing_rate(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let crossings = samples.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    crossings as f64 / (samples.len() - 1) as f64
}

/// Computes feature vectors for windows of one fixed length at one sample rate.
pub struct AudioFeatureExtractor {
    config: AudioFeatureConfig,
    sample_rate: f64,
    fft: Arc<dyn Fft<f64>>,
    mel: Vec<Vec<f64>>,
    pitch_class: Vec<Option<usize>>,
}

impl AudioFeatureExtractor {
    pub fn new(config: AudioFeatureConfig, sample_rate: u32) -> Result<Self, AudioError> {
        config.validate()?;
        if sample_rate == 0 {
            return Err(AudioError::Config("sample rate must be positive".into()));
        }
        let sr = sample_rate as f64;
        let fft = FftPlanner::new().plan_fft_forward(config.window);
        let mel = mel_filterbank(config.mel_bands, config.window, sr);
        let pitch_class = (0..config.window / 2 + 1)
            .map(|k| {
                let f = k as f64 * sr / config.window as f64;
                // A0 and up; lower bins carry no usable pitch.
                (f >= 27.5).then(|| {
                    let midi = 69.0 + 12.0 * (f / 440.0).log2();
                    (midi.round() as i64).rem_euclid(12) as usize
                })
            })
            .collect();
        Ok(Self { config, sample_rate: sr, fft, mel, pitch_class })
    }

    pub fn config(&self) -> &AudioFeatureConfig {
        &self.config
    }

    /// Bin magnitudes `|X(k)|` for k = 0..=N/2 of an already tapered window.
    pub fn magnitude_spectrum(&self, tapered: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = tapered.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[..tapered.len() / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    pub fn feature_vector(&self, window: &AnalysisWindow) -> Result<AudioFeatureFrame, AudioError> {
        let n = self.config.window;
        if window.raw.len() != n || window.tapered.len() != n {
            return Err(AudioError::WindowLength { got: window.raw.len(), expected: n });
        }
        let zcr = zero_crossing_rate(&window.raw);
        let rmse = (window.raw.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();

        let mag = self.magnitude_spectrum(&window.tapered);
        let freq = |k: usize| k as f64 * self.sample_rate / n as f64;
        let total: f64 = mag.iter().sum();
        let (centroid, bandwidth, rolloff) = if total > 0.0 {
            let centroid = mag.iter().enumerate().map(|(k, m)| freq(k) * m).sum::<f64>() / total;
            let spread =
                mag.iter().enumerate().map(|(k, m)| (freq(k) - centroid).powi(2) * m).sum::<f64>() / total;
            let threshold = self.config.rolloff_fraction * total;
            let mut cumulative = 0.0;
            let mut rolloff = freq(mag.len() - 1);
            for (k, m) in mag.iter().enumerate() {
                cumulative += m;
                if cumulative >= threshold {
                    rolloff = freq(k);
                    break;
                }
            }
            (centroid, spread.sqrt(), rolloff)
        } else {
            (0.0, 0.0, 0.0)
        };

        let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
        let mut chroma = [0.0; 12];
        for (p, pc) in power.iter().zip(&self.pitch_class) {
            if let Some(pc) = pc {
                chroma[*pc] += p;
            }
        }
        let peak = chroma.iter().cloned().fold(0.0, f64::max);
        let chroma_mean = if peak > 0.0 { chroma.iter().map(|c| c / peak).sum::<f64>() / 12.0 } else { 0.0 };

        let log_mel: Vec<f64> = self
            .mel
            .iter()
            .map(|filter| filter.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>().max(self.config.log_floor).ln())
            .collect();
        let mut mfcc = [0.0; 20];
        mfcc.copy_from_slice(&dct_ii(&log_mel, self.config.mfcc_count));

        Ok(AudioFeatureFrame {
            zcr,
            spectral_centroid: centroid,
            spectral_bandwidth: bandwidth,
            spectral_rolloff: rolloff,
            chroma_mean,
            rmse,
            mfcc,
        })
    }

    /// Feature vectors for every analysis window of the signal, in order.
    pub fn analyze(&self, signal: &AudioSignal) -> Result<Vec<AudioFeatureFrame>, AudioError> {
        let windows = analysis_frames(signal, self.config.window, self.config.hop)?;
        windows.par_iter().map(|w| self.feature_vector(w)).collect()
    }
}

/// Averages analysis-window vectors into one vector per video frame.
///
/// A window belongs to the video frame whose interval contains its start time;
/// frames that receive no window repeat the previous frame's vector (the first
/// window's vector if none precedes).
pub fn framewise_audio(
    signal: &AudioSignal,
    clock: &FrameClock,
    config: &AudioFeatureConfig,
) -> Result<Vec<AudioFeatureFrame>, AudioError> {
    let extractor = AudioFeatureExtractor::new(config.clone(), signal.sample_rate)?;
    let vectors = extractor.analyze(signal)?;
    let starts: Vec<usize> = (0..vectors.len()).map(|k| k * config.hop).collect();
    Ok(pool_to_frames(&vectors, &starts, signal.sample_rate, clock))
}

/// Means of the vectors whose start sample lands in each video frame.
pub fn pool_to_frames(
    vectors: &[AudioFeatureFrame],
    starts: &[usize],
    sample_rate: u32,
    clock: &FrameClock,
) -> Vec<AudioFeatureFrame> {
    let mut sums = vec![[0.0; AUDIO_FEATURE_DIM]; clock.frame_count];
    let mut counts = vec![0usize; clock.frame_count];
    for (v, &s) in vectors.iter().zip(starts) {
        let frame = (s as f64 * clock.frame_rate / sample_rate as f64 + 1e-9).floor() as usize;
        if frame >= clock.frame_count {
            continue;
        }
        for (acc, x) in sums[frame].iter_mut().zip(v.to_array()) {
            *acc += x;
        }
        counts[frame] += 1;
    }
    let mut out = Vec::with_capacity(clock.frame_count);
    let mut previous = vectors.first().copied();
    for (sum, count) in sums.iter().zip(&counts) {
        let frame = if *count == 0 {
            previous.expect("signal has at least one window")
        } else {
            AudioFeatureFrame::from_array(&sum.map(|s| s / *count as f64))
        };
        previous = Some(frame);
        out.push(frame);
    }
    out
}
