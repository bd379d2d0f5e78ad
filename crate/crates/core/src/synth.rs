//! Seeded synthetic sessions with planted ground truth, and small fixtures.
//!
//! A session has smooth keypoint trajectories with random gaps, a tone
//! mixture whose loudness rises inside fear spans, physiology sampled every
//! two seconds that rises with the fear level, and two annotators `a` and `b`
//! rating the planted spans.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AUDIO_FEATURE_DIM;
use crate::config::SynthConfig;
use crate::dataset::{FeatureFrame, SessionTable, SKELETON_FEATURES};
use crate::ingest::{self, AnnotationSpan, AudioSignal, IngestError, KeypointFrame, PhysioSample};
use crate::labels::fuse;
use crate::model::{FearLevel, FrameClock, SessionManifest, StreamPaths, MANIFEST_SCHEMA_VERSION, NUM_JOINTS};

pub const PHYSIO_PERIOD_MS: i64 = 2000;
pub const ANNOTATORS: [&str; 2] = ["a", "b"];

/// Frames per fear level (0..=5) out of 100,000 in the reference recordings;
/// the level-0 share is 58.18%.
pub const REFERENCE_LEVEL_COUNTS: [usize; 6] = [58_184, 29_394, 8_082, 3_250, 1_050, 40];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic session parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub start_ms: i64,
    pub end_ms: i64,
    /// Frames `first_frame..end_frame` lie inside the span.
    pub first_frame: usize,
    pub end_frame: usize,
    pub level_a: u8,
    pub level_b: u8,
    pub fused: u8,
    pub unanimous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub session_id: String,
    pub seed: u64,
    pub clock: FrameClock,
    pub spans: Vec<PlantedSpan>,
    /// Expected fused level of every frame.
    pub frame_levels: Vec<u8>,
    /// Number of joint observations removed.
    pub missing_joints: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub manifest: SessionManifest,
    pub keypoints: Vec<KeypointFrame>,
    pub audio: AudioSignal,
    pub physio: Vec<PhysioSample>,
    pub annotations: Vec<AnnotationSpan>,
    pub truth: GroundTruth,
}

fn validate(cfg: &SynthConfig) -> Result<(), SynthError> {
    let bad = |m: String| Err(SynthError::Invalid(m));
    if !(cfg.seconds >= 2.0 && cfg.seconds.is_finite()) {
        return bad(format!("duration {} s is shorter than 2 s", cfg.seconds));
    }
    if !(cfg.fps > 0.0 && cfg.fps <= 1000.0) {
        return bad(format!("frame rate {} outside (0, 1000]", cfg.fps));
    }
    if cfg.sample_rate < 1000 {
        return bad(format!("sample rate {} below 1000 Hz", cfg.sample_rate));
    }
    if !(0.0..1.0).contains(&cfg.gap_fraction) {
        return bad(format!("gap fraction {} outside [0, 1)", cfg.gap_fraction));
    }
    if !(0.0..=1.0).contains(&cfg.agreement) {
        return bad(format!("agreement {} outside [0, 1]", cfg.agreement));
    }
    Ok(())
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// One span per four seconds, each placed at random inside its own segment.
fn plant_spans(rng: &mut ChaCha8Rng, clock: &FrameClock, agreement: f64) -> Vec<PlantedSpan> {
    let n = clock.frame_count;
    let count = ((clock.duration_ms() / 4000) as usize).max(1);
    let segment = n / count;
    let mut spans = Vec::with_capacity(count);
    for k in 0..count {
        let seg_start = k * segment;
        let len = ((segment as f64 * rng.random_range(0.25..0.6)) as usize).max(2);
        let slack = segment.saturating_sub(len + 1).max(1);
        let first = seg_start + 1 + rng.random_range(0..slack);
        let end = (first + len).min(seg_start + segment);
        let level_a: u8 = rng.random_range(1..=5);
        let unanimous = rng.random::<f64>() < agreement;
        let level_b = if unanimous {
            level_a
        } else if level_a == 5 {
            4
        } else {
            level_a + 1
        };
        spans.push(PlantedSpan {
            start_ms: clock.tick(first),
            end_ms: clock.tick(end),
            first_frame: first,
            end_frame: end,
            level_a,
            level_b,
            fused: fuse(&[level_a, level_b]).expect("valid levels").value(),
            unanimous,
        });
    }
    spans
}

fn level_at(spans: &[PlantedSpan], t_ms: f64) -> f64 {
    spans
        .iter()
        .find(|s| (s.start_ms as f64) <= t_ms && t_ms < s.end_ms as f64)
        .map_or(0.0, |s| s.fused as f64)
}

/// Generates a complete session. Identical inputs give identical output.
pub fn generate(session_id: &str, seed: u64, cfg: &SynthConfig) -> Result<SyntheticSession, SynthError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame_count = (cfg.seconds * cfg.fps + 1e-9).floor() as usize;
    if frame_count < 4 {
        return Err(SynthError::Invalid(format!("{frame_count} frames; need at least 4")));
    }
    let clock = FrameClock::new(0, cfg.fps, frame_count).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let spans = plant_spans(&mut rng, &clock, cfg.agreement);

    let mut frame_levels = vec![0u8; frame_count];
    for s in &spans {
        frame_levels[s.first_frame..s.end_frame].iter_mut().for_each(|l| *l = s.fused);
    }

    // Keypoints: per coordinate a base offset plus three sinusoids, with an
    // extra tremor whose amplitude follows the fear level.
    struct Wave {
        amp: f64,
        freq: f64,
        phase: f64,
    }
    let mut coords: Vec<(f64, Vec<Wave>, f64)> = Vec::with_capacity(3 * NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        for axis in 0..3 {
            let base = if axis == 1 { 1.6 - 0.06 * j as f64 } else { rng.random_range(-0.4..0.4) };
            let waves = (0..3)
                .map(|_| Wave { amp: rng.random_range(0.01..0.08), freq: rng.random_range(0.1..1.5), phase: rng.random_range(0.0..2.0 * PI) })
                .collect();
            coords.push((base, waves, rng.random_range(0.0..2.0 * PI)));
        }
    }
    let mut missing_joints = 0;
    let keypoints: Vec<KeypointFrame> = (0..frame_count)
        .map(|i| {
            let t = clock.tick(i);
            let secs = t as f64 / 1000.0;
            let level = frame_levels[i] as f64;
            let mut joints = [None; NUM_JOINTS];
            for (j, slot) in joints.iter_mut().enumerate() {
                let mut p = [0.0; 3];
                for (axis, v) in p.iter_mut().enumerate() {
                    let (base, waves, tremor_phase) = &coords[3 * j + axis];
                    let smooth: f64 = waves.iter().map(|w| w.amp * (2.0 * PI * w.freq * secs + w.phase).sin()).sum();
                    let tremor = 0.004 * level * (2.0 * PI * 4.0 * secs + tremor_phase).sin();
                    *v = round_to(base + smooth + tremor, 6);
                }
                let drop = i > 0 && i + 1 < frame_count && rng.random::<f64>() < cfg.gap_fraction;
                if drop {
                    missing_joints += 1;
                } else {
                    *slot = Some(p);
                }
            }
            KeypointFrame { timestamp: t, joints }
        })
        .collect();

    // Audio: three tones and light noise; louder and noisier at higher levels.
    let tones: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(150.0..1500.0), rng.random_range(0.02..0.05))).collect();
    let sr = cfg.sample_rate as f64;
    let n_samples = (cfg.seconds * sr).round() as usize;
    let samples = (0..n_samples)
        .map(|n| {
            let secs = n as f64 / sr;
            let level = level_at(&spans, secs * 1000.0);
            let tone: f64 = tones.iter().map(|(f, a)| a * (2.0 * PI * f * secs).sin()).sum();
            let noise = rng.random_range(-1.0..1.0) * 0.01 * (1.0 + level);
            (tone * (1.0 + 0.8 * level) + noise).clamp(-1.0, 1.0)
        })
        .collect();
    // Quantize as the WAV file will, so the in-memory signal matches a re-read.
    let audio = AudioSignal {
        sample_rate: cfg.sample_rate,
        samples: quantize(samples),
    };

    let end_ms = clock.end_ms().max((cfg.seconds * 1000.0).round() as i64);
    let mut physio = Vec::new();
    let mut t = 0;
    loop {
        let level = level_at(&spans, t as f64);
        physio.push(PhysioSample {
            timestamp: t,
            heart_rate: round_to(88.0 + 3.0 * level + rng.random_range(-1.0..1.0), 2),
            breath_rate: round_to(15.0 + 0.6 * level + rng.random_range(-0.3..0.3), 2),
        });
        if t >= end_ms {
            break;
        }
        t += PHYSIO_PERIOD_MS;
    }

    let mut annotations = Vec::with_capacity(2 * spans.len());
    for (who, pick) in [(ANNOTATORS[0], 0), (ANNOTATORS[1], 1)] {
        for s in &spans {
            let level = if pick == 0 { s.level_a } else { s.level_b };
            annotations.push(AnnotationSpan { annotator_id: who.to_string(), start: s.start_ms, end: s.end_ms, level });
        }
    }

    let manifest = SessionManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        session_id: session_id.to_string(),
        game_id: (seed % 3) as u8 + 1,
        clock,
        audio_start_ms: 0,
        streams: StreamPaths {
            keypoints: "keypoints.csv".into(),
            audio: "audio.wav".into(),
            audio_secondary: None,
            physio: "physio.csv".into(),
            annotations: "annotations.jsonl".into(),
        },
    };
    let truth = GroundTruth { session_id: session_id.to_string(), seed, clock, spans, frame_levels, missing_joints };
    Ok(SyntheticSession { manifest, keypoints, audio, physio, annotations, truth })
}

fn quantize(samples: Vec<f64>) -> Vec<f64> {
    samples
        .into_iter()
        .map(|s| ((s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64)) / 32768.0)
        .collect()
}

/// Writes `manifest.json`, the four stream files and `truth.json` into `dir`;
/// returns the manifest path.
pub fn write_session(dir: &Path, session: &SyntheticSession) -> Result<PathBuf, SynthError> {
    std::fs::create_dir_all(dir)?;
    let s = &session.manifest.streams;
    ingest::write_keypoints(BufWriter::new(File::create(dir.join(&s.keypoints))?), &session.keypoints)?;
    ingest::write_audio(BufWriter::new(File::create(dir.join(&s.audio))?), &session.audio)?;
    ingest::write_physio(BufWriter::new(File::create(dir.join(&s.physio))?), &session.physio)?;
    ingest::write_annotations(BufWriter::new(File::create(dir.join(&s.annotations))?), &session.annotations)?;
    write_json(&dir.join("truth.json"), &session.truth)?;
    let manifest_path = dir.join(crate::pipeline::MANIFEST_FILE);
    write_json(&manifest_path, &session.manifest)?;
    Ok(manifest_path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Linearly separable windows: every frame of a class-`c` sample is that
/// class's random prototype plus small noise. One single-window session per
/// sample, labelled `i % classes`.
pub fn separable_fixture(seed: u64, samples: usize, classes: usize, length: usize) -> Vec<SessionTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = SKELETON_FEATURES + AUDIO_FEATURE_DIM + 2;
    let prototypes: Vec<Vec<f64>> = (0..classes).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..samples)
        .map(|i| {
            let class = i % classes;
            let frames = (0..length)
                .map(|f| {
                    let v: Vec<f64> = prototypes[class].iter().map(|p| round_to(p + rng.random_range(-0.1..0.1), 6)).collect();
                    let mut audio = [0.0; AUDIO_FEATURE_DIM];
                    audio.copy_from_slice(&v[SKELETON_FEATURES..SKELETON_FEATURES + AUDIO_FEATURE_DIM]);
                    FeatureFrame {
                        frame_index: f,
                        skeleton: v[..SKELETON_FEATURES].to_vec(),
                        audio,
                        heart_rate: v[width - 2],
                        breath_rate: v[width - 1],
                        annotator_levels: vec![class as u8; 2],
                        label: FearLevel::new(class as u8).expect("class below 6"),
                    }
                })
                .collect();
            SessionTable { session_id: format!("fixture-{i:03}"), roster: ANNOTATORS.map(String::from).to_vec(), frames }
        })
        .collect()
}

/// Labels with the reference level distribution, in level order.
pub fn reference_label_fixture() -> Vec<FearLevel> {
    REFERENCE_LEVEL_COUNTS
        .iter()
        .enumerate()
        .flat_map(|(level, &count)| std::iter::repeat_n(FearLevel::new(level as u8).expect("level below 6"), count))
        .collect()
}
