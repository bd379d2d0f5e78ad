//! Puts every modality on the session's frame clock.

use std::io::Write;

use thiserror::Error;

use crate::ingest::{AudioSignal, KeypointFrame, PhysioSample};
use crate::model::{FrameClock, ModelError, SessionManifest, NUM_JOINTS};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("joint {joint} is never observed in the session")]
    UnrecoverableJoint { joint: usize },
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error("streams do not overlap (common span [{start}, {end}) ms)")]
    EmptyOverlap { start: i64, end: i64 },
    #[error(transparent)]
    Clock(#[from] ModelError),
}

pub type Skeleton = [[f64; 3]; NUM_JOINTS];

/// Streams resampled onto one clock; every per-frame vector has `clock.frame_count` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedStreams {
    pub clock: FrameClock,
    pub keypoints: Vec<Skeleton>,
    pub physio: Vec<(f64, f64)>,
    pub audio: AudioSignal,
}

/// Fills missing joints by linear interpolation in time between the nearest
/// observed neighbours, extending the first/last observation over leading and
/// trailing gaps.
pub fn interpolate_keypoints(frames: &[KeypointFrame]) -> Result<Vec<KeypointFrame>, AlignError> {
    let mut out = frames.to_vec();
    for joint in 0..NUM_JOINTS {
        let observed: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].joints[joint].is_some()).collect();
        let (&first, &last) = match (observed.first(), observed.last()) {
            (Some(f), Some(l)) => (f, l),
            _ if frames.is_empty() => continue,
            _ => return Err(AlignError::UnrecoverableJoint { joint }),
        };
        let lead = frames[first].joints[joint];
        for f in &mut out[..first] {
            f.joints[joint] = lead;
        }
        let trail = frames[last].joints[joint];
        for f in &mut out[last + 1..] {
            f.joints[joint] = trail;
        }
        for pair in observed.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b == a + 1 {
                continue;
            }
            let (pa, pb) = (frames[a].joints[joint].unwrap(), frames[b].joints[joint].unwrap());
            let (ta, tb) = (frames[a].timestamp as f64, frames[b].timestamp as f64);
            for (i, frame) in out.iter_mut().enumerate().take(b).skip(a + 1) {
                let w = (frames[i].timestamp as f64 - ta) / (tb - ta);
                frame.joints[joint] = Some(lerp3(pa, pb, w));
            }
        }
    }
    Ok(out)
}

fn lerp3(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [lerp(a[0], b[0], w), lerp(a[1], b[1], w), lerp(a[2], b[2], w)]
}

// Written so that equal endpoints return that value exactly.
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if a == b {
        a
    } else {
        a + (b - a) * w
    }
}

/// Linear interpolation between adjacent samples at every frame time; frames
/// outside the sampled range take the nearest sample.
pub fn resample_physio(samples: &[PhysioSample], clock: &FrameClock) -> Result<Vec<(f64, f64)>, AlignError> {
    if samples.is_empty() {
        return Err(AlignError::EmptyStream("physiology"));
    }
    let mut out = Vec::with_capacity(clock.frame_count);
    let mut k = 0;
    for t in clock.times() {
        while k + 1 < samples.len() && samples[k + 1].timestamp <= t {
            k += 1;
        }
        let s0 = samples[k];
        let v = if t <= s0.timestamp || k + 1 == samples.len() {
            (s0.heart_rate, s0.breath_rate)
        } else {
            let s1 = samples[k + 1];
            let w = (t - s0.timestamp) as f64 / (s1.timestamp - s0.timestamp) as f64;
            (lerp(s0.heart_rate, s1.heart_rate, w), lerp(s0.breath_rate, s1.breath_rate, w))
        };
        out.push(v);
    }
    Ok(out)
}

/// Time span `[start, end)` covered by a keypoint stream; the last frame is
/// taken to last one frame period.
pub fn keypoint_span(frames: &[KeypointFrame], frame_rate: f64) -> Option<(i64, i64)> {
    let first = frames.first()?.timestamp;
    let last = frames.last()?.timestamp;
    Some((first, last + (1000.0 / frame_rate).round() as i64))
}

pub fn physio_span(samples: &[PhysioSample]) -> Option<(i64, i64)> {
    Some((samples.first()?.timestamp, samples.last()?.timestamp))
}

pub fn audio_span(signal: &AudioSignal, start_ms: i64) -> Option<(i64, i64)> {
    if signal.samples.is_empty() {
        return None;
    }
    Some((start_ms, start_ms + signal.duration_ms().floor() as i64))
}

/// Index of the frame nearest to `t`; ties go to the earlier frame.
fn nearest_frame(frames: &[KeypointFrame], t: i64) -> usize {
    let idx = frames.partition_point(|f| f.timestamp < t);
    if idx == 0 {
        return 0;
    }
    if idx == frames.len() {
        return frames.len() - 1;
    }
    let before = t - frames[idx - 1].timestamp;
    let after = frames[idx].timestamp - t;
    if after < before {
        idx
    } else {
        idx - 1
    }
}

/// Trims the manifest clock to the common span of all streams and resamples
/// every modality onto it.
pub fn align_session(
    manifest: &SessionManifest,
    keypoints: &[KeypointFrame],
    physio: &[PhysioSample],
    audio: &AudioSignal,
) -> Result<AlignedStreams, AlignError> {
    let fps = manifest.clock.frame_rate;
    let kp = keypoint_span(keypoints, fps).ok_or(AlignError::EmptyStream("keypoint"))?;
    let ph = physio_span(physio).ok_or(AlignError::EmptyStream("physiology"))?;
    let au = audio_span(audio, manifest.audio_start_ms).ok_or(AlignError::EmptyStream("audio"))?;
    let declared = (manifest.clock.start_ms, manifest.clock.end_ms());

    let start = [kp.0, ph.0, au.0, declared.0].into_iter().max().unwrap();
    let end = [kp.1, ph.1, au.1, declared.1].into_iter().min().unwrap();
    let clock = if start == declared.0 && end == declared.1 {
        manifest.clock
    } else {
        FrameClock::spanning(start, end, fps)?
    };
    if clock.frame_count == 0 {
        return Err(AlignError::EmptyOverlap { start, end });
    }

    let filled = interpolate_keypoints(keypoints)?;
    let skeletons = clock
        .times()
        .map(|t| {
            let f = &filled[nearest_frame(&filled, t)];
            f.joints.map(|j| j.expect("interpolation fills every joint"))
        })
        .collect();

    let physio = resample_physio(physio, &clock)?;

    let rate = audio.sample_rate as f64;
    let to_sample = |t: i64| -> usize {
        (((t - manifest.audio_start_ms) as f64) * rate / 1000.0).round().max(0.0) as usize
    };
    let a0 = to_sample(clock.start_ms).min(audio.samples.len());
    let a1 = to_sample(clock.end_ms()).clamp(a0, audio.samples.len());
    let audio = AudioSignal { sample_rate: audio.sample_rate, samples: audio.samples[a0..a1].to_vec() };

    Ok(AlignedStreams { clock, keypoints: skeletons, physio, audio })
}

pub fn aligned_header() -> Vec<String> {
    let mut cols = vec!["frame_index".to_string()];
    for j in 0..NUM_JOINTS {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{axis}{j}"));
        }
    }
    cols.push("heart_rate".into());
    cols.push("breath_rate".into());
    cols
}

/// Writes the aligned-session CSV: `frame_index`, 75 keypoint columns, `heart_rate`, `breath_rate`.
pub fn write_aligned_csv<W: Write>(mut out: W, aligned: &AlignedStreams, comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(aligned_header()).map_err(std::io::Error::other)?;
    for (i, (sk, (hr, br))) in aligned.keypoints.iter().zip(&aligned.physio).enumerate() {
        let mut row = Vec::with_capacity(78);
        row.push(i.to_string());
        row.extend(sk.iter().flatten().map(|v| v.to_string()));
        row.push(hr.to_string());
        row.push(br.to_string());
        w.write_record(&row).map_err(std::io::Error::other)?;
    }
    w.flush()
}
