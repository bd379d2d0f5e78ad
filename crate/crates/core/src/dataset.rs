//! Per-frame feature tables, fixed-length windows, splits and class statistics.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Skeleton;
use crate::audio::AUDIO_FEATURE_DIM;
use crate::model::{FearLevel, ModelError};

pub const SKELETON_FEATURES: usize = 33;
pub const PHYSIO_FEATURES: usize = 2;
pub const FEATURE_DIM: usize = SKELETON_FEATURES + AUDIO_FEATURE_DIM + PHYSIO_FEATURES;
pub const DEFAULT_SEQUENCE_LENGTH: usize = 16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("session `{session}` has {frames} frames, fewer than the window length {length}")]
    SessionTooShort { session: String, frames: usize, length: usize },
    #[error("window length and stride must be positive")]
    InvalidWindow,
    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("need at least {needed} {unit} to split, have {have}")]
    TooFew { needed: usize, have: usize, unit: &'static str },
    #[error("split produced an empty {0} set")]
    EmptySplit(&'static str),
    #[error("frame {frame}: {reason}")]
    InvalidFrame { frame: usize, reason: String },
    #[error("dataset file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("sessions disagree on feature width ({0} vs {1})")]
    WidthMismatch(usize, usize),
    #[error(transparent)]
    Level(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One frame's fused features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub frame_index: usize,
    pub skeleton: Vec<f64>,
    pub audio: [f64; AUDIO_FEATURE_DIM],
    pub heart_rate: f64,
    pub breath_rate: f64,
    pub annotator_levels: Vec<u8>,
    pub label: FearLevel,
}

impl FeatureFrame {
    pub fn width(&self) -> usize {
        self.skeleton.len() + AUDIO_FEATURE_DIM + PHYSIO_FEATURES
    }

    /// Skeleton, audio, heart rate, breath rate.
    pub fn values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        v.extend_from_slice(&self.skeleton);
        v.extend_from_slice(&self.audio);
        v.push(self.heart_rate);
        v.push(self.breath_rate);
        v
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if let Some(i) = self.values().iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidFrame { frame: self.frame_index, reason: format!("feature {i} is not finite") });
        }
        Ok(())
    }
}

/// All frames of one session plus the annotator roster behind its label columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTable {
    pub session_id: String,
    pub roster: Vec<String>,
    pub frames: Vec<FeatureFrame>,
}

pub fn dataset_header(skeleton_width: usize, roster: &[String]) -> Vec<String> {
    let mut cols = vec!["frame_index".to_string()];
    cols.extend((0..skeleton_width).map(|i| format!("s{i}")));
    cols.extend((0..AUDIO_FEATURE_DIM).map(|i| format!("a{i}")));
    cols.push("hr".into());
    cols.push("br".into());
    cols.extend(roster.iter().map(|a| format!("label_{a}")));
    cols.push("label_fused".into());
    cols
}

impl SessionTable {
    pub fn skeleton_width(&self) -> usize {
        self.frames.first().map_or(SKELETON_FEATURES, |f| f.skeleton.len())
    }

    pub fn labels(&self) -> Vec<FearLevel> {
        self.frames.iter().map(|f| f.label).collect()
    }

    /// Writes the dataset CSV, preceded by `# key=value` comment lines.
    pub fn write_csv<W: Write>(&self, out: W, comments: &[(&str, &str)]) -> Result<(), DatasetError> {
        let mut out = std::io::BufWriter::new(out);
        for (k, v) in comments {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "{}", dataset_header(self.skeleton_width(), &self.roster).join(","))?;
        for f in &self.frames {
            write!(out, "{}", f.frame_index)?;
            for v in f.values() {
                write!(out, ",{v}")?;
            }
            for l in &f.annotator_levels {
                write!(out, ",{l}")?;
            }
            writeln!(out, ",{}", f.label)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a file written by [`SessionTable::write_csv`]; comment lines are
    /// returned as key/value pairs.
    pub fn read_csv<R: Read>(session_id: &str, input: R) -> Result<(Self, Vec<(String, String)>), DatasetError> {
        let mut comments = Vec::new();
        let mut header: Option<Vec<String>> = None;
        let mut frames = Vec::new();
        let (mut skeleton_width, mut roster) = (0, Vec::new());
        for (n, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            let parse_err = |reason: String| DatasetError::Parse { line: lineno, reason };
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.trim().split_once('=') {
                    comments.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some(cols) = &header else {
                let h: Vec<String> = cells.iter().map(|s| s.to_string()).collect();
                skeleton_width = h.iter().filter(|c| is_indexed(c, 's')).count();
                roster = h
                    .iter()
                    .filter_map(|c| c.strip_prefix("label_"))
                    .filter(|c| *c != "fused")
                    .map(str::to_string)
                    .collect();
                if h != dataset_header(skeleton_width, &roster) {
                    return Err(parse_err(format!("unexpected header `{line}`")));
                }
                header = Some(h);
                continue;
            };
            if cells.len() != cols.len() {
                return Err(parse_err(format!("expected {} columns, found {}", cols.len(), cells.len())));
            }
            let num = |i: usize| -> Result<f64, DatasetError> {
                cells[i].parse::<f64>().map_err(|_| parse_err(format!("column {}: not a number: `{}`", cols[i], cells[i])))
            };
            let level = |i: usize| -> Result<u8, DatasetError> {
                cells[i]
                    .parse::<u8>()
                    .ok()
                    .filter(|l| *l <= FearLevel::MAX)
                    .ok_or_else(|| parse_err(format!("column {}: invalid level `{}`", cols[i], cells[i])))
            };
            let frame_index = cells[0].parse::<usize>().map_err(|_| parse_err(format!("invalid frame index `{}`", cells[0])))?;
            let skeleton = (1..=skeleton_width).map(num).collect::<Result<Vec<_>, _>>()?;
            let mut audio = [0.0; AUDIO_FEATURE_DIM];
            for (k, slot) in audio.iter_mut().enumerate() {
                *slot = num(1 + skeleton_width + k)?;
            }
            let p = 1 + skeleton_width + AUDIO_FEATURE_DIM;
            let annotator_levels = (p + 2..p + 2 + roster.len()).map(level).collect::<Result<Vec<_>, _>>()?;
            let frame = FeatureFrame {
                frame_index,
                skeleton,
                audio,
                heart_rate: num(p)?,
                breath_rate: num(p + 1)?,
                annotator_levels,
                label: FearLevel::new(level(cols.len() - 1)?)?,
            };
            frame.validate()?;
            frames.push(frame);
        }
        if header.is_none() {
            return Err(DatasetError::Parse { line: 0, reason: "missing header row".into() });
        }
        Ok((SessionTable { session_id: session_id.to_string(), roster, frames }, comments))
    }
}

fn is_indexed(col: &str, prefix: char) -> bool {
    col.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// A session's features as a dense row-major `frames x width` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMatrix {
    pub session_id: String,
    pub width: usize,
    pub values: Vec<f64>,
    pub labels: Vec<FearLevel>,
}

impl SessionMatrix {
    pub fn from_table(table: &SessionTable) -> Self {
        let width = table.frames.first().map_or(FEATURE_DIM, FeatureFrame::width);
        Self {
            session_id: table.session_id.clone(),
            width,
            values: table.frames.iter().flat_map(|f| f.values()).collect(),
            labels: table.labels(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.width..(frame + 1) * self.width]
    }
}

/// A window of consecutive frames inside one session, labelled by its first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSample {
    pub session: usize,
    pub start: usize,
    pub length: usize,
    pub target: FearLevel,
}

impl SequenceSample {
    /// The `length x width` features, row-major.
    pub fn features<'a>(&self, sessions: &'a [SessionMatrix]) -> &'a [f64] {
        let m = &sessions[self.session];
        &m.values[self.start * m.width..(self.start + self.length) * m.width]
    }
}

/// Windows every session; `session` indices refer to positions in `sessions`.
pub fn window(sessions: &[SessionMatrix], length: usize, stride: usize) -> Result<Vec<SequenceSample>, DatasetError> {
    if length == 0 || stride == 0 {
        return Err(DatasetError::InvalidWindow);
    }
    let mut out = Vec::new();
    for (s, m) in sessions.iter().enumerate() {
        let n = m.frame_count();
        if n < length {
            return Err(DatasetError::SessionTooShort { session: m.session_id.clone(), frames: n, length });
        }
        out.extend((0..=n - length).step_by(stride).map(|start| SequenceSample { session: s, start, length, target: m.labels[start] }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    PerSample,
    PerSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.1, test: 0.1, seed: 0, mode: SplitMode::PerSample }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidFractions(f));
        }
        Ok(())
    }
}

/// Indices into the sample list, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

fn floor_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Per-sample counts: validation and test get `floor(n * fraction)`, training the rest.
pub fn per_sample_counts(n: usize, spec: &SplitSpec) -> [usize; 3] {
    let val = floor_count(n, spec.validation);
    let test = floor_count(n, spec.test);
    [n - val - test, val, test]
}

/// Per-session counts. Training gets the largest count not above
/// `S * train` that still leaves a session each for validation and test;
/// validation gets `floor(S * validation)` (at least 1) within what is left;
/// test takes the remainder.
pub fn per_session_counts(sessions: usize, spec: &SplitSpec) -> Result<[usize; 3], DatasetError> {
    if sessions < 3 {
        return Err(DatasetError::TooFew { needed: 3, have: sessions, unit: "sessions" });
    }
    let train = floor_count(sessions, spec.train).min(sessions - 2);
    if train == 0 {
        return Err(DatasetError::EmptySplit("train"));
    }
    let val = floor_count(sessions, spec.validation).max(1).min(sessions - train - 1);
    Ok([train, val, sessions - train - val])
}

pub fn split(samples: &[SequenceSample], spec: &SplitSpec) -> Result<Split, DatasetError> {
    spec.validate()?;
    if samples.len() < MIN_SPLIT_SAMPLES {
        return Err(DatasetError::TooFew { needed: MIN_SPLIT_SAMPLES, have: samples.len(), unit: "samples" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = match spec.mode {
        SplitMode::PerSample => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            let [train, val, _] = per_sample_counts(samples.len(), spec);
            Split {
                train: order[..train].to_vec(),
                validation: order[train..train + val].to_vec(),
                test: order[train + val..].to_vec(),
            }
        }
        SplitMode::PerSession => {
            let ids: BTreeSet<usize> = samples.iter().map(|s| s.session).collect();
            let mut ids: Vec<usize> = ids.into_iter().collect();
            ids.shuffle(&mut rng);
            let [train, val, _] = per_session_counts(ids.len(), spec)?;
            let part = |range: &[usize]| -> Vec<usize> {
                let set: BTreeSet<usize> = range.iter().copied().collect();
                (0..samples.len()).filter(|&i| set.contains(&samples[i].session)).collect()
            };
            Split { train: part(&ids[..train]), validation: part(&ids[train..train + val]), test: part(&ids[train + val..]) }
        }
    };
    for (name, set) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        if set.is_empty() {
            return Err(DatasetError::EmptySplit(name));
        }
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Per-column z-scoring. Columns with zero spread are only centred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    /// Statistics over the distinct frames covered by `samples` (population std).
    pub fn fit(sessions: &[SessionMatrix], samples: &[SequenceSample]) -> Self {
        let width = sessions.first().map_or(FEATURE_DIM, |m| m.width);
        let mut covered: BTreeSet<(usize, usize)> = BTreeSet::new();
        for s in samples {
            covered.extend((s.start..s.start + s.length).map(|f| (s.session, f)));
        }
        if covered.is_empty() {
            return Self::identity(width);
        }
        let n = covered.len() as f64;
        let mut mean = vec![0.0; width];
        for &(s, f) in &covered {
            for (m, v) in mean.iter_mut().zip(sessions[s].row(f)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for &(s, f) in &covered {
            for ((acc, v), m) in var.iter_mut().zip(sessions[s].row(f)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply(&self, matrix: &mut SessionMatrix) {
        for row in matrix.values.chunks_mut(matrix.width) {
            self.apply_row(row);
        }
    }
}

/// Mean and sample standard deviation (0 when fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { count: 0, mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { count: n, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: u8,
    pub count: usize,
    pub ratio: f64,
    pub heart_rate: Moments,
    pub breath_rate: Moments,
    pub acceleration: Option<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub total: usize,
    pub levels: Vec<LevelStats>,
    /// Counts for non-fear (0) and fear (1..=5).
    pub binary_counts: [usize; 2],
    pub binary_ratios: [f64; 2],
}

/// Labels and raw signals of one session, as input to [`class_stats`].
#[derive(Debug, Clone, Copy)]
pub struct LabeledSignals<'a> {
    pub labels: &'a [FearLevel],
    pub physio: &'a [(f64, f64)],
    /// Aligned skeletons; acceleration statistics are skipped without them.
    pub keypoints: Option<&'a [Skeleton]>,
}

/// Mean over joints of the second-difference magnitude at each interior
/// frame, in coordinate units per frame squared.
pub fn acceleration_magnitudes(keypoints: &[Skeleton]) -> Vec<f64> {
    if keypoints.len() < 3 {
        return Vec::new();
    }
    keypoints
        .windows(3)
        .map(|w| {
            let total: f64 = (0..w[0].len())
                .map(|j| {
                    (0..3).map(|a| w[2][j][a] - 2.0 * w[1][j][a] + w[0][j][a]).map(|d| d * d).sum::<f64>().sqrt()
                })
                .sum();
            total / w[0].len() as f64
        })
        .collect()
}

pub fn class_stats(sessions: &[LabeledSignals<'_>]) -> ClassStats {
    let mut counts = [0usize; 6];
    let mut hr: [Vec<f64>; 6] = Default::default();
    let mut br: [Vec<f64>; 6] = Default::default();
    let mut acc: [Vec<f64>; 6] = Default::default();
    let with_accel = !sessions.is_empty() && sessions.iter().all(|s| s.keypoints.is_some());
    for s in sessions {
        for (l, (h, b)) in s.labels.iter().zip(s.physio) {
            let k = l.value() as usize;
            counts[k] += 1;
            hr[k].push(*h);
            br[k].push(*b);
        }
        if let Some(kp) = s.keypoints.filter(|_| with_accel) {
            for (i, a) in acceleration_magnitudes(kp).into_iter().enumerate() {
                if let Some(l) = s.labels.get(i + 1) {
                    acc[l.value() as usize].push(a);
                }
            }
        }
    }
    let total: usize = counts.iter().sum();
    let ratio = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    let levels = (0..6)
        .map(|k| LevelStats {
            level: k as u8,
            count: counts[k],
            ratio: ratio(counts[k]),
            heart_rate: Moments::of(&hr[k]),
            breath_rate: Moments::of(&br[k]),
            acceleration: with_accel.then(|| Moments::of(&acc[k])),
        })
        .collect();
    let fear = total - counts[0];
    ClassStats { total, levels, binary_counts: [counts[0], fear], binary_ratios: [ratio(counts[0]), ratio(fear)] }
}

impl ClassStats {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>5} {:>9} {:>8} {:>9} {:>8} {:>9} {:>8} {:>10} {:>10}\n",
            "level", "frames", "ratio%", "hr_mean", "hr_std", "br_mean", "br_std", "acc_mean", "acc_std"
        );
        for l in &self.levels {
            let (am, asd) = match l.acceleration {
                Some(a) => (format!("{:.6}", a.mean), format!("{:.6}", a.std)),
                None => ("-".into(), "-".into()),
            };
            s.push_str(&format!(
                "{:>5} {:>9} {:>8.2} {:>9.2} {:>8.2} {:>9.2} {:>8.2} {:>10} {:>10}\n",
                l.level,
                l.count,
                100.0 * l.ratio,
                l.heart_rate.mean,
                l.heart_rate.std,
                l.breath_rate.mean,
                l.breath_rate.std,
                am,
                asd
            ));
        }
        s.push_str(&format!(
            "total {} frames; binary non-fear {:.2}% / fear {:.2}%\n",
            self.total,
            100.0 * self.binary_ratios[0],
            100.0 * self.binary_ratios[1]
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(id: &str, frames: usize, labels: impl Fn(usize) -> u8) -> SessionMatrix {
        SessionMatrix {
            session_id: id.into(),
            width: 2,
            values: (0..frames).flat_map(|i| [i as f64, 1.0]).collect(),
            labels: (0..frames).map(|i| FearLevel::new(labels(i)).unwrap()).collect(),
        }
    }

    #[test]
    fn window_counts() {
        let w = window(&[matrix("a", 300, |_| 0)], 16, 1).unwrap();
        assert_eq!(w.len(), 285);
        assert_eq!(window(&[matrix("a", 16, |_| 0)], 16, 1).unwrap().len(), 1);
        assert!(matches!(window(&[matrix("a", 15, |_| 0)], 16, 1), Err(DatasetError::SessionTooShort { .. })));
        assert_eq!(window(&[matrix("a", 20, |_| 0)], 16, 2).unwrap().len(), 3);
    }

    #[test]
    fn window_target_is_first_frame_label() {
        let sessions = [matrix("a", 40, |i| (i % 6) as u8)];
        for s in window(&sessions, 16, 1).unwrap() {
            assert_eq!(s.target, sessions[0].labels[s.start]);
            let f = s.features(&sessions);
            assert_eq!(f.len(), 32);
            assert_eq!(f[0], s.start as f64);
        }
    }

    fn samples(n: usize) -> Vec<SequenceSample> {
        (0..n).map(|i| SequenceSample { session: i % 7, start: i, length: 1, target: FearLevel::NONE }).collect()
    }

    #[test]
    fn per_sample_sizes_and_determinism() {
        let spec = SplitSpec { seed: 3, ..SplitSpec::default() };
        let s = split(&samples(100), &spec).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split(&samples(100), &spec).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_ne!(s, split(&samples(100), &SplitSpec { seed: 4, ..spec }).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split(&samples(9), &SplitSpec::default()), Err(DatasetError::TooFew { .. })));
        let zero_test = SplitSpec { train: 0.95, validation: 0.05, test: 0.0, ..SplitSpec::default() };
        assert!(matches!(split(&samples(20), &zero_test), Err(DatasetError::EmptySplit("test"))));
        let bad = SplitSpec { train: 0.5, ..SplitSpec::default() };
        assert!(matches!(split(&samples(20), &bad), Err(DatasetError::InvalidFractions(_))));
    }

    #[test]
    fn per_session_keeps_sessions_whole() {
        let spec = SplitSpec { mode: SplitMode::PerSession, seed: 1, ..SplitSpec::default() };
        let s = split(&samples(70), &spec).unwrap();
        let sessions = |idx: &[usize]| idx.iter().map(|&i| i % 7).collect::<BTreeSet<_>>();
        let (a, b, c) = (sessions(&s.train), sessions(&s.validation), sessions(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!((a.len(), b.len(), c.len()), (5, 1, 1));
    }

    /// Brute force: among assignments giving every split at least one session,
    /// take the largest train count not above `S * train`, then the largest
    /// validation count not above `max(1, S * validation)`.
    fn enumerate_counts(sessions: usize, spec: &SplitSpec) -> Option<[usize; 3]> {
        let mut best: Option<[usize; 3]> = None;
        for t in 1..sessions {
            for v in 1..sessions {
                if t + v >= sessions {
                    continue;
                }
                let ok_t = t as f64 <= sessions as f64 * spec.train + 1e-9;
                let ok_v = v as f64 <= (sessions as f64 * spec.validation).max(1.0) + 1e-9;
                if ok_t && ok_v && best.is_none_or(|b| (t, v) > (b[0], b[1])) {
                    best = Some([t, v, sessions - t - v]);
                }
            }
        }
        best
    }

    #[test]
    fn per_session_counts_match_enumeration() {
        let fractions = [(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.5, 0.3, 0.2), (0.7, 0.15, 0.15), (0.34, 0.33, 0.33)];
        for (tr, va, te) in fractions {
            let spec = SplitSpec { train: tr, validation: va, test: te, ..SplitSpec::default() };
            for s in 3..40 {
                let got = per_session_counts(s, &spec).ok();
                assert_eq!(got, enumerate_counts(s, &spec), "{s} sessions, {tr}/{va}/{te}");
            }
        }
        assert_eq!(per_session_counts(3, &SplitSpec::default()).unwrap(), [1, 1, 1]);
        assert!(per_session_counts(2, &SplitSpec::default()).is_err());
    }

    #[test]
    fn normalizer_uses_covered_frames_once() {
        let sessions = [matrix("a", 10, |_| 0)];
        let samples = [
            SequenceSample { session: 0, start: 0, length: 3, target: FearLevel::NONE },
            SequenceSample { session: 0, start: 1, length: 3, target: FearLevel::NONE },
        ];
        let n = Normalizer::fit(&sessions, &samples);
        // Frames 0..4 in column 0: mean 1.5, population std sqrt(1.25).
        assert_eq!(n.mean, vec![1.5, 1.0]);
        assert!((n.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(n.std[1], 1.0);
        let mut m = sessions[0].clone();
        n.apply(&mut m);
        assert_eq!(m.row(0)[1], 0.0);
    }

    #[test]
    fn stats_ratios_and_moments() {
        let labels: Vec<FearLevel> = [0, 0, 0, 1, 1, 5].iter().map(|&l| FearLevel::new(l).unwrap()).collect();
        let physio = [(90.0, 15.0), (92.0, 15.0), (94.0, 15.0), (100.0, 16.0), (104.0, 18.0), (110.0, 20.0)];
        let st = class_stats(&[LabeledSignals { labels: &labels, physio: &physio, keypoints: None }]);
        assert_eq!(st.total, 6);
        assert_eq!(st.levels[0].count, 3);
        assert!((st.levels.iter().map(|l| l.ratio).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(st.levels[0].heart_rate.mean, 92.0);
        assert_eq!(st.levels[0].heart_rate.std, 2.0);
        assert_eq!(st.levels[5].heart_rate.std, 0.0);
        assert_eq!(st.binary_counts, [3, 3]);
        assert!(st.levels[0].acceleration.is_none());
    }

    #[test]
    fn single_level_is_all_of_it() {
        let labels = vec![FearLevel::new(2).unwrap(); 7];
        let st = class_stats(&[LabeledSignals { labels: &labels, physio: &[(1.0, 1.0); 7], keypoints: None }]);
        assert_eq!(st.levels[2].ratio, 1.0);
    }

    #[test]
    fn acceleration_of_uniform_motion_is_zero_and_of_parabola_constant() {
        let linear: Vec<Skeleton> = (0..5).map(|t| [[t as f64, 0.0, 0.0]; 25]).collect();
        assert!(acceleration_magnitudes(&linear).iter().all(|a| *a == 0.0));
        let parabola: Vec<Skeleton> = (0..5).map(|t| [[0.0, (t * t) as f64, 0.0]; 25]).collect();
        assert_eq!(acceleration_magnitudes(&parabola), vec![2.0; 3]);
    }

    #[test]
    fn csv_round_trip() {
        let frame = |i: usize| FeatureFrame {
            frame_index: i,
            skeleton: (0..SKELETON_FEATURES).map(|k| k as f64 * 0.1 + i as f64).collect(),
            audio: [0.25; AUDIO_FEATURE_DIM],
            heart_rate: 91.5,
            breath_rate: 15.0,
            annotator_levels: vec![1, 2],
            label: FearLevel::new(2).unwrap(),
        };
        let t = SessionTable { session_id: "s".into(), roster: vec!["a".into(), "b".into()], frames: (0..3).map(frame).collect() };
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &[("config_hash", "abc")]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# config_hash=abc\nframe_index,s0,"));
        assert!(text.lines().nth(1).unwrap().ends_with(",a25,hr,br,label_a,label_b,label_fused"));
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 1 + FEATURE_DIM + 3);
        let (back, comments) = SessionTable::read_csv("s", &buf[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(comments, vec![("config_hash".to_string(), "abc".to_string())]);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let t = "frame_index,s0,".to_string();
        assert!(SessionTable::read_csv("s", t.as_bytes()).is_err());
        assert!(SessionTable::read_csv("s", "".as_bytes()).is_err());
    }
}
