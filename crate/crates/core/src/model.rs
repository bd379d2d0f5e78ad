//! Shared domain types: the frame clock every modality is resampled onto,
//! the fear-level vocabulary, and the per-session manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current version of the session manifest document.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Number of skeleton joints per frame.
pub const NUM_JOINTS: usize = 25;

/// Joint names in column order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow", "LWrist", "MidHip",
    "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle", "REye", "LEye", "REar", "LEar",
    "LBigToe", "LSmallToe", "LHeel", "RBigToe", "RSmallToe", "RHeel",
];

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("frame index {index} out of range (frame_count {frame_count})")]
    FrameOutOfRange { index: usize, frame_count: usize },
    #[error("frame rate must be finite and in (0, 1000], got {0}")]
    InvalidFrameRate(f64),
    #[error("fear level {0} outside [0, 5]")]
    InvalidLevel(i64),
    #[error("game id {0} outside {{1, 2, 3}}")]
    InvalidGame(u8),
    #[error("unsupported manifest schema version {0}")]
    UnsupportedSchema(u32),
}

/// Maps video-frame indices to millisecond timestamps.
///
/// Frame rates above 1000 fps are rejected: integer-millisecond ticks would
/// collide and the clock would stop being strictly increasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameClock {
    pub start_ms: i64,
    pub frame_rate: f64,
    pub frame_count: usize,
}

impl FrameClock {
    pub fn new(start_ms: i64, frame_rate: f64, frame_count: usize) -> Result<Self, ModelError> {
        if !frame_rate.is_finite() || frame_rate <= 0.0 || frame_rate > 1000.0 {
            return Err(ModelError::InvalidFrameRate(frame_rate));
        }
        Ok(Self { start_ms, frame_rate, frame_count })
    }

    /// Clock covering `[start_ms, end_ms)` with as many whole frames as fit.
    pub fn spanning(start_ms: i64, end_ms: i64, frame_rate: f64) -> Result<Self, ModelError> {
        let span = (end_ms - start_ms).max(0) as f64;
        let count = (span * frame_rate / 1000.0 + 1e-9).floor() as usize;
        Self::new(start_ms, frame_rate, count)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        Self::new(self.start_ms, self.frame_rate, self.frame_count).map(|_| ())
    }

    /// Millisecond timestamp of frame `index`.
    pub fn frame_to_time(&self, index: usize) -> Result<i64, ModelError> {
        if index >= self.frame_count {
            return Err(ModelError::FrameOutOfRange { index, frame_count: self.frame_count });
        }
        Ok(self.tick(index))
    }

    /// Unchecked tick time; valid for any index, including one past the end.
    pub fn tick(&self, index: usize) -> i64 {
        self.start_ms + (index as f64 * 1000.0 / self.frame_rate).round() as i64
    }

    /// Exact (fractional) start time of frame `index` in milliseconds.
    pub fn exact_time(&self, index: usize) -> f64 {
        self.start_ms as f64 + index as f64 * 1000.0 / self.frame_rate
    }

    pub fn frame_period_ms(&self) -> f64 {
        1000.0 / self.frame_rate
    }

    /// End of the covered span (exclusive), rounded to milliseconds.
    pub fn end_ms(&self) -> i64 {
        self.tick(self.frame_count)
    }

    pub fn duration_ms(&self) -> i64 {
        self.end_ms() - self.start_ms
    }

    pub fn times(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.frame_count).map(|i| self.tick(i))
    }
}

/// Ordinal fear label: 0 is non-fear, 1..=5 increasing intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct FearLevel(u8);

impl FearLevel {
    pub const NONE: FearLevel = FearLevel(0);
    pub const MAX: u8 = 5;

    pub fn new(level: u8) -> Result<Self, ModelError> {
        if level > Self::MAX {
            return Err(ModelError::InvalidLevel(level as i64));
        }
        Ok(Self(level))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn binarize(self) -> BinaryFear {
        binarize(self)
    }

    pub fn all() -> impl Iterator<Item = FearLevel> {
        (0..=Self::MAX).map(FearLevel)
    }
}

impl TryFrom<i64> for FearLevel {
    type Error = ModelError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        if !(0..=Self::MAX as i64).contains(&value) {
            return Err(ModelError::InvalidLevel(value));
        }
        Ok(Self(value as u8))
    }
}

impl From<FearLevel> for u8 {
    fn from(level: FearLevel) -> u8 {
        level.0
    }
}

impl fmt::Display for FearLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fear / non-fear recode of a [`FearLevel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BinaryFear(u8);

impl BinaryFear {
    pub fn value(self) -> u8 {
        self.0
    }
}

pub fn binarize(level: FearLevel) -> BinaryFear {
    BinaryFear(u8::from(level.0 >= 1))
}

/// Paths of one session's raw streams, relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPaths {
    pub keypoints: PathBuf,
    pub audio: PathBuf,
    /// Optional second audio track, merged into `audio` by sample-wise mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_secondary: Option<PathBuf>,
    pub physio: PathBuf,
    pub annotations: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub schema_version: u32,
    pub session_id: String,
    pub game_id: u8,
    pub clock: FrameClock,
    /// Session time of the first audio sample.
    #[serde(default)]
    pub audio_start_ms: i64,
    pub streams: StreamPaths,
}

impl SessionManifest {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(ModelError::UnsupportedSchema(self.schema_version));
        }
        if !(1..=3).contains(&self.game_id) {
            return Err(ModelError::InvalidGame(self.game_id));
        }
        self.clock.validate()
    }

    /// Resolve a stream path against the directory holding the manifest.
    pub fn resolve(&self, base_dir: &Path, stream: &Path) -> PathBuf {
        if stream.is_absolute() {
            stream.to_path_buf()
        } else {
            base_dir.join(stream)
        }
    }
}
