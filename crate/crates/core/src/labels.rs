//! Per-frame annotator levels and the voting rule that fuses them.
//!
//! A level wins outright when it holds strictly more than half of the votes.
//! Otherwise the fused level is the mean of all votes rounded half-up, and a
//! mean strictly between 0 and 1 becomes 1.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AnnotationSpan;
use crate::model::{FearLevel, FrameClock};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no annotator levels to fuse")]
    Empty,
    #[error("level {0} outside [0, 5]")]
    InvalidLevel(u8),
    #[error("need at least 2 annotators, have {0}")]
    InsufficientAnnotators(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    Majority,
    RoundedAverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedLabel {
    pub level: FearLevel,
    pub annotator_levels: Vec<u8>,
    pub rule: FusionRule,
}

/// Levels of every roster annotator at one frame (0 outside all spans).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameAnnotations {
    pub frame: usize,
    pub levels: Vec<u8>,
}

/// Nearest integer to `sum / count`, halves rounded up.
pub fn round_half_up(sum: u32, count: u32) -> u32 {
    (2 * sum + count) / (2 * count)
}

pub fn fuse_detailed(levels: &[u8]) -> Result<FusedLabel, FusionError> {
    if levels.is_empty() {
        return Err(FusionError::Empty);
    }
    if let Some(&bad) = levels.iter().find(|&&l| l > FearLevel::MAX) {
        return Err(FusionError::InvalidLevel(bad));
    }
    let mut counts = [0usize; 6];
    for &l in levels {
        counts[l as usize] += 1;
    }
    let n = levels.len();
    if let Some(winner) = (0..6).find(|&l| 2 * counts[l] > n) {
        return Ok(FusedLabel {
            level: FearLevel::new(winner as u8).expect("in range"),
            annotator_levels: levels.to_vec(),
            rule: FusionRule::Majority,
        });
    }
    let sum: u32 = levels.iter().map(|&l| l as u32).sum();
    let mut level = round_half_up(sum, n as u32);
    if sum > 0 && level == 0 {
        level = 1;
    }
    Ok(FusedLabel {
        level: FearLevel::new(level as u8).expect("mean of levels stays in range"),
        annotator_levels: levels.to_vec(),
        rule: FusionRule::RoundedAverage,
    })
}

/// Fused level for one frame's annotator votes.
pub fn fuse(levels: &[u8]) -> Result<FearLevel, FusionError> {
    fuse_detailed(levels).map(|f| f.level)
}

/// Expands spans to per-frame levels for each roster annotator. Frame `i`
/// at time `t` is covered by a span when `start <= t < end`.
pub fn spans_to_frames(spans: &[AnnotationSpan], clock: &FrameClock, roster: &[String]) -> Vec<FrameAnnotations> {
    let mut grid = vec![vec![0u8; roster.len()]; clock.frame_count];
    let column: BTreeMap<&str, usize> = roster.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    for span in spans {
        let Some(&col) = column.get(span.annotator_id.as_str()) else { continue };
        let first = first_frame_at_or_after(clock, span.start);
        let last = first_frame_at_or_after(clock, span.end);
        for row in &mut grid[first..last] {
            row[col] = span.level;
        }
    }
    grid.into_iter().enumerate().map(|(frame, levels)| FrameAnnotations { frame, levels }).collect()
}

fn first_frame_at_or_after(clock: &FrameClock, t: i64) -> usize {
    // Frame ticks are increasing, so binary search over the index range.
    let (mut lo, mut hi) = (0usize, clock.frame_count);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if clock.tick(mid) < t {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Sorted, de-duplicated annotator ids appearing in `spans`.
pub fn roster_of(spans: &[AnnotationSpan]) -> Vec<String> {
    let mut ids: Vec<String> = spans.iter().map(|s| s.annotator_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Per-frame annotator levels and their fusion for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedTimeline {
    pub roster: Vec<String>,
    pub annotator_levels: Vec<Vec<u8>>,
    pub fused: Vec<FearLevel>,
    pub sufficient: bool,
}

/// Fuses a session's spans; with fewer than two annotators the levels are
/// still produced (all from the available annotators) but flagged insufficient.
pub fn fuse_session(spans: &[AnnotationSpan], clock: &FrameClock, roster: &[String]) -> FusedTimeline {
    let frames = spans_to_frames(spans, clock, roster);
    let fused = frames
        .iter()
        .map(|f| if f.levels.is_empty() { FearLevel::NONE } else { fuse(&f.levels).expect("levels validated") })
        .collect();
    FusedTimeline {
        roster: roster.to_vec(),
        annotator_levels: frames.into_iter().map(|f| f.levels).collect(),
        fused,
        sufficient: roster.len() >= 2,
    }
}

impl FusedTimeline {
    pub fn require_sufficient(self) -> Result<Self, FusionError> {
        if self.sufficient {
            Ok(self)
        } else {
            Err(FusionError::InsufficientAnnotators(self.roster.len()))
        }
    }

    /// CSV: `frame_index`, one `label_<annotator>` column per roster entry, `label_fused`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let mut header = vec!["frame_index".to_string()];
        header.extend(self.roster.iter().map(|a| format!("label_{a}")));
        header.push("label_fused".into());
        writeln!(out, "{}", header.join(","))?;
        for (i, (levels, fused)) in self.annotator_levels.iter().zip(&self.fused).enumerate() {
            write!(out, "{i}")?;
            for l in levels {
                write!(out, ",{l}")?;
            }
            writeln!(out, ",{fused}")?;
        }
        Ok(())
    }
}
