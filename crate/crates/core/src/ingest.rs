//! Parsers for the raw per-session streams.
//!
//! Text formats are UTF-8 CSV with a mandatory header row (lines starting with
//! `#` are comments) or JSON Lines. Every parser has a `scan_*` form that keeps
//! going after a bad row and reports it, so `rows + errors == input rows`, and a
//! strict form that fails on the first reported error.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NUM_JOINTS;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("row {row}: {kind}")]
    Row { row: u64, kind: RowErrorKind },
    #[error("header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("missing header row")]
    MissingHeader,
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("malformed audio: {0}")]
    MalformedAudio(String),
    #[error("audio tracks differ in sample rate ({0} vs {1})")]
    SampleRateMismatch(u32, u32),
    #[error("empty audio signal")]
    EmptyAudio,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowErrorKind {
    #[error("expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
    #[error("column {column}: not a number: `{value}`")]
    NotNumeric { column: usize, value: String },
    #[error("column {column}: required value is empty")]
    Empty { column: usize },
    #[error("timestamp {timestamp} does not increase (previous {previous})")]
    NonIncreasingTimestamp { timestamp: i64, previous: i64 },
    #[error("negative {field}: {value}")]
    NegativeRate { field: &'static str, value: f64 },
    #[error("level {0} outside [1, 5]")]
    LevelOutOfRange(i64),
    #[error("empty span: start {start} >= end {end}")]
    EmptySpan { start: i64, end: i64 },
    #[error("span [{start}, {end}) of annotator `{annotator}` overlaps an earlier span")]
    Overlap { annotator: String, start: i64, end: i64 },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
}

/// A parsed row-by-row stream plus the rows that were rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan<T> {
    pub rows: Vec<T>,
    pub errors: Vec<(u64, RowErrorKind)>,
}

impl<T> Default for Scan<T> {
    fn default() -> Self {
        Self { rows: Vec::new(), errors: Vec::new() }
    }
}

impl<T> Scan<T> {
    pub fn into_result(self) -> Result<Vec<T>, IngestError> {
        match self.errors.into_iter().next() {
            Some((row, kind)) => Err(IngestError::Row { row, kind }),
            None => Ok(self.rows),
        }
    }
}

/// One video frame of 3-D skeleton keypoints; `None` marks a missing joint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub timestamp: i64,
    pub joints: [Option<[f64; 3]>; NUM_JOINTS],
}

impl KeypointFrame {
    pub fn complete(timestamp: i64, joints: [[f64; 3]; NUM_JOINTS]) -> Self {
        Self { timestamp, joints: joints.map(Some) }
    }

    pub fn is_complete(&self) -> bool {
        self.joints.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysioSample {
    pub timestamp: i64,
    pub heart_rate: f64,
    pub breath_rate: f64,
}

/// One annotator's judgment over the half-open interval `[start, end)` ms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub annotator_id: String,
    pub start: i64,
    pub end: i64,
    pub level: u8,
}

impl AnnotationSpan {
    pub fn validate(&self) -> Result<(), RowErrorKind> {
        if !(1..=5).contains(&self.level) {
            return Err(RowErrorKind::LevelOutOfRange(self.level as i64));
        }
        if self.start >= self.end {
            return Err(RowErrorKind::EmptySpan { start: self.start, end: self.end });
        }
        Ok(())
    }

    pub fn overlaps(&self, other: &AnnotationSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Mono PCM audio normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioSignal {
    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

pub fn keypoint_header() -> Vec<String> {
    let mut cols = vec!["timestamp".to_string()];
    for j in 0..NUM_JOINTS {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{axis}{j}"));
        }
    }
    cols
}

const PHYSIO_HEADER: [&str; 3] = ["timestamp", "heart_rate", "breath_rate"];

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

/// Reads the header, then hands each data record to `row` with its line number.
fn scan_csv<R: Read, T>(
    input: R,
    expected_header: &[&str],
    mut row: impl FnMut(&csv::StringRecord) -> Result<T, RowErrorKind>,
) -> Result<Scan<T>, IngestError> {
    let mut reader = csv_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(IngestError::Header { expected: expected_header.join(","), found: e.to_string() }),
        None => return Err(IngestError::MissingHeader),
    };
    if header.iter().ne(expected_header.iter().copied()) {
        return Err(IngestError::Header {
            expected: expected_header.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut scan = Scan::default();
    for record in records {
        match record {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line());
                match row(&rec) {
                    Ok(v) => scan.rows.push(v),
                    Err(kind) => scan.errors.push((line, kind)),
                }
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if let csv::ErrorKind::Io(_) = e.kind() {
                    return Err(IngestError::Io(std::io::Error::other(e.to_string())));
                }
                scan.errors.push((line, RowErrorKind::Csv(e.to_string())));
            }
        }
    }
    Ok(scan)
}

fn column_count(rec: &csv::StringRecord, expected: usize) -> Result<(), RowErrorKind> {
    if rec.len() != expected {
        return Err(RowErrorKind::ColumnCount { expected, found: rec.len() });
    }
    Ok(())
}

fn parse_f64(rec: &csv::StringRecord, column: usize) -> Result<Option<f64>, RowErrorKind> {
    let cell = &rec[column];
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(RowErrorKind::NotNumeric { column, value: cell.to_string() }),
    }
}

fn parse_timestamp(rec: &csv::StringRecord) -> Result<i64, RowErrorKind> {
    let cell = &rec[0];
    if cell.is_empty() {
        return Err(RowErrorKind::Empty { column: 0 });
    }
    cell.parse::<i64>().map_err(|_| RowErrorKind::NotNumeric { column: 0, value: cell.to_string() })
}

fn check_increasing(previous: &mut Option<i64>, timestamp: i64) -> Result<(), RowErrorKind> {
    if let Some(prev) = *previous {
        if timestamp <= prev {
            return Err(RowErrorKind::NonIncreasingTimestamp { timestamp, previous: prev });
        }
    }
    *previous = Some(timestamp);
    Ok(())
}

pub fn scan_keypoints<R: Read>(input: R) -> Result<Scan<KeypointFrame>, IngestError> {
    let header = keypoint_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let width = header.len();
    let mut previous = None;
    scan_csv(input, &header, |rec| {
        column_count(rec, width)?;
        let timestamp = parse_timestamp(rec)?;
        let mut joints = [None; NUM_JOINTS];
        for (j, joint) in joints.iter_mut().enumerate() {
            let base = 1 + 3 * j;
            let coords = [parse_f64(rec, base)?, parse_f64(rec, base + 1)?, parse_f64(rec, base + 2)?];
            *joint = match coords {
                [Some(x), Some(y), Some(z)] => Some([x, y, z]),
                [None, None, None] => None,
                _ => {
                    let column = base + coords.iter().position(Option::is_none).unwrap_or(0);
                    return Err(RowErrorKind::Empty { column });
                }
            };
        }
        check_increasing(&mut previous, timestamp)?;
        Ok(KeypointFrame { timestamp, joints })
    })
}

/// Parses `timestamp,x0,y0,z0,...,x24,y24,z24`; a joint with all three cells
/// empty is missing.
pub fn parse_keypoints<R: Read>(input: R) -> Result<Vec<KeypointFrame>, IngestError> {
    scan_keypoints(input)?.into_result()
}

pub fn write_keypoints<W: Write>(out: W, frames: &[KeypointFrame]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(keypoint_header()).map_err(csv_io)?;
    let mut row = Vec::with_capacity(1 + 3 * NUM_JOINTS);
    for f in frames {
        row.clear();
        row.push(f.timestamp.to_string());
        for joint in &f.joints {
            match joint {
                Some(p) => row.extend(p.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn scan_physio<R: Read>(input: R) -> Result<Scan<PhysioSample>, IngestError> {
    let mut previous = None;
    scan_csv(input, &PHYSIO_HEADER, |rec| {
        column_count(rec, 3)?;
        let timestamp = parse_timestamp(rec)?;
        let heart_rate = parse_f64(rec, 1)?.ok_or(RowErrorKind::Empty { column: 1 })?;
        let breath_rate = parse_f64(rec, 2)?.ok_or(RowErrorKind::Empty { column: 2 })?;
        if heart_rate < 0.0 {
            return Err(RowErrorKind::NegativeRate { field: "heart_rate", value: heart_rate });
        }
        if breath_rate < 0.0 {
            return Err(RowErrorKind::NegativeRate { field: "breath_rate", value: breath_rate });
        }
        check_increasing(&mut previous, timestamp)?;
        Ok(PhysioSample { timestamp, heart_rate, breath_rate })
    })
}

/// Parses `timestamp,heart_rate,breath_rate`.
pub fn parse_physio<R: Read>(input: R) -> Result<Vec<PhysioSample>, IngestError> {
    scan_physio(input)?.into_result()
}

pub fn write_physio<W: Write>(out: W, samples: &[PhysioSample]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PHYSIO_HEADER).map_err(csv_io)?;
    for s in samples {
        w.write_record([s.timestamp.to_string(), s.heart_rate.to_string(), s.breath_rate.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn scan_annotations<R: Read>(input: R) -> Result<Scan<AnnotationSpan>, IngestError> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let mut scan = Scan::default();
    let mut accepted: HashMap<String, Vec<(i64, i64)>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = i as u64 + 1;
        let span: AnnotationSpan = match serde_json::from_str(line) {
            Ok(s) => s,
            Err(e) => {
                scan.errors.push((row, RowErrorKind::Json(e.to_string())));
                continue;
            }
        };
        if let Err(kind) = span.validate() {
            scan.errors.push((row, kind));
            continue;
        }
        let taken = accepted.entry(span.annotator_id.clone()).or_default();
        if taken.iter().any(|&(s, e)| span.start < e && s < span.end) {
            scan.errors.push((
                row,
                RowErrorKind::Overlap { annotator: span.annotator_id.clone(), start: span.start, end: span.end },
            ));
            continue;
        }
        taken.push((span.start, span.end));
        scan.rows.push(span);
    }
    Ok(scan)
}

/// Parses one `{"annotator_id", "start", "end", "level"}` object per line.
pub fn parse_annotations<R: Read>(input: R) -> Result<Vec<AnnotationSpan>, IngestError> {
    scan_annotations(input)?.into_result()
}

pub fn write_annotations<W: Write>(mut out: W, spans: &[AnnotationSpan]) -> Result<(), IngestError> {
    for s in spans {
        let line = serde_json::to_string(s).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Decodes a 16-bit PCM WAV file, downmixing stereo by channel mean.
pub fn parse_audio<R: Read>(input: R) -> Result<AudioSignal, IngestError> {
    let reader = hound::WavReader::new(input).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(IngestError::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if !(1..=2).contains(&spec.channels) {
        return Err(IngestError::UnsupportedEncoding(format!("{} channels", spec.channels)));
    }
    let expected = reader.len() as usize;
    let channels = spec.channels as usize;
    let raw: Vec<i16> = reader.into_samples::<i16>().collect::<Result<_, _>>()
        .map_err(|e| match e {
            hound::Error::IoError(io) if io.kind() != std::io::ErrorKind::Other && io.kind() != std::io::ErrorKind::UnexpectedEof => {
                IngestError::Io(io)
            }
            other => IngestError::MalformedAudio(format!("truncated data chunk: {other}")),
        })?;
    if raw.len() != expected || !raw.len().is_multiple_of(channels) {
        return Err(IngestError::MalformedAudio(format!(
            "truncated data chunk: {} of {} samples",
            raw.len(),
            expected
        )));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioSignal { sample_rate: spec.sample_rate, samples })
}

/// Merges a second track into the first by sample-wise mean over the common length.
pub fn mix_tracks(primary: AudioSignal, secondary: &AudioSignal) -> Result<AudioSignal, IngestError> {
    if primary.sample_rate != secondary.sample_rate {
        return Err(IngestError::SampleRateMismatch(primary.sample_rate, secondary.sample_rate));
    }
    let n = primary.samples.len().min(secondary.samples.len());
    let samples = primary.samples[..n]
        .iter()
        .zip(&secondary.samples[..n])
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    Ok(AudioSignal { sample_rate: primary.sample_rate, samples })
}

/// Encodes a mono signal as 16-bit PCM; values are clamped to the i16 range.
pub fn write_audio<W: Write + std::io::Seek>(out: W, signal: &AudioSignal) -> Result<(), IngestError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(out, spec).map_err(wav_error)?;
    for &s in &signal.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v).map_err(wav_error)?;
    }
    w.finalize().map_err(wav_error)?;
    Ok(())
}

fn wav_error(e: hound::Error) -> IngestError {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            IngestError::MalformedAudio("truncated data chunk".into())
        }
        hound::Error::IoError(io) => IngestError::Io(io),
        hound::Error::Unsupported => IngestError::UnsupportedEncoding("non-PCM format tag".into()),
        other => IngestError::MalformedAudio(other.to_string()),
    }
}

fn csv_io(e: csv::Error) -> IngestError {
    IngestError::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn keypoint_text(rows: &[&str]) -> String {
        let mut s = keypoint_header().join(",");
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    #[test]
    fn keypoint_row_with_only_nose() {
        let row = format!("0,0,0,0{}", ",".repeat(72));
        let frames = parse_keypoints(keypoint_text(&[&row]).as_bytes()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].joints[0], Some([0.0, 0.0, 0.0]));
        assert!(frames[0].joints[1..].iter().all(Option::is_none));
    }

    #[test]
    fn keypoint_rows_keep_order() {
        let a = format!("0{}", ",1".repeat(75));
        let b = format!("33{}", ",2".repeat(75));
        let frames = parse_keypoints(keypoint_text(&[&a, &b]).as_bytes()).unwrap();
        assert_eq!(frames.iter().map(|f| f.timestamp).collect::<Vec<_>>(), vec![0, 33]);
        assert_eq!(frames[1].joints[24], Some([2.0, 2.0, 2.0]));
    }

    #[test]
    fn keypoint_wrong_column_count_names_row() {
        let good = format!("0{}", ",1".repeat(75));
        let text = keypoint_text(&[&good, "33,1,2,3,4,5,6,7,8,9"]);
        let err = parse_keypoints(text.as_bytes()).unwrap_err();
        match err {
            IngestError::Row { row: 3, kind: RowErrorKind::ColumnCount { expected: 76, found: 10 } } => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn keypoint_partial_joint_and_bad_cells() {
        let mut cells = vec!["0".to_string(), "1".into(), String::new(), "1".into()];
        cells.extend(std::iter::repeat_n("0".to_string(), 72));
        let text = keypoint_text(&[&cells.join(",")]);
        assert!(matches!(
            parse_keypoints(text.as_bytes()),
            Err(IngestError::Row { kind: RowErrorKind::Empty { column: 2 }, .. })
        ));
        let text = keypoint_text(&[&format!("0,abc{}", ",1".repeat(74))]);
        assert!(matches!(
            parse_keypoints(text.as_bytes()),
            Err(IngestError::Row { kind: RowErrorKind::NotNumeric { column: 1, .. }, .. })
        ));
    }

    #[test]
    fn keypoint_non_monotonic_and_header_errors() {
        let a = format!("10{}", ",1".repeat(75));
        let b = format!("10{}", ",1".repeat(75));
        let scan = scan_keypoints(keypoint_text(&[&a, &b]).as_bytes()).unwrap();
        assert_eq!(scan.rows.len(), 1);
        assert_eq!(scan.errors.len(), 1);
        assert!(matches!(scan.errors[0].1, RowErrorKind::NonIncreasingTimestamp { .. }));
        assert!(matches!(parse_keypoints("t,x\n0,1".as_bytes()), Err(IngestError::Header { .. })));
        assert!(matches!(parse_keypoints("".as_bytes()), Err(IngestError::MissingHeader)));
    }

    #[test]
    fn comment_lines_are_skipped() {
        let text = "# config_hash=abc\ntimestamp,heart_rate,breath_rate\n0,90,15.5\n";
        assert_eq!(parse_physio(text.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn physio_examples() {
        let ok = "timestamp,heart_rate,breath_rate\n0,90,15.5\n2000,94,16.0\n";
        let s = parse_physio(ok.as_bytes()).unwrap();
        assert_eq!(s, vec![
            PhysioSample { timestamp: 0, heart_rate: 90.0, breath_rate: 15.5 },
            PhysioSample { timestamp: 2000, heart_rate: 94.0, breath_rate: 16.0 },
        ]);
        let dup = "timestamp,heart_rate,breath_rate\n0,90,15\n0,91,15\n";
        assert!(matches!(
            parse_physio(dup.as_bytes()),
            Err(IngestError::Row { row: 3, kind: RowErrorKind::NonIncreasingTimestamp { .. } })
        ));
        let neg = "timestamp,heart_rate,breath_rate\n0,-5,15\n";
        assert!(matches!(
            parse_physio(neg.as_bytes()),
            Err(IngestError::Row { kind: RowErrorKind::NegativeRate { field: "heart_rate", .. }, .. })
        ));
    }

    #[test]
    fn annotation_examples() {
        let one = r#"{"annotator_id":"a1","start":1000,"end":3000,"level":2}"#;
        let spans = parse_annotations(one.as_bytes()).unwrap();
        assert_eq!(spans, vec![AnnotationSpan { annotator_id: "a1".into(), start: 1000, end: 3000, level: 2 }]);

        let empty = r#"{"annotator_id":"a1","start":0,"end":0,"level":2}"#;
        assert!(matches!(
            parse_annotations(empty.as_bytes()),
            Err(IngestError::Row { kind: RowErrorKind::EmptySpan { .. }, .. })
        ));
        let high = r#"{"annotator_id":"a1","start":0,"end":100,"level":6}"#;
        assert!(matches!(
            parse_annotations(high.as_bytes()),
            Err(IngestError::Row { kind: RowErrorKind::LevelOutOfRange(6), .. })
        ));
        let zero = r#"{"annotator_id":"a1","start":0,"end":100,"level":0}"#;
        assert!(parse_annotations(zero.as_bytes()).is_err());
    }

    #[test]
    fn annotation_overlap_is_per_annotator() {
        let text = [
            r#"{"annotator_id":"a1","start":0,"end":100,"level":2}"#,
            r#"{"annotator_id":"a2","start":50,"end":150,"level":2}"#,
            r#"{"annotator_id":"a1","start":100,"end":200,"level":3}"#,
            r#"{"annotator_id":"a1","start":150,"end":250,"level":3}"#,
        ]
        .join("\n");
        let scan = scan_annotations(text.as_bytes()).unwrap();
        assert_eq!(scan.rows.len(), 3);
        assert_eq!(scan.errors.len(), 1);
        assert_eq!(scan.errors[0].0, 4);
        assert!(matches!(scan.errors[0].1, RowErrorKind::Overlap { .. }));
    }

    fn wav_bytes(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut cur = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut cur, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        cur.into_inner()
    }

    #[test]
    fn audio_silence() {
        let bytes = wav_bytes(1, 16_000, &vec![0; 16_000]);
        let sig = parse_audio(bytes.as_slice()).unwrap();
        assert_eq!(sig.sample_rate, 16_000);
        assert_eq!(sig.samples.len(), 16_000);
        assert!(sig.samples.iter().all(|&s| s == 0.0));
        assert_eq!(sig.duration_ms(), 1000.0);
    }

    #[test]
    fn audio_stereo_downmix() {
        let bytes = wav_bytes(2, 8_000, &[16_384, -16_384, -32_768, 0]);
        let sig = parse_audio(bytes.as_slice()).unwrap();
        assert_eq!(sig.samples, vec![0.0, -0.5]);
    }

    #[test]
    fn audio_compressed_codec_rejected() {
        let mut bytes = wav_bytes(1, 8_000, &[0; 8]);
        // fmt chunk audio format tag lives at byte 20; 0x55 is MPEG layer 3.
        bytes[20] = 0x55;
        bytes[21] = 0x00;
        assert!(matches!(parse_audio(bytes.as_slice()), Err(IngestError::UnsupportedEncoding(_))));
    }

    #[test]
    fn audio_truncated_data_rejected() {
        let bytes = wav_bytes(1, 8_000, &[100; 64]);
        let cut = &bytes[..bytes.len() - 21];
        let r = parse_audio(cut);
        assert!(matches!(r, Err(IngestError::MalformedAudio(_))), "{r:?}");
    }

    #[test]
    fn audio_secondary_track_mixed_by_mean() {
        let a = AudioSignal { sample_rate: 8_000, samples: vec![0.5, 0.5, 1.0] };
        let b = AudioSignal { sample_rate: 8_000, samples: vec![-0.5, 0.25] };
        let m = mix_tracks(a.clone(), &b).unwrap();
        assert_eq!(m.samples, vec![0.0, 0.375]);
        let c = AudioSignal { sample_rate: 16_000, samples: vec![0.0] };
        assert!(mix_tracks(a, &c).is_err());
    }

    fn arb_frame() -> impl Strategy<Value = Vec<Option<[f64; 3]>>> {
        prop::collection::vec(prop::option::of(prop::array::uniform3(-1e3f64..1e3)), NUM_JOINTS)
    }

    proptest! {
        #[test]
        fn keypoints_round_trip(frames in prop::collection::vec(arb_frame(), 0..8)) {
            let frames: Vec<KeypointFrame> = frames.into_iter().enumerate().map(|(i, j)| KeypointFrame {
                timestamp: i as i64 * 33,
                joints: j.try_into().unwrap(),
            }).collect();
            let mut buf = Vec::new();
            write_keypoints(&mut buf, &frames).unwrap();
            prop_assert_eq!(parse_keypoints(buf.as_slice()).unwrap(), frames);
        }

        #[test]
        fn physio_round_trip_and_row_accounting(rates in prop::collection::vec((0f64..250.0, -5f64..40.0), 1..20)) {
            let mut text = String::from("timestamp,heart_rate,breath_rate\n");
            for (i, (hr, br)) in rates.iter().enumerate() {
                text.push_str(&format!("{},{},{}\n", i * 2000, hr, br));
            }
            let scan = scan_physio(text.as_bytes()).unwrap();
            prop_assert_eq!(scan.rows.len() + scan.errors.len(), rates.len());
            let mut buf = Vec::new();
            write_physio(&mut buf, &scan.rows).unwrap();
            prop_assert_eq!(parse_physio(buf.as_slice()).unwrap(), scan.rows);
        }

        #[test]
        fn audio_round_trip(raw in prop::collection::vec(any::<i16>(), 1..200)) {
            let sig = AudioSignal { sample_rate: 16_000, samples: raw.iter().map(|&s| s as f64 / 32768.0).collect() };
            let mut cur = Cursor::new(Vec::new());
            write_audio(&mut cur, &sig).unwrap();
            prop_assert_eq!(parse_audio(cur.into_inner().as_slice()).unwrap(), sig);
        }
    }
}
