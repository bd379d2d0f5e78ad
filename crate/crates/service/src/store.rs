//! Append-only annotation log, one JSONL file per session.
//!
//! Each line is an event: an annotation span or an annotator's "done" mark.
//! Nothing is ever rewritten. Supersession is not stored; replaying the log
//! in order re-derives it: a span supersedes every live span of the same
//! annotator that it overlaps.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fearscope_core::ingest::AnnotationSpan;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error("empty annotator id")]
    EmptyAnnotator,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanBody {
    pub start: i64,
    pub end: i64,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Annotation { record_id: String, annotator_id: String, session_id: String, span: SpanBody, created_at: u64 },
    Done { record_id: String, annotator_id: String, session_id: String, created_at: u64 },
}

impl Event {
    pub fn record_id(&self) -> &str {
        match self {
            Event::Annotation { record_id, .. } | Event::Done { record_id, .. } => record_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub record_id: String,
    pub annotator_id: String,
    pub session_id: String,
    pub span: SpanBody,
    pub created_at: u64,
    pub superseded_by: Option<String>,
}

/// State reconstructed from a log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LiveState {
    pub records: Vec<AnnotationRecord>,
    pub done: BTreeSet<String>,
    pub events: usize,
}

pub fn validate_span(span: &SpanBody) -> Result<(), StoreError> {
    let s = AnnotationSpan { annotator_id: String::new(), start: span.start, end: span.end, level: span.level };
    s.validate().map_err(|e| StoreError::InvalidSpan(e.to_string()))
}

impl LiveState {
    /// Applies one event; returns the ids it superseded.
    pub fn apply(&mut self, event: Event) -> Vec<String> {
        self.events += 1;
        match event {
            Event::Done { annotator_id, .. } => {
                self.done.insert(annotator_id);
                Vec::new()
            }
            Event::Annotation { record_id, annotator_id, session_id, span, created_at } => {
                let mut superseded = Vec::new();
                for r in &mut self.records {
                    if r.superseded_by.is_none()
                        && r.annotator_id == annotator_id
                        && r.span.start < span.end
                        && span.start < r.span.end
                    {
                        r.superseded_by = Some(record_id.clone());
                        superseded.push(r.record_id.clone());
                    }
                }
                self.records.push(AnnotationRecord { record_id, annotator_id, session_id, span, created_at, superseded_by: None });
                superseded
            }
        }
    }

    pub fn live(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().filter(|r| r.superseded_by.is_none())
    }

    pub fn live_spans(&self) -> Vec<AnnotationSpan> {
        self.live()
            .map(|r| AnnotationSpan { annotator_id: r.annotator_id.clone(), start: r.span.start, end: r.span.end, level: r.span.level })
            .collect()
    }

    /// Annotators with a live record or a done mark, sorted.
    pub fn roster(&self) -> Vec<String> {
        let mut ids: BTreeSet<String> = self.done.clone();
        ids.extend(self.live().map(|r| r.annotator_id.clone()));
        ids.into_iter().collect()
    }

    pub fn next_record_id(&self) -> String {
        format!("r{:06}", self.events + 1)
    }
}

pub fn parse_log<R: BufRead>(input: R) -> Result<Vec<Event>, StoreError> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt { line: i + 1, reason: e.to_string() })?;
        if let Event::Annotation { span, .. } = &event {
            validate_span(span).map_err(|e| StoreError::Corrupt { line: i + 1, reason: e.to_string() })?;
        }
        events.push(event);
    }
    Ok(events)
}

pub fn replay(events: impl IntoIterator<Item = Event>) -> LiveState {
    let mut state = LiveState::default();
    for e in events {
        state.apply(e);
    }
    state
}

/// Replays a log file; a missing file is an empty log.
pub fn replay_file(path: &Path) -> Result<LiveState, StoreError> {
    match File::open(path) {
        Ok(f) => Ok(replay(parse_log(BufReader::new(f))?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LiveState::default()),
        Err(e) => Err(e.into()),
    }
}

/// Whether a JSONL file holds service log events rather than plain spans.
pub fn looks_like_log(first_line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(first_line).is_ok_and(|v| v.get("record_id").is_some())
}

/// Single writer for one session's log. Every append is flushed and synced
/// before it returns.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
    state: LiveState,
}

impl SessionLog {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let state = replay_file(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file, state })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn state(&self) -> &LiveState {
        &self.state
    }

    fn append(&mut self, event: &Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Persists a span; returns its record id and the ids it superseded.
    pub fn annotate(&mut self, session_id: &str, annotator_id: &str, span: SpanBody, now_ms: u64) -> Result<(String, Vec<String>), StoreError> {
        if annotator_id.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        validate_span(&span)?;
        let record_id = self.state.next_record_id();
        let event = Event::Annotation {
            record_id: record_id.clone(),
            annotator_id: annotator_id.to_string(),
            session_id: session_id.to_string(),
            span,
            created_at: now_ms,
        };
        self.append(&event)?;
        let superseded = self.state.apply(event);
        Ok((record_id, superseded))
    }

    pub fn mark_done(&mut self, session_id: &str, annotator_id: &str, now_ms: u64) -> Result<String, StoreError> {
        if annotator_id.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        let record_id = self.state.next_record_id();
        let event = Event::Done {
            record_id: record_id.clone(),
            annotator_id: annotator_id.to_string(),
            session_id: session_id.to_string(),
            created_at: now_ms,
        };
        self.append(&event)?;
        self.state.apply(event);
        Ok(record_id)
    }
}
