//! End-to-end stages over session manifests and dataset directories.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_session, AlignError, AlignedStreams};
use crate::audio::{framewise_audio, AudioError, AudioFeatureFrame};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, PipelineConfig};
use crate::dataset::{
    class_stats, split, window, ClassStats, DatasetError, FeatureFrame, LabeledSignals, Normalizer, SequenceSample, SessionMatrix,
    SessionTable, Split,
};
use crate::ingest::{self, AnnotationSpan, AudioSignal, IngestError, KeypointFrame, PhysioSample};
use crate::labels::{fuse_session, roster_of, FusedTimeline, FusionError};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::model::{FearLevel, ModelError, SessionManifest};
use crate::net::{self, EpochRecord, Example, FearNetParams, NetConfig, NetError, TrainError, TrainOutcome};
use crate::skeleton::{apply_pca, fit_pca_with, flatten_skeleton, PcaModel, SkeletonError};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const PCA_FILE: &str = "pca.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Ingest { path: PathBuf, source: IngestError },
    #[error("manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
    #[error("session `{session}`: {source}")]
    Align { session: String, source: AlignError },
    #[error("session `{session}`: {source}")]
    Audio { session: String, source: AudioError },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("session `{session}`: {source}")]
    Fusion { session: String, source: FusionError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Name of the stage that failed.
    pub fn module(&self) -> &'static str {
        match self {
            Self::Ingest { .. } => "ingest",
            Self::Manifest { .. } => "core-model",
            Self::Align { .. } => "align",
            Self::Audio { .. } => "audio-features",
            Self::Skeleton(_) => "skeleton-features",
            Self::Fusion { .. } => "label-fusion",
            Self::Dataset(_) => "sequence-dataset",
            Self::Net(_) | Self::Train(_) | Self::Checkpoint(_) => "net",
            Self::Metrics(_) => "metrics",
            Self::Config(_) => "config",
            Self::Invalid(_) | Self::Io { .. } => "cli",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

/// Creates `path` for writing, refusing to replace an existing file unless `force`.
pub fn create_output(path: &Path, force: bool) -> Result<BufWriter<File>, PipelineError> {
    if path.exists() && !force {
        return Err(PipelineError::Invalid(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<(), PipelineError> {
    let mut w = create_output(path, force)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path)(e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    serde_json::from_reader(open(path)?).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
}

/// Expands each path to manifest files: a file is taken as is; a directory
/// contributes its own `manifest.json` or, failing that, those of its
/// immediate subdirectories. The result is sorted.
pub fn discover_manifests(paths: &[PathBuf]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut found = Vec::new();
    for path in paths {
        if !path.is_dir() {
            if !path.exists() {
                return Err(PipelineError::Io { path: path.clone(), source: std::io::ErrorKind::NotFound.into() });
            }
            found.push(path.clone());
            continue;
        }
        let own = path.join(MANIFEST_FILE);
        if own.is_file() {
            found.push(own);
            continue;
        }
        let before = found.len();
        for entry in std::fs::read_dir(path).map_err(io_err(path))? {
            let candidate = entry.map_err(io_err(path))?.path().join(MANIFEST_FILE);
            if candidate.is_file() {
                found.push(candidate);
            }
        }
        if found.len() == before {
            return Err(PipelineError::Invalid(format!("no {MANIFEST_FILE} under {}", path.display())));
        }
    }
    found.sort();
    found.dedup();
    Ok(found)
}

pub fn load_manifest(path: &Path) -> Result<SessionManifest, PipelineError> {
    let manifest: SessionManifest = serde_json::from_reader(open(path)?)
        .map_err(|e| PipelineError::Manifest { path: path.to_path_buf(), reason: e.to_string() })?;
    manifest
        .validate()
        .map_err(|e: ModelError| PipelineError::Manifest { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(manifest)
}

/// One session's parsed raw streams.
#[derive(Debug, Clone)]
pub struct RawSession {
    pub manifest: SessionManifest,
    pub manifest_path: PathBuf,
    pub keypoints: Vec<KeypointFrame>,
    pub physio: Vec<PhysioSample>,
    pub audio: AudioSignal,
    pub spans: Vec<AnnotationSpan>,
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationSpan>, PipelineError> {
    ingest::parse_annotations(open(path)?).map_err(|source| PipelineError::Ingest { path: path.to_path_buf(), source })
}

pub fn load_session(manifest_path: &Path) -> Result<RawSession, PipelineError> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let s = &manifest.streams;
    let stream = |p: &Path| manifest.resolve(&base, p);
    let ingest_err = |path: PathBuf| move |source| PipelineError::Ingest { path, source };

    let kp_path = stream(&s.keypoints);
    let keypoints = ingest::parse_keypoints(open(&kp_path)?).map_err(ingest_err(kp_path.clone()))?;
    let ph_path = stream(&s.physio);
    let physio = ingest::parse_physio(open(&ph_path)?).map_err(ingest_err(ph_path.clone()))?;
    let au_path = stream(&s.audio);
    let mut audio = ingest::parse_audio(open(&au_path)?).map_err(ingest_err(au_path.clone()))?;
    if let Some(second) = &s.audio_secondary {
        let p = stream(second);
        let other = ingest::parse_audio(open(&p)?).map_err(ingest_err(p.clone()))?;
        audio = ingest::mix_tracks(audio, &other).map_err(ingest_err(p))?;
    }
    if audio.samples.is_empty() {
        return Err(PipelineError::Ingest { path: au_path, source: IngestError::EmptyAudio });
    }
    let spans = load_annotations(&stream(&s.annotations))?;
    Ok(RawSession { manifest, manifest_path: manifest_path.to_path_buf(), keypoints, physio, audio, spans })
}

/// A session on its frame clock with audio features and fused labels.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub session_id: String,
    pub aligned: AlignedStreams,
    pub audio_features: Vec<AudioFeatureFrame>,
    pub labels: FusedTimeline,
}

pub fn align_raw(raw: &RawSession) -> Result<AlignedStreams, PipelineError> {
    align_session(&raw.manifest, &raw.keypoints, &raw.physio, &raw.audio)
        .map_err(|source| PipelineError::Align { session: raw.manifest.session_id.clone(), source })
}

pub fn prepare_session(raw: &RawSession, config: &PipelineConfig) -> Result<PreparedSession, PipelineError> {
    let session = raw.manifest.session_id.clone();
    let aligned = align_raw(raw)?;
    let audio_features = framewise_audio(&aligned.audio, &aligned.clock, &config.audio)
        .map_err(|source| PipelineError::Audio { session: session.clone(), source })?;
    let labels = fuse_session(&raw.spans, &aligned.clock, &roster_of(&raw.spans));
    Ok(PreparedSession { session_id: session, aligned, audio_features, labels })
}

fn load_and_prepare(paths: &[PathBuf], config: &PipelineConfig) -> Result<Vec<PreparedSession>, PipelineError> {
    let mut sessions = paths
        .par_iter()
        .map(|p| load_session(p).and_then(|raw| prepare_session(&raw, config)))
        .collect::<Result<Vec<_>, _>>()?;
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    if let Some(w) = sessions.windows(2).find(|w| w[0].session_id == w[1].session_id) {
        return Err(PipelineError::Invalid(format!("session id `{}` appears twice", w[0].session_id)));
    }
    Ok(sessions)
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub pca: PcaModel,
    pub tables: Vec<SessionTable>,
}

/// Aligns, extracts and fuses every session (in parallel), fits the skeleton
/// PCA, and assembles one feature table per session ordered by session id.
pub fn build(manifest_paths: &[PathBuf], config: &PipelineConfig) -> Result<BuildOutput, PipelineError> {
    config.validate()?;
    let sessions = load_and_prepare(manifest_paths, config)?;
    for s in &sessions {
        if !s.labels.sufficient {
            return Err(PipelineError::Fusion {
                session: s.session_id.clone(),
                source: FusionError::InsufficientAnnotators(s.labels.roster.len()),
            });
        }
    }
    let fit_ids: BTreeSet<&str> = config.pca.fit_sessions.iter().map(String::as_str).collect();
    if let Some(missing) = fit_ids.iter().find(|id| !sessions.iter().any(|s| s.session_id == **id)) {
        return Err(PipelineError::Invalid(format!("pca.fit_sessions names unknown session `{missing}`")));
    }
    let fit_rows: Vec<Vec<f64>> = sessions
        .iter()
        .filter(|s| fit_ids.is_empty() || fit_ids.contains(s.session_id.as_str()))
        .flat_map(|s| s.aligned.keypoints.iter().map(|k| flatten_skeleton(k).to_vec()))
        .collect();
    let pca = fit_pca_with(&fit_rows, config.pca.selection, config.pca.variance_target)?;

    let tables = sessions
        .par_iter()
        .map(|s| -> Result<SessionTable, PipelineError> {
            let rows: Vec<Vec<f64>> = s.aligned.keypoints.iter().map(|k| flatten_skeleton(k).to_vec()).collect();
            let projected = apply_pca(&pca, &rows)?;
            let frames = projected
                .into_iter()
                .enumerate()
                .map(|(i, skeleton)| {
                    let frame = FeatureFrame {
                        frame_index: i,
                        skeleton,
                        audio: s.audio_features[i].to_array(),
                        heart_rate: s.aligned.physio[i].0,
                        breath_rate: s.aligned.physio[i].1,
                        annotator_levels: s.labels.annotator_levels[i].clone(),
                        label: s.labels.fused[i],
                    };
                    frame.validate()?;
                    Ok(frame)
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            Ok(SessionTable { session_id: s.session_id.clone(), roster: s.labels.roster.clone(), frames })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BuildOutput { pca, tables })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub session_id: String,
    pub file: String,
    pub frames: usize,
    pub roster: Vec<String>,
}

/// `dataset.json`: the session roster of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub skeleton_width: usize,
    pub feature_width: usize,
    pub pca_file: Option<String>,
    pub sessions: Vec<DatasetEntry>,
}

fn session_file(id: &str) -> String {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    format!("{safe}.csv")
}

/// Writes one CSV per session, `dataset.json` and (if given) `pca.json`.
pub fn write_dataset(
    dir: &Path,
    tables: &[SessionTable],
    pca: Option<&PcaModel>,
    config: &PipelineConfig,
    force: bool,
) -> Result<DatasetManifest, PipelineError> {
    let hash = config.hash();
    let mut entries = Vec::with_capacity(tables.len());
    let mut files = BTreeSet::new();
    for t in tables {
        let file = session_file(&t.session_id);
        if !files.insert(file.clone()) {
            return Err(PipelineError::Invalid(format!("two sessions map to file {file}")));
        }
        let path = dir.join(&file);
        let w = create_output(&path, force)?;
        t.write_csv(w, &[("config_hash", &hash), ("session_id", &t.session_id)])?;
        entries.push(DatasetEntry { session_id: t.session_id.clone(), file, frames: t.frames.len(), roster: t.roster.clone() });
    }
    if let Some(p) = pca {
        write_json_file(&dir.join(PCA_FILE), p, force)?;
    }
    let skeleton_width = tables.first().map_or(0, SessionTable::skeleton_width);
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        config_hash: hash,
        config: config.clone(),
        skeleton_width,
        feature_width: tables.first().and_then(|t| t.frames.first()).map_or(0, FeatureFrame::width),
        pca_file: pca.map(|_| PCA_FILE.to_string()),
        sessions: entries,
    };
    write_json_file(&dir.join(DATASET_MANIFEST), &manifest, force)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SessionTable>), PipelineError> {
    let manifest: DatasetManifest = read_json_file(&dir.join(DATASET_MANIFEST))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(PipelineError::Invalid(format!("unsupported dataset schema version {}", manifest.schema_version)));
    }
    let tables = manifest
        .sessions
        .par_iter()
        .map(|e| -> Result<SessionTable, PipelineError> {
            let path = dir.join(&e.file);
            let (table, comments) = SessionTable::read_csv(&e.session_id, open(&path)?)?;
            let hash = comments.iter().find(|(k, _)| k == "config_hash").map(|(_, v)| v.as_str());
            if hash != Some(manifest.config_hash.as_str()) {
                return Err(PipelineError::Invalid(format!("{}: config hash does not match {DATASET_MANIFEST}", path.display())));
            }
            Ok(table)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let widths: BTreeSet<usize> = tables.iter().filter_map(|t| t.frames.first()).map(FeatureFrame::width).collect();
    if widths.len() > 1 {
        let w: Vec<usize> = widths.into_iter().collect();
        return Err(DatasetError::WidthMismatch(w[0], w[1]).into());
    }
    Ok((manifest, tables))
}

pub fn check_classes(classes: usize) -> Result<(), PipelineError> {
    if classes == 2 || classes == 6 {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!("--classes must be 2 or 6, got {classes}")))
    }
}

/// Class index of a level for a 6-class or 2-class task.
pub fn target_index(level: FearLevel, classes: usize) -> usize {
    if classes == 2 {
        level.binarize().value() as usize
    } else {
        level.value() as usize
    }
}

/// Network config with the dataset's width, the window length and class count filled in.
pub fn effective_net(config: &PipelineConfig, width: usize, classes: usize) -> NetConfig {
    NetConfig { input_dim: width, sequence_length: config.sequence_length, num_classes: classes, ..config.net.clone() }
}

/// Un-normalized session matrices with their windows and split.
#[derive(Debug, Clone)]
pub struct Windows {
    pub matrices: Vec<SessionMatrix>,
    pub samples: Vec<SequenceSample>,
    pub split: Split,
}

pub fn windows(tables: &[SessionTable], config: &PipelineConfig) -> Result<Windows, PipelineError> {
    if tables.is_empty() {
        return Err(PipelineError::Invalid("dataset has no sessions".into()));
    }
    let matrices: Vec<SessionMatrix> = tables.iter().map(SessionMatrix::from_table).collect();
    let samples = window(&matrices, config.sequence_length, config.stride)?;
    let split = split(&samples, &config.split)?;
    Ok(Windows { matrices, samples, split })
}

fn examples<'a>(w: &'a Windows, idx: &[usize], classes: usize) -> Vec<Example<'a>> {
    idx.iter()
        .map(|&i| {
            let s = &w.samples[i];
            Example { features: s.features(&w.matrices), target: target_index(s.target, classes) }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub split_sizes: [usize; 3],
}

/// Windows and splits the tables, z-scores with training-split statistics,
/// and trains. `on_epoch` may stop training early.
pub fn train_model(
    tables: &[SessionTable],
    config: &PipelineConfig,
    classes: usize,
    on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainResult, PipelineError> {
    config.validate()?;
    check_classes(classes)?;
    let mut w = windows(tables, config)?;
    let train_samples: Vec<SequenceSample> = w.split.train.iter().map(|&i| w.samples[i]).collect();
    let normalizer = Normalizer::fit(&w.matrices, &train_samples);
    w.matrices.iter_mut().for_each(|m| normalizer.apply(m));
    let net_cfg = effective_net(config, w.matrices[0].width, classes);
    let train = examples(&w, &w.split.train, classes);
    let val = examples(&w, &w.split.validation, classes);
    let outcome = net::train_with(&train, &val, &net_cfg, on_epoch)?;
    let checkpoint = Checkpoint::new(config, &net_cfg, &outcome.params, normalizer, outcome.best_epoch);
    let split_sizes = [w.split.train.len(), w.split.validation.len(), w.split.test.len()];
    Ok(TrainResult { checkpoint, outcome, split_sizes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

impl std::str::FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            other => Err(format!("unknown split `{other}` (train, validation, test, all)")),
        }
    }
}

fn normalized_windows(tables: &[SessionTable], checkpoint: &Checkpoint) -> Result<(Windows, FearNetParams), PipelineError> {
    let params = checkpoint.params()?;
    let mut w = windows(tables, &checkpoint.pipeline)?;
    if w.matrices[0].width != checkpoint.net.input_dim {
        return Err(NetError::Shape(format!("dataset width {} but model expects {}", w.matrices[0].width, checkpoint.net.input_dim)).into());
    }
    w.matrices.iter_mut().for_each(|m| checkpoint.normalizer.apply(m));
    Ok((w, params))
}

/// Re-derives the training split from the checkpoint's config and evaluates one subset.
pub fn evaluate_checkpoint(tables: &[SessionTable], checkpoint: &Checkpoint, subset: Subset) -> Result<EvalReport, PipelineError> {
    let (w, params) = normalized_windows(tables, checkpoint)?;
    let idx: Vec<usize> = match subset {
        Subset::Train => w.split.train.clone(),
        Subset::Validation => w.split.validation.clone(),
        Subset::Test => w.split.test.clone(),
        Subset::All => (0..w.samples.len()).collect(),
    };
    let classes = checkpoint.net.num_classes;
    let ex = examples(&w, &idx, classes);
    let predictions = net::predict_all(&ex, &params, &checkpoint.net)?;
    let truths: Vec<usize> = ex.iter().map(|e| e.target).collect();
    Ok(evaluate(&predictions, &truths, classes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub session_id: String,
    pub start_frame: usize,
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub attention: Option<Vec<f64>>,
}

/// Predicts every window (stride from the checkpoint config) of each table.
pub fn predict_tables(tables: &[SessionTable], checkpoint: &Checkpoint) -> Result<Vec<WindowPrediction>, PipelineError> {
    let params = checkpoint.params()?;
    let cfg = &checkpoint.pipeline;
    let mut matrices: Vec<SessionMatrix> = tables.iter().map(SessionMatrix::from_table).collect();
    for m in &mut matrices {
        if m.width != checkpoint.net.input_dim {
            return Err(NetError::Shape(format!("dataset width {} but model expects {}", m.width, checkpoint.net.input_dim)).into());
        }
        checkpoint.normalizer.apply(m);
    }
    let samples = window(&matrices, cfg.sequence_length, cfg.stride)?;
    samples
        .par_iter()
        .map(|s| {
            let p = net::predict(s.features(&matrices), &params, &checkpoint.net)?;
            Ok(WindowPrediction {
                session_id: matrices[s.session].session_id.clone(),
                start_frame: s.start,
                class: p.class,
                probabilities: p.probabilities,
                attention: p.attention.map(|a| a.weights),
            })
        })
        .collect()
}

pub fn write_predictions_csv<W: Write>(mut out: W, predictions: &[WindowPrediction], comment: &str) -> std::io::Result<()> {
    writeln!(out, "# {comment}")?;
    let classes = predictions.first().map_or(0, |p| p.probabilities.len());
    let mut header = vec!["session_id".to_string(), "frame_index".into(), "predicted".into()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    writeln!(out, "{}", header.join(","))?;
    for p in predictions {
        write!(out, "{},{},{}", p.session_id, p.start_frame, p.class)?;
        for v in &p.probabilities {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

/// Per-level statistics over sessions given by manifest, using aligned
/// skeletons for the acceleration columns.
pub fn session_stats(manifest_paths: &[PathBuf], config: &PipelineConfig) -> Result<ClassStats, PipelineError> {
    let sessions = load_and_prepare(manifest_paths, config)?;
    let inputs: Vec<LabeledSignals<'_>> = sessions
        .iter()
        .map(|s| LabeledSignals { labels: &s.labels.fused, physio: &s.aligned.physio, keypoints: Some(&s.aligned.keypoints) })
        .collect();
    Ok(class_stats(&inputs))
}

/// Per-level statistics over dataset tables (no acceleration: the tables hold projected skeletons).
pub fn table_stats(tables: &[SessionTable]) -> ClassStats {
    let owned: Vec<(Vec<FearLevel>, Vec<(f64, f64)>)> =
        tables.iter().map(|t| (t.labels(), t.frames.iter().map(|f| (f.heart_rate, f.breath_rate)).collect())).collect();
    let inputs: Vec<LabeledSignals<'_>> =
        owned.iter().map(|(l, p)| LabeledSignals { labels: l, physio: p, keypoints: None }).collect();
    class_stats(&inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::synth;

    #[test]
    fn discovers_manifests_in_directories() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["b", "a"] {
            let s = synth::generate(id, 1, &SynthConfig { seconds: 2.0, ..SynthConfig::default() }).unwrap();
            synth::write_session(&dir.path().join(id), &s).unwrap();
        }
        let found = discover_manifests(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(found, vec![dir.path().join("a/manifest.json"), dir.path().join("b/manifest.json")]);
        let direct = discover_manifests(&[dir.path().join("b"), dir.path().join("a/manifest.json")]).unwrap();
        assert_eq!(direct, found);
        assert!(discover_manifests(&[dir.path().join("a/audio.wav").parent().unwrap().join("nope")]).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(discover_manifests(&[empty.path().to_path_buf()]).is_err());
    }

    #[test]
    fn build_synthetic_session() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth::generate("s7", 7, &SynthConfig::default()).unwrap();
        let manifest = synth::write_session(&dir.path().join("s7"), &s).unwrap();
        let out = build(&[manifest], &PipelineConfig::default()).unwrap();
        assert_eq!(out.tables.len(), 1);
        let t = &out.tables[0];
        assert_eq!(t.frames.len(), 300);
        assert_eq!(t.frames[0].width(), 61);
        let fused: Vec<u8> = t.frames.iter().map(|f| f.label.value()).collect();
        assert_eq!(fused, s.truth.frame_levels);
        assert_eq!(out.pca.k(), 33);
    }

    #[test]
    fn single_annotator_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = synth::generate("s", 1, &SynthConfig::default()).unwrap();
        s.annotations.retain(|a| a.annotator_id == "a");
        let manifest = synth::write_session(dir.path(), &s).unwrap();
        let err = build(&[manifest], &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.module(), "label-fusion");
    }

    #[test]
    fn missing_stream_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth::generate("s", 1, &SynthConfig::default()).unwrap();
        let manifest = synth::write_session(dir.path(), &s).unwrap();
        std::fs::remove_file(dir.path().join("physio.csv")).unwrap();
        let err = build(&[manifest], &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("physio.csv"), "{err}");
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json_file(&p, &1, false).unwrap();
        assert!(write_json_file(&p, &2, false).is_err());
        write_json_file(&p, &2, true).unwrap();
    }

    #[test]
    fn targets() {
        let l = FearLevel::new(3).unwrap();
        assert_eq!(target_index(l, 6), 3);
        assert_eq!(target_index(l, 2), 1);
        assert!(check_classes(3).is_err());
    }
}
