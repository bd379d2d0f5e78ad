use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fearscope_core::align::write_aligned_csv;
use fearscope_core::audio::feature_names;
use fearscope_core::checkpoint::Checkpoint;
use fearscope_core::config::{set_path, PipelineConfig};
use fearscope_core::ingest::{self, RowErrorKind};
use fearscope_core::labels::{fuse_session, roster_of};
use fearscope_core::net::write_history_csv;
use fearscope_core::pipeline::{self, PipelineError, Subset};
use fearscope_core::synth;
use fearscope_service::store::{looks_like_log, replay_file};
use fearscope_service::AppState;
use serde_json::{json, Value};

use crate::{Cli, CliError, Command, GlobalArgs};

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        let broken_pipe = source.kind() == std::io::ErrorKind::BrokenPipe;
        CliError { broken_pipe, ..PipelineError::Io { path: path.to_path_buf(), source }.into() }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Defaults < `--config` file < flags.
fn config(global: &GlobalArgs, extra: &[(&str, Value)]) -> Result<PipelineConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &global.config {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        layers.push(doc);
    }
    let mut flags = json!({});
    if let Some(seed) = global.seed {
        set_path(&mut flags, "net.seed", json!(seed));
        set_path(&mut flags, "split.seed", json!(seed));
    }
    for item in &global.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::new("config", format!("--set expects KEY=VALUE, got `{item}`")))?;
        set_path(&mut flags, key.trim(), parse_value(value.trim()));
    }
    for (key, value) in extra {
        set_path(&mut flags, key, value.clone());
    }
    layers.push(flags);
    Ok(PipelineConfig::layered(&layers).map_err(PipelineError::from)?)
}

/// A file (refusing to overwrite without `--force`) or stdout.
fn sink(path: Option<&Path>, force: bool) -> Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_error(dir))?;
            }
            Ok(Box::new(pipeline::create_output(p, force)?))
        }
    }
}

fn finish(mut w: Box<dyn Write>, path: Option<&Path>) -> Result<()> {
    w.flush().map_err(io_error(path.unwrap_or(Path::new("<stdout>"))))
}

fn write_json(path: Option<&Path>, force: bool, value: &Value) -> Result<()> {
    let mut w = sink(path, force)?;
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    writeln!(w, "{text}").map_err(io_error(path.unwrap_or(Path::new("<stdout>"))))?;
    finish(w, path)
}

fn hash_comment(cfg: &PipelineConfig) -> String {
    format!("config_hash={}", cfg.hash())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_error(path))
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let force = g.force;
    match cli.command {
        Command::Synth { seconds, fps, session_id, out } => {
            let mut extra = Vec::new();
            if let Some(s) = seconds {
                extra.push(("synth.seconds", json!(s)));
            }
            if let Some(f) = fps {
                extra.push(("synth.fps", json!(f)));
            }
            let cfg = config(g, &extra)?;
            let seed = cfg.net.seed;
            let id = session_id.unwrap_or_else(|| format!("synth-{seed}"));
            let dir = out.unwrap_or_else(|| PathBuf::from(&id));
            synth_session(&cfg, &id, seed, &dir, force)
        }
        Command::Fixture { samples, classes, out } => {
            let cfg = config(g, &[])?;
            pipeline::check_classes(classes)?;
            let tables = synth::separable_fixture(cfg.split.seed, samples, classes, cfg.sequence_length);
            std::fs::create_dir_all(&out).map_err(io_error(&out))?;
            let manifest = pipeline::write_dataset(&out, &tables, None, &cfg, force)?;
            println!("{}", json!({"sessions": manifest.sessions.len(), "config_hash": manifest.config_hash}));
            Ok(())
        }
        Command::Ingest { inputs, out } => {
            let cfg = config(g, &[])?;
            ingest_report(&cfg, &inputs, out.as_deref(), force)
        }
        Command::Align { manifest, out } => {
            let cfg = config(g, &[])?;
            let raw = pipeline::load_session(&manifest)?;
            let aligned = pipeline::align_raw(&raw)?;
            let mut w = sink(out.as_deref(), force)?;
            write_aligned_csv(&mut w, &aligned, Some(&hash_comment(&cfg))).map_err(io_error(&manifest))?;
            finish(w, out.as_deref())
        }
        Command::Features { manifest, out } => {
            let cfg = config(g, &[])?;
            let raw = pipeline::load_session(&manifest)?;
            let prepared = pipeline::prepare_session(&raw, &cfg)?;
            let mut w = sink(out.as_deref(), force)?;
            let target = out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
            let mut write = || -> std::io::Result<()> {
                writeln!(w, "# {}", hash_comment(&cfg))?;
                writeln!(w, "frame_index,time_ms,{}", feature_names().join(","))?;
                for (i, f) in prepared.audio_features.iter().enumerate() {
                    write!(w, "{i},{}", prepared.aligned.clock.tick(i))?;
                    for v in f.to_array() {
                        write!(w, ",{v}")?;
                    }
                    writeln!(w)?;
                }
                w.flush()
            };
            write().map_err(io_error(&target))
        }
        Command::FuseLabels { manifest, log, out } => {
            let cfg = config(g, &[])?;
            fuse_labels(&cfg, &manifest, log.as_deref(), out.as_deref(), force)
        }
        Command::Build { inputs, out } => {
            let cfg = config(g, &[])?;
            let paths = pipeline::discover_manifests(&inputs)?;
            let built = pipeline::build(&paths, &cfg)?;
            std::fs::create_dir_all(&out).map_err(io_error(&out))?;
            let manifest = pipeline::write_dataset(&out, &built.tables, Some(&built.pca), &cfg, force)?;
            let frames: usize = manifest.sessions.iter().map(|s| s.frames).sum();
            println!(
                "{}",
                json!({
                    "sessions": manifest.sessions.len(),
                    "frames": frames,
                    "feature_width": manifest.feature_width,
                    "pca_components": built.pca.components.len(),
                    "pca_retained_ratio": built.pca.retained_ratio,
                    "pca_target_components": built.pca.target_components,
                    "config_hash": manifest.config_hash,
                })
            );
            Ok(())
        }
        Command::Train { data, classes, out, history, patience } => {
            let cfg = config(g, &[])?;
            let (_, tables) = pipeline::load_dataset(&data)?;
            let (mut best, mut since_best) = (f64::NEG_INFINITY, 0);
            let result = pipeline::train_model(&tables, &cfg, classes, |r| {
                eprintln!("epoch {:>4}  loss {:.6}  val_accuracy {:.4}", r.epoch, r.loss, r.val_accuracy);
                if r.val_accuracy > best {
                    (best, since_best) = (r.val_accuracy, 0);
                } else {
                    since_best += 1;
                }
                match patience {
                    Some(p) if since_best >= p => ControlFlow::Break(()),
                    _ => ControlFlow::Continue(()),
                }
            })?;
            let mut w = sink(Some(&out), force)?;
            result.checkpoint.write(&mut w).map_err(PipelineError::from)?;
            finish(w, Some(&out))?;
            if let Some(h) = &history {
                let mut w = sink(Some(h), force)?;
                write_history_csv(&mut w, &result.outcome.history, Some(&hash_comment(&cfg))).map_err(io_error(h))?;
                finish(w, Some(h))?;
            }
            let best = result.outcome.history.iter().find(|r| r.epoch == result.outcome.best_epoch).map(|r| r.val_accuracy);
            println!(
                "{}",
                json!({
                    "best_epoch": result.outcome.best_epoch,
                    "best_val_accuracy": best,
                    "epochs_run": result.outcome.history.len(),
                    "split_sizes": result.split_sizes,
                    "config_hash": result.checkpoint.config_hash,
                })
            );
            Ok(())
        }
        Command::Eval { data, checkpoint, split, out } => {
            let subset: Subset = split.parse().map_err(|e: String| CliError::new("cli", e))?;
            let ckpt = Checkpoint::read(open(&checkpoint)?).map_err(PipelineError::from)?;
            let (dataset, tables) = pipeline::load_dataset(&data)?;
            let report = pipeline::evaluate_checkpoint(&tables, &ckpt, subset)?;
            print!("{}", report.to_table());
            if let Some(p) = &out {
                let doc = json!({
                    "config_hash": ckpt.config_hash,
                    "dataset_config_hash": dataset.config_hash,
                    "split": subset,
                    "report": report,
                });
                write_json(Some(p), force, &doc)?;
            }
            Ok(())
        }
        Command::Predict { data, checkpoint, out } => {
            let ckpt = Checkpoint::read(open(&checkpoint)?).map_err(PipelineError::from)?;
            let (_, tables) = pipeline::load_dataset(&data)?;
            let predictions = pipeline::predict_tables(&tables, &ckpt)?;
            let mut w = sink(out.as_deref(), force)?;
            pipeline::write_predictions_csv(&mut w, &predictions, &format!("config_hash={}", ckpt.config_hash))
                .map_err(io_error(&checkpoint))?;
            finish(w, out.as_deref())
        }
        Command::Stats { inputs, data, out } => {
            let cfg = config(g, &[])?;
            let (stats, hash) = match data {
                Some(dir) => {
                    let (manifest, tables) = pipeline::load_dataset(&dir)?;
                    (pipeline::table_stats(&tables), manifest.config_hash)
                }
                None if inputs.is_empty() => return Err(CliError::new("cli", "stats needs session inputs or --data")),
                None => {
                    let paths = pipeline::discover_manifests(&inputs)?;
                    (pipeline::session_stats(&paths, &cfg)?, cfg.hash())
                }
            };
            print!("{}", stats.to_table());
            if let Some(p) = &out {
                write_json(Some(p), force, &json!({"config_hash": hash, "stats": stats}))?;
            }
            Ok(())
        }
        Command::Serve { inputs, port, host, store } => {
            let paths = pipeline::discover_manifests(&inputs)?;
            let state = AppState::load(&paths, &store).map_err(|e| CliError::new("annotation-service", e.to_string()))?;
            let addr: std::net::SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::new("cli", format!("invalid address {host}:{port}: {e}")))?;
            tracing_subscriber::fmt().with_writer(std::io::stderr).init();
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("annotation-service", e.to_string()))?;
            runtime
                .block_on(fearscope_service::serve(addr, Arc::new(state)))
                .map_err(|e| CliError::new("annotation-service", e.to_string()))
        }
    }
}

fn synth_session(cfg: &PipelineConfig, id: &str, seed: u64, dir: &Path, force: bool) -> Result<()> {
    let manifest_path = dir.join(pipeline::MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(CliError::new("cli", format!("{} exists; pass --force to overwrite", manifest_path.display())));
    }
    let synth_err = |e: synth::SynthError| CliError::new("cli", e.to_string());
    let session = synth::generate(id, seed, &cfg.synth).map_err(synth_err)?;
    let manifest = synth::write_session(dir, &session).map_err(synth_err)?;
    let provenance = json!({"config_hash": cfg.hash(), "seed": seed, "synth": cfg.synth});
    write_json(Some(&dir.join("provenance.json")), true, &provenance)?;
    println!(
        "{}",
        json!({
            "manifest": manifest,
            "frames": session.truth.clock.frame_count,
            "spans": session.truth.spans.len(),
            "config_hash": cfg.hash(),
        })
    );
    Ok(())
}

fn rejected(errors: &[(u64, RowErrorKind)]) -> Value {
    errors.iter().map(|(row, kind)| json!({"row": row, "error": kind.to_string()})).collect()
}

fn ingest_report(cfg: &PipelineConfig, inputs: &[PathBuf], out: Option<&Path>, force: bool) -> Result<()> {
    let paths = pipeline::discover_manifests(inputs)?;
    let mut sessions = Vec::new();
    let mut total_rejected = 0;
    for path in &paths {
        let manifest = pipeline::load_manifest(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let s = &manifest.streams;
        let stream = |p: &Path| manifest.resolve(&base, p);
        let ingest_err = |p: PathBuf| move |source| CliError::from(PipelineError::Ingest { path: p, source });

        let kp_path = stream(&s.keypoints);
        let kp = ingest::scan_keypoints(open(&kp_path)?).map_err(ingest_err(kp_path.clone()))?;
        let ph_path = stream(&s.physio);
        let ph = ingest::scan_physio(open(&ph_path)?).map_err(ingest_err(ph_path.clone()))?;
        let an_path = stream(&s.annotations);
        let an = ingest::scan_annotations(open(&an_path)?).map_err(ingest_err(an_path.clone()))?;
        let au_path = stream(&s.audio);
        let audio = ingest::parse_audio(open(&au_path)?).map_err(ingest_err(au_path.clone()))?;

        total_rejected += kp.errors.len() + ph.errors.len() + an.errors.len();
        let missing: usize = kp.rows.iter().map(|f| f.joints.iter().filter(|j| j.is_none()).count()).sum();
        sessions.push(json!({
            "session_id": manifest.session_id,
            "manifest": path,
            "keypoints": {"rows": kp.rows.len(), "missing_joints": missing, "rejected": rejected(&kp.errors)},
            "physio": {"rows": ph.rows.len(), "rejected": rejected(&ph.errors)},
            "annotations": {"rows": an.rows.len(), "annotators": roster_of(&an.rows), "rejected": rejected(&an.errors)},
            "audio": {"sample_rate": audio.sample_rate, "samples": audio.samples.len(), "duration_ms": audio.duration_ms()},
        }));
    }
    write_json(out, force, &json!({"config_hash": cfg.hash(), "sessions": sessions}))?;
    if total_rejected > 0 {
        return Err(CliError::new("ingest", format!("{total_rejected} rows rejected")));
    }
    Ok(())
}

fn fuse_labels(cfg: &PipelineConfig, manifest: &Path, log: Option<&Path>, out: Option<&Path>, force: bool) -> Result<()> {
    let raw = pipeline::load_session(manifest)?;
    let aligned = pipeline::align_raw(&raw)?;
    let (spans, roster) = match log {
        None => (raw.spans.clone(), roster_of(&raw.spans)),
        Some(path) => {
            let first = open(path)?
                .lines()
                .map_while(std::result::Result::ok)
                .find(|l| !l.trim().is_empty())
                .unwrap_or_default();
            if looks_like_log(&first) {
                let state = replay_file(path).map_err(|e| CliError::new("annotation-service", format!("{}: {e}", path.display())))?;
                (state.live_spans(), state.roster())
            } else {
                let spans = pipeline::load_annotations(path)?;
                let roster = roster_of(&spans);
                (spans, roster)
            }
        }
    };
    let timeline = fuse_session(&spans, &aligned.clock, &roster)
        .require_sufficient()
        .map_err(|source| PipelineError::Fusion { session: raw.manifest.session_id.clone(), source })?;
    let mut w = sink(out, force)?;
    timeline.write_csv(&mut w, Some(&hash_comment(cfg))).map_err(io_error(manifest))?;
    finish(w, out)
}
