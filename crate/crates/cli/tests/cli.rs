use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use fearscope_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fearscope")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// The single stderr line of a failed run, parsed.
fn failure(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    (out.status.code().unwrap(), serde_json::from_str(err.trim()).unwrap())
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--seed", "7", "--seconds", "10", "--fps", "30", "--out", "s7"]);
}

fn labels(csv: &str) -> Vec<u8> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn errors_are_single_json_lines_with_module() {
    let d = tempfile::tempdir().unwrap();
    let (code, v) = failure(d.path(), &["build", "--out", "x", "--bogus", "s"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["module"], "cli");

    let (_, v) = failure(d.path(), &["build", "missing", "--out", "x"]);
    assert_eq!(v["error"]["module"], "cli");

    std::fs::create_dir(d.path().join("bad")).unwrap();
    std::fs::write(d.path().join("bad/manifest.json"), "{\"schema_version\": 1}").unwrap();
    let (_, v) = failure(d.path(), &["build", "bad", "--out", "x"]);
    assert_eq!(v["error"]["module"], "core-model");

    synth(d.path());
    std::fs::write(d.path().join("s7/physio.csv"), "timestamp,heart_rate,breath_rate\n0,80,x\n").unwrap();
    let (_, v) = failure(d.path(), &["build", "s7", "--out", "x"]);
    assert_eq!(v["error"]["module"], "ingest");
    assert!(v["error"]["message"].as_str().unwrap().contains("physio.csv"));

    let (_, v) = failure(d.path(), &["train", "--data", "nowhere", "--classes", "3", "--out", "m.json"]);
    assert_eq!(v["error"]["module"], "cli");
    let (_, v) = failure(d.path(), &["stats", "s7", "--set", "net.hidden_size=0"]);
    assert_eq!(v["error"]["module"], "config");
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let (_, v) = failure(d.path(), &["synth", "--seed", "7", "--out", "s7"]);
    assert!(v["error"]["message"].as_str().unwrap().contains("--force"));
    ok(d.path(), &["synth", "--seed", "7", "--out", "s7", "--force"]);
    ok(d.path(), &["align", "--manifest", "s7/manifest.json", "--out", "aligned.csv"]);
    failure(d.path(), &["align", "--manifest", "s7/manifest.json", "--out", "aligned.csv"]);
    ok(d.path(), &["build", "s7", "--out", "ds"]);
    failure(d.path(), &["build", "s7", "--out", "ds"]);
    ok(d.path(), &["build", "s7", "--out", "ds", "--force"]);
}

#[test]
fn artifacts_carry_the_config_hash() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    std::fs::write(d.path().join("cfg.json"), r#"{"net": {"hidden_size": 8, "fc_hidden": 8, "epochs": 2}, "stride": 4}"#).unwrap();
    let base = ["--config", "cfg.json", "--seed", "3"];
    let configured = |extra: &[&str]| {
        let mut v = extra.to_vec();
        v.extend(base);
        ok(d.path(), &v)
    };

    let built: Value = serde_json::from_str(&configured(&["build", "s7", "--out", "ds"])).unwrap();
    let hash = built["config_hash"].as_str().unwrap().to_string();
    assert_eq!(built["frames"], 300);
    assert_eq!(built["feature_width"], 61);
    assert_eq!(built["pca_components"], 33);

    configured(&["align", "--manifest", "s7/manifest.json", "--out", "aligned.csv"]);
    configured(&["features", "--manifest", "s7/manifest.json", "--out", "audio.csv"]);
    configured(&["fuse-labels", "--manifest", "s7/manifest.json", "--out", "labels.csv"]);
    let comment = format!("# config_hash={hash}");
    for file in ["aligned.csv", "audio.csv", "labels.csv", "ds/synth-7.csv"] {
        let text = std::fs::read_to_string(d.path().join(file)).unwrap();
        assert_eq!(text.lines().next().unwrap(), comment, "{file}");
    }
    let features = std::fs::read_to_string(d.path().join("audio.csv")).unwrap();
    assert_eq!(features.lines().nth(1).unwrap().split(',').count(), 2 + 26);
    assert_eq!(features.lines().count(), 2 + 300);
    let dataset: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("ds/dataset.json")).unwrap()).unwrap();
    assert_eq!(dataset["config_hash"], hash.as_str());
    assert_eq!(dataset["config"]["net"]["hidden_size"], 8);
    assert_eq!(dataset["config"]["split"]["seed"], 3);

    let trained: Value =
        serde_json::from_str(&configured(&["train", "--data", "ds", "--classes", "2", "--out", "m.json", "--history", "h.csv"]))
            .unwrap();
    assert_eq!(trained["config_hash"], hash.as_str());
    assert_eq!(trained["epochs_run"], 2);
    assert_eq!(std::fs::read_to_string(d.path().join("h.csv")).unwrap().lines().next().unwrap(), comment);

    let table = ok(d.path(), &["eval", "--data", "ds", "--checkpoint", "m.json", "--split", "all", "--out", "eval.json"]);
    assert!(table.contains("accuracy"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], hash.as_str());
    assert_eq!(report["report"]["num_classes"], 2);
    assert_eq!(report["report"]["total"], (300 - 16) / 4 + 1);

    ok(d.path(), &["predict", "--data", "ds", "--checkpoint", "m.json", "--out", "pred.csv"]);
    let pred = std::fs::read_to_string(d.path().join("pred.csv")).unwrap();
    assert_eq!(pred.lines().next().unwrap(), comment);
    assert_eq!(pred.lines().count(), 2 + (300 - 16) / 4 + 1);

    let stats = ok(d.path(), &["stats", "--data", "ds", "--out", "stats.json"]);
    assert!(stats.contains("total 300 frames"));
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["config_hash"], hash.as_str());
}

#[test]
fn ingest_reports_rejected_rows() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let report: Value = serde_json::from_str(&ok(d.path(), &["ingest", "s7"])).unwrap();
    let s = &report["sessions"][0];
    assert_eq!(s["audio"]["samples"], 160_000);
    assert_eq!(s["physio"]["rows"], 6);
    assert_eq!(s["annotations"]["annotators"], json!(["a", "b"]));

    let path = d.path().join("s7/physio.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("500,80,15\n");
    std::fs::write(&path, text).unwrap();
    let out = run(d.path(), &["ingest", "s7"]);
    assert!(!out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["sessions"][0]["physio"]["rejected"].as_array().unwrap().len(), 1);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["module"], "ingest");
}

#[test]
fn insufficient_annotators_fail_fusion() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    std::fs::write(d.path().join("one.jsonl"), "{\"annotator_id\":\"a\",\"start\":0,\"end\":500,\"level\":3}\n").unwrap();
    let (_, v) = failure(d.path(), &["fuse-labels", "--manifest", "s7/manifest.json", "--log", "one.jsonl"]);
    assert_eq!(v["error"]["module"], "label-fusion");
}

#[tokio::test]
async fn service_log_fuses_like_the_service() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let store = d.path().join("store");
    let app = router(Arc::new(AppState::load(&[d.path().join("s7/manifest.json")], &store).unwrap()));
    let posts = [
        ("x", json!({"start": 1000, "end": 3000, "level": 4})),
        ("y", json!({"start": 2000, "end": 4000, "level": 1})),
        ("x", json!({"start": 2500, "end": 3500, "level": 5})),
        ("z", json!({"done": true})),
    ];
    for (who, body) in posts {
        let req = Request::post("/sessions/synth-7/annotations")
            .header("X-Annotator-Id", who)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::CREATED);
    }
    let res = app.oneshot(Request::get("/sessions/synth-7/fused").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let served: Value = serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
    let served: Vec<u8> = served["fused"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u8).collect();

    let log = store.join("synth-7.jsonl");
    let csv = ok(d.path(), &["fuse-labels", "--manifest", "s7/manifest.json", "--log", log.to_str().unwrap()]);
    assert!(csv.lines().nth(1).unwrap().starts_with("frame_index,label_x,label_y,label_z"));
    let offline = labels(&csv);
    assert_eq!(offline, served);
    assert!(offline.iter().any(|&l| l > 0));
}
