//! Acceptance suite: one PASS/FAIL/SKIPPED line per criterion.
//!
//! Every check compares library or CLI output against an oracle written here,
//! independently of the code under test.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fearscope_core::audio::{analysis_frames, AudioFeatureConfig, AudioFeatureExtractor};
use fearscope_core::ingest::AudioSignal;
use fearscope_core::labels::fuse;
use fearscope_core::metrics::evaluate;
use fearscope_core::model::FearLevel;
use fearscope_core::net::{
    attention, batch_loss, dropout_mask, loss_and_gradients_with_masks, softmax, Example, FearNetParams, NetConfig,
};
use fearscope_core::skeleton::fit_pca;
use fearscope_core::synth::{reference_label_fixture, GroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fearscope(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fearscope"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| format!("spawning fearscope: {e}"))?;
    if !out.status.success() {
        return Err(format!("fearscope {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// The rule as stated: strict majority, else the mean rounded half up, a mean in (0, 1) counting as 1.
fn literal_fusion(levels: &[u8]) -> u8 {
    let n = levels.len();
    for v in 0..=5u8 {
        if levels.iter().filter(|&&l| l == v).count() * 2 > n {
            return v;
        }
    }
    let mean = levels.iter().map(|&l| l as f64).sum::<f64>() / n as f64;
    if mean > 0.0 && mean < 1.0 {
        1
    } else {
        (mean + 0.5).floor() as u8
    }
}

fn fusion_oracle() -> Outcome {
    let mut cases = Vec::new();
    for a in 0..=5u8 {
        for b in 0..=5u8 {
            cases.push(vec![a, b]);
            for c in 0..=5u8 {
                cases.push(vec![a, b, c]);
            }
        }
    }
    ensure(cases.len() == 36 + 216, || format!("{} cases", cases.len()))?;
    for levels in &cases {
        let got = fuse(levels).map_err(|e| format!("{levels:?}: {e}"))?.value();
        ensure(got == literal_fusion(levels), || format!("{levels:?}: got {got}, oracle {}", literal_fusion(levels)))?;
    }
    Ok("36 pairs + 216 triples match".into())
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let cfg = NetConfig {
            input_dim: 8,
            hidden_size: 4,
            sequence_length: 5,
            num_classes: 3,
            fc_hidden: 6,
            dropout_rate: 0.5,
            seed,
            ..NetConfig::default()
        };
        let params = FearNetParams::init(&cfg).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..8 * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<Example<'_>> =
            inputs.iter().enumerate().map(|(i, x)| Example { features: x, target: i % 3 }).collect();
        let masks: Vec<Vec<f64>> = (0..3).map(|_| dropout_mask(&mut rng, cfg.fc_hidden, cfg.dropout_rate)).collect();
        let (_, grad) = loss_and_gradients_with_masks(&batch, &params, &cfg, Some(&masks)).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = grad.groups_ref().into_iter().flatten().copied().collect();
        let sizes: Vec<usize> = params.groups_ref().iter().map(|g| g.len()).collect();
        let eps = 1e-5;
        let mut flat = 0;
        for (g, &len) in sizes.iter().enumerate() {
            for j in 0..len {
                let mut plus = params.clone();
                plus.groups_mut()[g][j] += eps;
                let mut minus = params.clone();
                minus.groups_mut()[g][j] -= eps;
                let lp = batch_loss(&batch, &plus, &cfg, Some(&masks)).map_err(|e| e.to_string())?;
                let lm = batch_loss(&batch, &minus, &cfg, Some(&masks)).map_err(|e| e.to_string())?;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic[flat];
                worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
                flat += 1;
            }
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.2e} over 5 seeds"))
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fearscope(d, &["fixture", "--samples", "64", "--classes", "6", "--out", "fx"])?;
    let hyper = ["--set", "net.learning_rate=0.001", "--set", "net.batch_size=16", "--set", "net.epochs=200"];
    let mut args = vec!["train", "--data", "fx", "--classes", "6", "--out", "model.json", "--patience", "20"];
    args.extend(hyper);
    let summary: Value = serde_json::from_str(fearscope(d, &args)?.trim()).map_err(|e| e.to_string())?;
    fearscope(d, &["eval", "--data", "fx", "--checkpoint", "model.json", "--split", "train", "--out", "eval.json"])?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let acc = report["report"]["accuracy"].as_f64().ok_or("no accuracy in report")?;
    let epochs = summary["epochs_run"].as_u64().unwrap_or(0);
    ensure(epochs <= 200, || format!("{epochs} epochs"))?;
    ensure(acc >= 0.95, || format!("train accuracy {acc:.4} after {epochs} epochs"))?;
    Ok(format!("train accuracy {acc:.4} after {epochs} epochs"))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for draw in 0..1000 {
        let steps = rng.random_range(1..=20);
        let width = rng.random_range(1..=12);
        let a = rng.random_range(1..=12);
        let scale = [0.1, 1.0, 10.0][draw % 3];
        let states: Vec<Vec<f64>> =
            (0..steps).map(|_| (0..width).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect();
        let w: Vec<f64> = (0..width * a).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..a).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let trace = attention(&states, &w, &proj).map_err(|e| e.to_string())?;
        ensure(trace.weights.iter().all(|&x| x >= 0.0), || format!("draw {draw}: negative weight"))?;
        let sum: f64 = trace.weights.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("draw {draw}: weights sum to {sum}"))?;
        let offset = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = trace.raw_scores.iter().map(|s| s + offset).collect();
        let moved = softmax(&shifted);
        for (x, y) in trace.weights.iter().zip(&moved) {
            ensure((x - y).abs() <= 1e-12, || format!("draw {draw}: offset {offset} changes weight {x} -> {y}"))?;
        }
    }
    Ok("1000 draws".into())
}

fn pca() -> Outcome {
    let dim = 75;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let basis: Vec<Vec<f64>> = (0..10).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..300)
        .map(|_| {
            let c: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            (0..dim).map(|j| (0..10).map(|k| c[k] * basis[k][j]).sum::<f64>() + 2.0).collect()
        })
        .collect();
    let model = fit_pca(&rows, 0.999999).map_err(|e| e.to_string())?;
    ensure(model.components.len() == 10, || format!("rank-10 data kept {} components", model.components.len()))?;
    ensure(model.retained_ratio >= 0.999999, || format!("retained ratio {}", model.retained_ratio))?;
    for (i, u) in model.components.iter().enumerate() {
        for (j, v) in model.components.iter().enumerate() {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            ensure((dot - want).abs() <= 1e-8, || format!("components {i},{j}: dot {dot}"))?;
        }
    }

    // Eigenvalues against an independent symmetric eigensolver.
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = nalgebra::DMatrix::from_fn(dim, dim, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)
    });
    let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let scale = eig[0];
    for (k, (got, want)) in model.explained_variance.iter().zip(&eig).enumerate() {
        ensure((got - want).abs() <= 1e-8 * scale, || format!("eigenvalue {k}: {got} vs {want}"))?;
    }

    let mut iso = Vec::new();
    for j in 0..dim {
        for s in [-1.0, 1.0] {
            let mut r = vec![0.0; dim];
            r[j] = s;
            iso.push(r);
        }
    }
    let k = fit_pca(&iso, 0.98).map_err(|e| e.to_string())?.components.len();
    ensure(k == 74, || format!("isotropic data kept {k} components"))?;
    Ok(format!("rank-10 → k=10 (ratio {:.7}); isotropic → k=74", model.retained_ratio))
}

fn tone(freq: f64, rate: u32, len: usize) -> AudioSignal {
    AudioSignal {
        sample_rate: rate,
        samples: (0..len).map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect(),
    }
}

fn dsp() -> Outcome {
    let cfg = AudioFeatureConfig::default();
    let extractor = AudioFeatureExtractor::new(cfg.clone(), 16_000).map_err(|e| e.to_string())?;
    let bin = 16_000.0 / cfg.window as f64;
    let first = |s: &AudioSignal| -> Result<_, String> {
        let windows = analysis_frames(s, cfg.window, cfg.hop).map_err(|e| e.to_string())?;
        Ok((windows[0].raw.clone(), extractor.feature_vector(&windows[0]).map_err(|e| e.to_string())?))
    };

    let (_, f) = first(&tone(1000.0, 16_000, cfg.window))?;
    let centroid = f.spectral_centroid;
    ensure((centroid - 1000.0).abs() <= bin, || format!("1 kHz centroid {centroid}"))?;

    let (raw, f) = first(&tone(440.0, 16_000, cfg.window))?;
    let mut changes = 0usize;
    for i in 1..raw.len() {
        if (raw[i - 1] > 0.0 && raw[i] < 0.0) || (raw[i - 1] < 0.0 && raw[i] > 0.0) {
            changes += 1;
        }
    }
    let expected = changes as f64 / (raw.len() - 1) as f64;
    ensure(f.zcr == expected, || format!("440 Hz ZCR {} vs {changes} crossings ({expected})", f.zcr))?;

    let silence = AudioSignal { sample_rate: 16_000, samples: vec![0.0; cfg.window] };
    let (_, f) = first(&silence)?;
    let spectral = [f.spectral_centroid, f.spectral_bandwidth, f.spectral_rolloff, f.chroma_mean, f.rmse, f.zcr];
    ensure(spectral.iter().all(|&v| v == 0.0), || format!("silence gives {spectral:?}"))?;
    Ok(format!("centroid {centroid:.2} Hz, ZCR {changes} crossings, silence all zero"))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    for (session, data) in [("s7", "ds"), ("s7-again", "ds-again")] {
        fearscope(d, &["synth", "--seed", "7", "--seconds", "10", "--fps", "30", "--session-id", "synth-7", "--out", session])?;
        fearscope(d, &["build", session, "--out", data])?;
    }
    for (a, b) in [("s7", "s7-again"), ("ds", "ds-again")] {
        let mut names: Vec<_> = std::fs::read_dir(d.join(a)).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            let x = std::fs::read(d.join(a).join(&name)).map_err(|e| e.to_string())?;
            let y = std::fs::read(d.join(b).join(&name)).map_err(|e| e.to_string())?;
            ensure(x == y, || format!("{a}/{name:?} differs between runs"))?;
        }
    }

    let csv = std::fs::read_to_string(d.join("ds/synth-7.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    ensure(header.len() == 1 + 61 + 3, || format!("{} columns", header.len()))?;
    ensure(header[62..] == ["label_a", "label_b", "label_fused"], || format!("label columns {:?}", &header[62..]))?;
    let rows = &lines[1..];
    ensure(rows.len() == 300, || format!("{} rows", rows.len()))?;

    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(d.join("s7/truth.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(!truth.spans.is_empty() && truth.frame_levels.iter().any(|&l| l > 0), || "no planted spans".into())?;
    for (i, row) in rows.iter().enumerate() {
        let fused: u8 = row.rsplit(',').next().unwrap().parse().map_err(|_| format!("row {i}: bad label"))?;
        ensure(fused == truth.frame_levels[i], || format!("frame {i}: fused {fused}, planted {}", truth.frame_levels[i]))?;
    }
    let fused_csv = fearscope(d, &["fuse-labels", "--manifest", "s7/manifest.json"])?;
    let from_cli: Vec<u8> = fused_csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    ensure(from_cli == truth.frame_levels, || "fuse-labels disagrees with planted labels".into())?;
    Ok(format!("300 rows × (61 + 3), byte-identical rerun, {} planted spans recovered", truth.spans.len()))
}

fn metrics_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for set in 0..100 {
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=500);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let r = evaluate(&pred, &truth, classes).map_err(|e| e.to_string())?;
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        let acc = correct as f64 / n as f64;
        ensure(r.accuracy == acc, || format!("set {set}: accuracy {} vs {acc}", r.accuracy))?;
        ensure(r.weighted_recall == r.accuracy, || format!("set {set}: weighted recall {} vs {}", r.weighted_recall, r.accuracy))?;
    }
    let labels = reference_label_fixture();
    let truth: Vec<usize> = labels.iter().map(|l| l.value() as usize).collect();
    let baseline = vec![FearLevel::NONE.value() as usize; truth.len()];
    let acc = evaluate(&baseline, &truth, 6).map_err(|e| e.to_string())?.accuracy;
    ensure((acc - 0.5818).abs() <= 1e-4, || format!("baseline accuracy {acc}"))?;
    Ok(format!("100 sets exact; level-0 baseline {acc:.5}"))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "fusion oracle", budget: Duration::from_secs(1), run: fusion_oracle },
        Criterion { name: "gradient check", budget: Duration::from_secs(30), run: gradient_check },
        Criterion { name: "overfit", budget: Duration::from_secs(120), run: overfit },
        Criterion { name: "attention invariants", budget: Duration::from_secs(10), run: attention_invariants },
        Criterion { name: "pca", budget: Duration::from_secs(30), run: pca },
        Criterion { name: "dsp oracles", budget: Duration::from_secs(10), run: dsp },
        Criterion { name: "end-to-end determinism", budget: Duration::from_secs(60), run: end_to_end },
        Criterion { name: "metrics identity", budget: Duration::from_secs(10), run: metrics_identity },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed > c.budget {
                Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("PASS  {:<24} {:>8.2?}  {detail}", c.name, elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<24} {:>8.2?}  {why}", c.name, elapsed);
            }
        }
    }
    println!("SKIP  {:<24} {:>8}  needs the external recorded dataset; not run at desk scale", "real-dataset fidelity", "-");
    println!("acceptance: {} passed, {failed} failed, 1 skipped", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
