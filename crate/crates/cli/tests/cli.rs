use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rigsynth::audio2rig::{infer, read_weights, InferenceConfig};
use rigsynth::blink::{synth::dip_and_glitch_trace, write_ear_csv};
use rigsynth::featio::read_feature_file;
use rigsynth::postfx::{postprocess, SmoothConfig};
use rigsynth::rig::{ControllerMap, EmotionLabel, EmotionTimeline, EyeRole};
use rigsynth::rigcsv::format_sig9;

const BIN: &str = env!("CARGO_BIN_EXE_rigsynth");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("RIGSYNTH_CONTROLLER_MAP").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temp dir holding a small synthetic clip and a desk model for it.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["gen-synthetic", "--out", s(&data), "--clips", "2", "--feature-dim", "8", "--seed", "3"]);
        let weights = dir.path().join("model.emow");
        ok(&["init", "--feature-dim", "8", "--d-model", "16", "--seed", "5", "--out", s(&weights)]);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn features(&self) -> PathBuf {
        self.path("data/clip000.features.emof")
    }

    fn infer(&self, out: &str, extra: &[&str]) -> Output {
        let (f, w, o) = (self.features(), self.path("model.emow"), self.path(out));
        let mut args = vec!["infer", "--features", s(&f), "--weights", s(&w), "--out", s(&o)];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn eye_channels(map: &ControllerMap) -> Vec<usize> {
    [EyeRole::LidClosure, EyeRole::GazeHorizontal, EyeRole::GazeVertical]
        .into_iter()
        .flat_map(|r| map.role_indices(r))
        .collect()
}

#[test]
fn seeded_infer_is_byte_identical() {
    let fx = Fixture::new();
    let flags = ["--emotion", "angry", "--seed", "7", "--blink", "--gaze"];
    assert!(fx.infer("a.csv", &flags).status.success());
    assert!(fx.infer("b.csv", &flags).status.success());
    assert_eq!(std::fs::read(fx.path("a.csv")).unwrap(), std::fs::read(fx.path("b.csv")).unwrap());
    assert_eq!(std::fs::read(fx.path("a.csv.json")).unwrap(), std::fs::read(fx.path("b.csv.json")).unwrap());
}

#[test]
fn sidecar_records_provenance() {
    let fx = Fixture::new();
    assert!(fx.infer("a.csv", &["--emotion", "sad", "--seed", "9"]).status.success());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fx.path("a.csv.json")).unwrap()).unwrap();
    assert_eq!(side["fps"], 60.0);
    assert_eq!(side["seed"], 9);
    assert_eq!(side["feature_family"], "synthetic");
    assert_eq!(side["weights_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(side["flags"]["smooth"], true);
    assert_eq!(side["flags"]["blink"], false);
    let text = std::fs::read_to_string(fx.path("a.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, ControllerMap::default_map().names().collect::<Vec<_>>().join(","));
}

#[test]
fn eye_channels_are_model_output_when_injectors_are_off() {
    let fx = Fixture::new();
    assert!(fx.infer("plain.csv", &["--emotion", "happy"]).status.success());
    let map = ControllerMap::default_map();
    let model = read_weights(fx.path("model.emow")).unwrap();
    let feats = read_feature_file(fx.features()).unwrap();
    let timeline = EmotionTimeline::constant(EmotionLabel::Happy, feats.frames());
    let raw = infer(&feats, &timeline, &model, &InferenceConfig::default()).unwrap();
    let smoothed = postprocess(&raw, &map, Some(SmoothConfig::default())).unwrap();
    let rows = csv_rows(&fx.path("plain.csv"));
    assert_eq!(rows.len(), smoothed.len());
    for c in eye_channels(&map) {
        for (t, row) in rows.iter().enumerate() {
            assert_eq!(row[c], format_sig9(smoothed.values()[[t, c]]));
        }
    }

    // With injectors on only the eye channels move.
    assert!(fx.infer("live.csv", &["--emotion", "happy", "--blink", "--gaze", "--seed", "1"]).status.success());
    let live = csv_rows(&fx.path("live.csv"));
    let eyes = eye_channels(&map);
    for (a, b) in rows.iter().zip(&live) {
        for c in (0..map.len()).filter(|c| !eyes.contains(c)) {
            assert_eq!(a[c], b[c]);
        }
    }
    assert_ne!(rows, live);
}

#[test]
fn no_smooth_still_clamps() {
    let fx = Fixture::new();
    assert!(fx.infer("raw.csv", &["--emotion", "fear", "--no-smooth"]).status.success());
    let map = ControllerMap::default_map();
    for row in csv_rows(&fx.path("raw.csv")) {
        for (v, (lo, hi)) in row.iter().zip(map.bounds()) {
            let v: f64 = v.parse().unwrap();
            assert!(v >= lo && v <= hi);
        }
    }
}

#[test]
fn emotions_differ_only_through_the_emotion_pathway() {
    let fx = Fixture::new();
    let ablated = fx.path("ablated.emow");
    ok(&["init", "--feature-dim", "8", "--d-model", "16", "--seed", "5", "--ablate-emotion", "--out", s(&ablated)]);
    let f = fx.features();
    for (w, tag) in [(fx.path("model.emow"), "full"), (ablated.clone(), "abl")] {
        for e in ["happy", "sad"] {
            let out = fx.path(&format!("{tag}-{e}.csv"));
            ok(&["infer", "--features", s(&f), "--weights", s(&w), "--emotion", e, "--out", s(&out)]);
        }
    }
    let read = |n: &str| std::fs::read(fx.path(n)).unwrap();
    assert_ne!(read("full-happy.csv"), read("full-sad.csv"));
    assert_eq!(read("abl-happy.csv"), read("abl-sad.csv"));
}

#[test]
fn timeline_holds_labels_and_rejects_keys_past_the_end() {
    let fx = Fixture::new();
    let tl = fx.path("tl.csv");
    std::fs::write(&tl, "frame,label\n0,happy\n20,sad\n").unwrap();
    assert!(fx.infer("t.csv", &["--timeline", s(&tl)]).status.success());

    let frames = read_feature_file(fx.features()).unwrap().frames();
    std::fs::write(&tl, format!("frame,label\n0,happy\n{frames},sad\n")).unwrap();
    let out = fx.infer("t.csv", &["--timeline", s(&tl), "--json-errors"]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "data");
    assert!(err["error"]["message"].as_str().unwrap().contains("timeline length mismatch"));
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    // usage
    let out = run(&["infer", "--emotion", "happy", "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["exit_code"], 2);
    assert_eq!(fx.infer("x.csv", &["--emotion", "bored"]).status.code(), Some(2));
    // data: unknown map, from the flag and from the environment
    assert_eq!(fx.infer("x.csv", &["--emotion", "happy", "--map", "/no/such/map.json"]).status.code(), Some(3));
    let (f, w, o) = (fx.features(), fx.path("model.emow"), fx.path("x.csv"));
    let env_run = Command::new(BIN)
        .args(["infer", "--features", s(&f), "--weights", s(&w), "--emotion", "happy", "--out", s(&o)])
        .env("RIGSYNTH_CONTROLLER_MAP", "/no/such/map.json")
        .output()
        .unwrap();
    assert_eq!(env_run.status.code(), Some(3));
    // numeric
    assert_eq!(run(&["gradcheck", "--tolerance", "0"]).status.code(), Some(4));
}

#[test]
fn exported_map_is_accepted_from_the_environment() {
    let fx = Fixture::new();
    let map = fx.path("map.json");
    ok(&["export-map", "--out", s(&map)]);
    let (f, w, o) = (fx.features(), fx.path("model.emow"), fx.path("m.csv"));
    let out = Command::new(BIN)
        .args(["infer", "--features", s(&f), "--weights", s(&w), "--emotion", "happy", "--out", s(&o)])
        .env("RIGSYNTH_CONTROLLER_MAP", s(&map))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fx.infer("d.csv", &["--emotion", "happy"]).status.success());
    assert_eq!(std::fs::read(o).unwrap(), std::fs::read(fx.path("d.csv")).unwrap());
}

fn write_tone(path: &Path, seconds: f64) {
    let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..(16_000.0 * seconds) as usize {
        let t = i as f64 / 16_000.0;
        w.write_sample(((std::f64::consts::TAU * 220.0 * t).sin() * 8000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn audio_requires_a_reference_feature_model() {
    let fx = Fixture::new();
    let wav = fx.path("tone.wav");
    write_tone(&wav, 1.0);
    let w = fx.path("model.emow");
    let out = run(&["infer", "--audio", s(&wav), "--weights", s(&w), "--emotion", "happy", "--out", s(&fx.path("a.csv"))]);
    assert_eq!(out.status.code(), Some(3));

    let mfcc = fx.path("mfcc.emow");
    ok(&["init", "--feature-dim", "13", "--d-model", "16", "--feature-family", "reference-mfcc", "--out", s(&mfcc)]);
    let o = fx.path("a.csv");
    ok(&["infer", "--audio", s(&wav), "--weights", s(&mfcc), "--emotion", "happy", "--out", s(&o)]);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fx.path("a.csv.json")).unwrap()).unwrap();
    assert_eq!(side["reference_features"], true);
    assert_eq!(side["feature_family"], "reference-mfcc");
    let rows = csv_rows(&o);
    assert!((58..=62).contains(&rows.len()), "{}", rows.len());
}

#[test]
fn train_writes_weights_and_a_loss_curve() {
    let fx = Fixture::new();
    let (m, w, l) = (fx.path("data/manifest.json"), fx.path("trained.emow"), fx.path("loss.csv"));
    let args = ["train", "--manifest", s(&m), "--d-model", "16", "--epochs", "5", "--lr", "1e-3", "--out", s(&w), "--loss", s(&l)];
    ok(&args);
    let curve = std::fs::read_to_string(&l).unwrap();
    assert_eq!(curve.lines().next(), Some("epoch,lr,loss"));
    assert_eq!(curve.lines().count(), 6);
    let first = std::fs::read(&w).unwrap();
    ok(&args);
    assert_eq!(first, std::fs::read(&w).unwrap());
    assert!(read_weights(&w).is_ok());
}

#[test]
fn blink_detect_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    write_ear_csv(&dip_and_glitch_trace(), std::fs::File::create(&trace).unwrap()).unwrap();
    let count = |out: Output| String::from_utf8(out.stdout).unwrap().lines().count() - 1;
    assert_eq!(count(ok(&["blink-detect", "--trace", s(&trace)])), 1);
    assert_eq!(count(ok(&["blink-detect", "--trace", s(&trace), "--threshold", "0.2"])), 2);

    let rates = dir.path().join("rates.csv");
    std::fs::write(&rates, "rate\n20\n40\n30\n250\n").unwrap();
    let model: serde_json::Value = serde_json::from_slice(&ok(&["blink-fit", "--rates", s(&rates)]).stdout).unwrap();
    let logs = [20f64.ln(), 40f64.ln(), 30f64.ln()];
    let mu = logs.iter().sum::<f64>() / 3.0;
    assert!((model["mu_ln"].as_f64().unwrap() - mu).abs() < 1e-12);

    let clf = dir.path().join("clf.json");
    ok(&["blink-train", "--synthetic", "10", "--out", s(&clf)]);
    assert_eq!(count(ok(&["blink-detect", "--trace", s(&trace), "--classifier", s(&clf)])), 1);
    let fit = ok(&["blink-fit", "--traces", s(&trace), s(&trace), "--classifier", s(&clf)]);
    let model: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    // one blink in 40 frames at 30 fps is 45 per minute
    assert!((model["mu_ln"].as_f64().unwrap() - 45f64.ln()).abs() < 1e-12);
}

#[test]
fn analyze_reports_mae_and_correlation() {
    let fx = Fixture::new();
    assert!(fx.infer("p.csv", &["--emotion", "happy"]).status.success());
    assert!(fx.infer("q.csv", &["--emotion", "sad"]).status.success());
    let (p, q, corr) = (fx.path("p.csv"), fx.path("q.csv"), fx.path("corr.csv"));
    let out = ok(&["analyze", "--pred", s(&p), "--truth", s(&p), "--corr-out", s(&corr)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["full"], 0.0);
    assert!(std::fs::read_to_string(&corr).unwrap().lines().count() > 1);
    let out = ok(&["analyze", "--pred", s(&p), "--truth", s(&q)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["full"].as_f64().unwrap() > 0.0);
    assert_eq!(run(&["analyze", "--pred", s(&p)]).status.code(), Some(2));
}
