use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixture.toml");

fn ace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ace")).args(args).output().expect("ace runs")
}

fn ok(args: &[&str]) -> String {
    let out = ace(args);
    assert!(
        out.status.success(),
        "ace {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

struct Assets {
    _dir: tempfile::TempDir,
    root: PathBuf,
    classifier: String,
    denoiser: String,
}

fn assets() -> &'static Assets {
    static ASSETS: OnceLock<Assets> = OnceLock::new();
    ASSETS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let classifier = root.join("cls.ckpt").display().to_string();
        let denoiser = root.join("ddpm.ckpt").display().to_string();
        ok(&["--config", FIXTURE, "train-classifier", "--out", &classifier]);
        ok(&["--config", FIXTURE, "train-ddpm", "--out", &denoiser]);
        Assets { _dir: dir, root, classifier, denoiser }
    })
}

fn explain_args<'a>(a: &'a Assets, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--config", FIXTURE, "explain", "--classifier", &a.classifier, "--denoiser", &a.denoiser, "--dataset",
        "synthetic", "--index", "3", "--seed", "7", "--out", out,
    ];
    v.extend_from_slice(extra);
    v
}

const SUBCOMMANDS: [(&str, &[&str]); 8] = [
    ("train-ddpm", &["--dataset", "--seed", "--out", "--preset", "--config", "--set"]),
    ("train-classifier", &["--role", "--dataset", "--seed", "--out"]),
    ("explain", &["--classifier", "--denoiser", "--image", "--dataset", "--split", "--index", "--target", "--seed", "--out", "--canonical"]),
    ("diversity", &["--classifier", "--denoiser", "--seeds", "--out", "--canonical"]),
    ("evaluate", &["--runs", "--metrics", "--seed", "--classifier", "--fid-encoder", "--fs-encoder", "--s3-encoder", "--out"]),
    ("serve", &["--listen", "--data-root", "--slots", "--queue-capacity", "--strict-ingest", "--ui-dir", "ACE_LISTEN", "ACE_DATA_ROOT", "ACE_SLOTS", "ACE_STRICT_INGEST"]),
    ("ingest", &["--dir", "--manifest", "--name", "--test-fraction", "--seed", "--lenient", "--out"]),
    ("config", &["--preset", "--config", "--set"]),
];

#[test]
fn help_documents_every_flag() {
    let top = ok(&["--help"]);
    for (name, flags) in SUBCOMMANDS {
        assert!(top.contains(name), "{name} missing from top-level help");
        let help = ok(&[name, "--help"]);
        for flag in flags {
            assert!(help.contains(flag), "`ace {name} --help` does not mention {flag}");
        }
    }
}

#[test]
fn config_problems_are_listed_together_with_exit_2() {
    let out = ace(&[
        "--set", "explain.attack.bogus=1", "--set", "explain.refine.dilation=4", "--preset", "nope", "config",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("bogus") && msg.contains("nope"), "{msg}");
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);

    let out = ace(&["--set", "explain.refine.dilation=4", "--set", "explain.refine.threshold=2", "config"]);
    let msg = error_line(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("dilation") && msg.contains("threshold"), "{msg}");
}

#[test]
fn missing_assets_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").display().to_string();
    let missing = dir.path().join("absent.ckpt").display().to_string();
    let out = ace(&[
        "explain", "--classifier", &missing, "--denoiser", &missing, "--dataset", "synthetic", "--index", "0", "--out", &out,
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "not-found");
    let out = ace(&["--config", "/nonexistent/ace.toml", "config"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn effective_config_reflects_layers() {
    let text = ok(&["--preset", "desk", "--config", FIXTURE, "--set", "explain.attack.tau=3", "config"]);
    assert!(text.contains("tau = 3"), "{text}");
    assert!(text.contains("respacing = 20"), "{text}");
}

#[test]
fn explain_writes_a_reproducible_run_directory() {
    let a = assets();
    let first = a.root.join("explain-a").display().to_string();
    let second = a.root.join("explain-b").display().to_string();
    ok(&explain_args(a, &first, &["--canonical"]));
    ok(&explain_args(a, &second, &["--canonical"]));
    for name in ["input.png", "pre_explanation.png", "mask.png", "counterfactual.png", "manifest.json"] {
        assert!(Path::new(&first).join(name).exists(), "{name} missing");
    }
    let m1 = std::fs::read(Path::new(&first).join("manifest.json")).unwrap();
    let m2 = std::fs::read(Path::new(&second).join("manifest.json")).unwrap();
    assert_eq!(m1, m2);
    let manifest: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["attack"]["tau"], 2);
    assert_eq!(manifest["invocation"]["config_file"], FIXTURE);
    assert!(manifest.get("timing").is_none());

    let timed = a.root.join("explain-timed").display().to_string();
    ok(&explain_args(a, &timed, &[]));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(Path::new(&timed).join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["created_at"].is_string());
}

#[test]
fn explaining_towards_the_prediction_fails() {
    let a = assets();
    let out = a.root.join("degenerate").display().to_string();
    let pred: serde_json::Value = {
        let probe = a.root.join("degenerate-probe").display().to_string();
        serde_json::from_str(&ok(&explain_args(a, &probe, &[]))).unwrap()
    };
    let source = pred["source_label"].as_u64().unwrap().to_string();
    let res = ace(&explain_args(a, &out, &["--target", &source]));
    assert_eq!(res.status.code(), Some(3));
    assert!(error_line(&res)["message"].as_str().unwrap().contains("target equals prediction"));
    assert!(!Path::new(&out).join("manifest.json").exists());
}

#[test]
fn evaluation_is_byte_identical_across_invocations() {
    let a = assets();
    let runs = a.root.join("diverse").display().to_string();
    let summary: serde_json::Value = serde_json::from_str(&ok(&[
        "--config", FIXTURE, "diversity", "--classifier", &a.classifier, "--denoiser", &a.denoiser, "--dataset",
        "synthetic", "--index", "5", "--seeds", "11,12,13", "--out", &runs, "--canonical",
    ]))
    .unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 3);
    assert!(summary["sigma_l"].as_f64().unwrap() >= 0.0);
    assert!(Path::new(&runs).join("diversity.json").exists());

    let report = |file: &str| {
        let path = a.root.join(file).display().to_string();
        ok(&[
            "evaluate", "--runs", &runs, "--metrics", "flip-rate,cout,diversity", "--seed", "7", "--classifier",
            &a.classifier, "--out", &path,
        ]);
        std::fs::read(path).unwrap()
    };
    let r1 = report("report-1.json");
    let r2 = report("report-2.json");
    assert_eq!(r1, r2);
    let value: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(value["counts"]["runs"], 3);
    assert_eq!(value["seed"], 7);
    assert!(value["flip_rate"].is_number());

    let out = ace(&["evaluate", "--runs", &runs, "--metrics", "s3"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = ace(&["evaluate", "--runs", &runs, "--metrics", "accuracy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_builds_a_dataset_archive() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    let mut labels = String::new();
    for i in 0..12 {
        let v = if i % 2 == 0 { 0u8 } else { 255 };
        let img = image::GrayImage::from_pixel(8, 8, image::Luma([v]));
        img.save(images.join(format!("im-{i}.png"))).unwrap();
        labels.push_str(&format!("im-{i}.png,{}\n", if i % 2 == 0 { "dark" } else { "light" }));
    }
    labels.push_str("ghost.png,dark\n");
    std::fs::write(images.join("labels.csv"), labels).unwrap();
    let out = dir.path().join("set.dataset").display().to_string();
    let dir_arg = images.display().to_string();

    let strict = ace(&["ingest", "--dir", &dir_arg, "--out", &out]);
    assert!(!strict.status.success());
    assert!(error_line(&strict)["message"].as_str().unwrap().contains("ghost.png"));

    let report: serde_json::Value = serde_json::from_str(&ok(&["ingest", "--dir", &dir_arg, "--lenient", "--out", &out])).unwrap();
    assert_eq!(report["accepted"], 12);
    assert_eq!(report["issues"].as_array().unwrap().len(), 1);
    assert!(Path::new(&out).exists());
}
