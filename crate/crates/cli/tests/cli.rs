use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST_CONFIG: &str = r#"{
  "seed": 11,
  "synth": { "duration_s": 12.0 },
  "train": { "max_epochs": 3, "batch_size": 16 }
}"#;

fn qrs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrs"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn qrs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fast.json"), FAST_CONFIG).unwrap();
    dir
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == ext)
        })
        .count()
}

#[test]
fn generate_writes_triples_and_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    ok(&qrs(
        p,
        &["--config", "fast.json", "--out", "a", "generate", "-n", "5"],
    ));
    ok(&qrs(
        p,
        &["--config", "fast.json", "--out", "b", "generate", "-n", "5"],
    ));
    for ext in ["f32", "json", "ann"] {
        let expected = if ext == "json" { 5 + 2 } else { 5 };
        assert_eq!(count_ext(&p.join("a"), ext), expected, "{ext}");
    }
    for name in ["syn000.f32", "syn004.ann", "manifest.json"] {
        assert_eq!(
            fs::read(p.join("a").join(name)).unwrap(),
            fs::read(p.join("b").join(name)).unwrap()
        );
    }
}

#[test]
fn generate_zero_records_writes_manifest_only() {
    let dir = setup();
    ok(&qrs(dir.path(), &["--out", "empty", "generate", "-n", "0"]));
    let manifest = fs::read_to_string(dir.path().join("empty/manifest.json")).unwrap();
    assert!(manifest.contains("\"records\": []"));
    assert_eq!(count_ext(&dir.path().join("empty"), "f32"), 0);
}

#[test]
fn train_eval_detect_round_trip() {
    let dir = setup();
    let p = dir.path();
    ok(&qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--out",
            "data",
            "generate",
            "-n",
            "10",
        ],
    ));

    let train = qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--out",
            "models",
            "train",
            "--data",
            "data",
        ],
    );
    ok(&train);
    assert_eq!(count_ext(&p.join("models"), "qrscnn"), 5);
    assert_eq!(count_ext(&p.join("models"), "csv"), 5);
    assert!(String::from_utf8_lossy(&train.stdout).contains("fold 4: best val loss"));

    let eval = qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--out",
            "ev",
            "eval",
            "--data",
            "data",
            "--models",
            "models",
        ],
    );
    ok(&eval);
    let text = String::from_utf8_lossy(&eval.stdout);
    for level in ["none", "minimal", "moderate", "advanced"] {
        assert!(text.contains(level), "{text}");
    }
    let lines = fs::read_to_string(p.join("ev/records.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4 * 10);

    let model = "models/model_fold0.qrscnn";
    for (pp, out) in [("none", "d_none"), ("advanced", "d_adv")] {
        ok(&qrs(
            p,
            &[
                "--pp",
                pp,
                "--out",
                out,
                "detect",
                "--model",
                model,
                "--record",
                "data/syn001.f32",
                "--dump-stream",
            ],
        ));
    }
    let peaks = |d: &str| {
        fs::read_to_string(p.join(d).join("syn001.ann"))
            .unwrap()
            .lines()
            .count()
    };
    assert!(peaks("d_adv") > 0);
    assert!(peaks("d_adv") <= peaks("d_none"));
    let bits = fs::read_to_string(p.join("d_adv/syn001.bits")).unwrap();
    assert!(bits.trim().chars().all(|c| c == '0' || c == '1'));
}

#[test]
fn single_split_and_short_record() {
    let dir = setup();
    let p = dir.path();
    ok(&qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--out",
            "data",
            "generate",
            "-n",
            "10",
        ],
    ));
    ok(&qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--out",
            "one",
            "train",
            "--data",
            "data",
            "--folds",
            "1",
            "--no-cv",
        ],
    ));
    assert_eq!(count_ext(&p.join("one"), "qrscnn"), 1);

    // 1.5 s at 250 Hz: shorter than one window and not at the working rate
    let csv: String = (0..375)
        .map(|i| format!("{}\n", ((i as f32) * 0.05).sin()))
        .collect();
    fs::write(p.join("short.csv"), csv).unwrap();
    ok(&qrs(
        p,
        &[
            "--out",
            "short",
            "detect",
            "--model",
            "one/model_fold0.qrscnn",
            "--record",
            "short.csv",
            "--fs",
            "250",
        ],
    ));
    assert!(p.join("short/short.ann").exists());
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(
        qrs(p, &["--pp", "bogus", "generate"]).status.code(),
        Some(64)
    );
    assert_eq!(qrs(p, &["frobnicate"]).status.code(), Some(64));
    assert_eq!(qrs(p, &["--help"]).status.code(), Some(0));

    let missing = qrs(p, &["--out", "x", "train", "--data", "nowhere"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));

    ok(&qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--out",
            "data",
            "generate",
            "-n",
            "3",
        ],
    ));
    fs::remove_file(p.join("data/syn001.f32")).unwrap();
    let gone = qrs(p, &["--out", "x", "train", "--data", "data"]);
    assert_eq!(gone.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&gone.stderr).contains("syn001.f32"));

    let no_fs = qrs(
        p,
        &[
            "--out", "x", "detect", "--model", "m.qrscnn", "--record", "r.csv",
        ],
    );
    assert_eq!(no_fs.status.code(), Some(2));
}

#[test]
fn effective_config_reproduces_run() {
    let dir = setup();
    let p = dir.path();
    ok(&qrs(
        p,
        &[
            "--config",
            "fast.json",
            "--seed",
            "5",
            "--depth",
            "3",
            "--out",
            "a",
            "generate",
            "-n",
            "2",
        ],
    ));
    let dumped = fs::read_to_string(p.join("a/config.json")).unwrap();
    assert!(dumped.contains("\"depth\": 3"));
    ok(&qrs(
        p,
        &[
            "--config",
            "a/config.json",
            "--out",
            "b",
            "generate",
            "-n",
            "2",
        ],
    ));
    assert_eq!(
        fs::read(p.join("a/syn001.f32")).unwrap(),
        fs::read(p.join("b/syn001.f32")).unwrap()
    );
    assert_eq!(dumped, fs::read_to_string(p.join("b/config.json")).unwrap());
}

#[test]
fn default_output_is_timestamped() {
    let dir = setup();
    ok(&qrs(dir.path(), &["generate", "-n", "1"]));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    assert!(
        name.starts_with("generate-") && name.len() == "generate-YYYYmmdd-HHMMSS".len(),
        "{name}"
    );
}
