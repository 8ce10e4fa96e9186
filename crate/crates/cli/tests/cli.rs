use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setlist_core::catalog::read_setlist_document;

fn setlist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setlist")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = setlist(args);
    assert!(
        out.status.success(),
        "setlist {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    setlist(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ten references and two concerts; small enough for the fast backends.
fn dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&["synth", "--seed", "5", "--n-refs", "10", "--n-concerts", "2", "--out-dir", s(&out)]);
    out.join("manifest.jsonl")
}

fn documents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut docs: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".setlist.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    docs.sort();
    docs
}

#[test]
fn synth_identify_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let summary = ok(&["ingest", "--manifest", s(&manifest)]);
    assert!(summary.starts_with("10 references"), "{summary}");

    let results = tmp.path().join("results");
    let printed = ok(&["identify", "--manifest", s(&manifest), "--out-dir", s(&results), "--backend", "embed-fallback", "--dump-raw"]);
    assert_eq!(printed.lines().count(), 2);
    assert_eq!(documents(&results).len(), 2);
    assert!(results.join("concert_000.raw.csv").is_file());
    assert!(results.join("concert_000.windows.csv").is_file());

    let report = ok(&["evaluate", "--manifest", s(&manifest), "--results", s(&results)]);
    assert!(report.starts_with("concert_id,group,TP,FP,DAP,DLP,TA,TL"));
    let total = report.lines().last().unwrap();
    assert!(total.starts_with("*,total,"), "{total}");
    let dap: f64 = total.split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(dap, 1.0);
    assert!(results.join("report.csv").is_file() && results.join("report.json").is_file());
}

#[test]
fn raw_dump_reingests_to_identical_documents() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    ok(&["identify", "--manifest", s(&manifest), "--out-dir", s(&first), "--backend", "2dftm", "--dump-raw"]);
    ok(&["identify", "--manifest", s(&manifest), "--out-dir", s(&second), "--backend", "2dftm", "--from-raw", s(&first)]);
    assert_eq!(documents(&first), documents(&second));
}

#[test]
fn parallelism_does_not_change_documents() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let (a, b) = (tmp.path().join("p1"), tmp.path().join("p4"));
    ok(&["identify", "--manifest", s(&manifest), "--out-dir", s(&a), "--backend", "2dftm", "--parallelism", "1"]);
    ok(&["identify", "--manifest", s(&manifest), "--out-dir", s(&b), "--backend", "2dftm", "--parallelism", "4"]);
    assert_eq!(documents(&a), documents(&b));
}

#[test]
fn classifier_training_and_use() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth", "--seed", "9", "--n-refs", "12", "--n-distractors", "12", "--n-concerts", "4", "--noise-level", "0.9",
        "--out-dir", s(&data),
    ]);
    let manifest = data.join("manifest.jsonl");
    let results = tmp.path().join("results");
    ok(&["identify", "--manifest", s(&manifest), "--out-dir", s(&results), "--backend", "embed-fallback"]);
    let clf = tmp.path().join("clf.json");
    let trained = ok(&["train-classifier", "--manifest", s(&manifest), "--results", s(&results), "--out", s(&clf)]);
    assert!(trained.starts_with("trained embed-fallback-w120-h30 on "), "{trained}");
    let filtered = tmp.path().join("filtered");
    ok(&[
        "identify", "--manifest", s(&manifest), "--out-dir", s(&filtered), "--backend", "embed-fallback",
        "--classifier", s(&clf),
    ]);
    let doc = read_setlist_document(filtered.join("concert_000.setlist.json")).unwrap();
    assert_eq!(doc.config().classifier_id.as_deref(), Some("embed-fallback-w120-h30"));
    ok(&["evaluate", "--manifest", s(&manifest), "--results", s(&filtered), "--all-entries"]);
}

#[test]
fn bench_emits_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let out = tmp.path().join("bench.csv");
    let csv = ok(&["bench", "--manifest", s(&manifest), "--backends", "2dftm,embed-fallback", "--out", s(&out)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("backend,repeats,n_refs,n_windows"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2dftm,3,10,"));
    assert_eq!(std::fs::read_to_string(out).unwrap(), csv);
}

#[test]
fn config_file_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path());
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "backend = \"2dftm\"\nwindow_s = 180.0\nhop_s = 60.0\n").unwrap();
    let results = tmp.path().join("results");
    ok(&[
        "identify", "--manifest", s(&manifest), "--out-dir", s(&results), "--backend", "embed-fallback", "--window-s",
        "120", "--concert", "concert_001", "--config", s(&cfg),
    ]);
    let doc = read_setlist_document(results.join("concert_001.setlist.json")).unwrap();
    assert_eq!(doc.config().backend, "2dftm");
    assert_eq!((doc.config().window_s, doc.config().hop_s), (180.0, 60.0));
    assert!(!results.join("concert_000.setlist.json").exists());
}

#[test]
fn ingest_converts_csv_features() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut csv = String::from("frame,b0,b1,b2,b3,b4,b5,b6,b7,b8,b9,b10,b11\n");
    for f in 0..50 {
        let row: Vec<String> = (0..12).map(|b| format!("{}", ((f * 7 + b * 3) % 11) as f32 / 10.0)).collect();
        csv.push_str(&format!("{f},{}\n", row.join(",")));
    }
    std::fs::write(dir.join("song.csv"), &csv).unwrap();
    std::fs::write(dir.join("show.csv"), &csv).unwrap();
    std::fs::write(dir.join("show_ann.csv"), "song_id,start_s,end_s\nsong,0.0,5.0\n").unwrap();
    std::fs::write(
        dir.join("manifest.jsonl"),
        concat!(
            r#"{"kind":"reference","track_id":"song","feature_path":"song.csv","artist":"x","title":"y"}"#,
            "\n",
            r#"{"kind":"concert","concert_id":"show","feature_path":"show.csv","annotation_path":"show_ann.csv","audio_quality":"AQ-C","genre":"indie"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.join("bin");
    let summary = ok(&["ingest", "--manifest", s(&dir.join("manifest.jsonl")), "--frame-rate", "10", "--out-dir", s(&out)]);
    assert!(summary.starts_with("1 references (5 s), 1 concerts (5 s), 1 annotations"), "{summary}");
    assert!(out.join("references/song.slpc").is_file());
    let again = ok(&["ingest", "--manifest", s(&out.join("manifest.jsonl"))]);
    assert!(again.starts_with("1 references (5 s)"), "{again}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = s(tmp.path());
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["identify", "--manifest", "m.jsonl"]), 1);
    assert_eq!(code(&["identify", "--manifest", "missing.jsonl", "--out-dir", dir, "--backend", "fast"]), 1);
    assert_eq!(code(&["identify", "--manifest", "missing.jsonl", "--out-dir", dir, "--window-s", "10", "--hop-s", "20"]), 1);
    assert_eq!(code(&["identify", "--manifest", "missing.jsonl", "--out-dir", dir, "--backend", "embed"]), 1);
    assert_eq!(code(&["identify", "--manifest", "missing.jsonl", "--out-dir", dir]), 2);
    assert_eq!(code(&["ingest", "--manifest", "missing.jsonl", "--parallelism", "0"]), 1);

    let manifest = dataset(tmp.path());
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["evaluate", "--manifest", s(&manifest), "--results", s(&empty)]), 2);
    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "windw_s = 3.0\n").unwrap();
    assert_eq!(code(&["evaluate", "--manifest", s(&manifest), "--results", s(&empty), "--config", s(&bad_cfg)]), 1);
    assert_eq!(code(&["identify", "--manifest", s(&manifest), "--out-dir", dir, "--concert", "nope"]), 2);
}
