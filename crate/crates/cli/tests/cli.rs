use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const CONFIG: &str = "\
seed = 7

[sim]
n_origins = 50
variants = 2
dim = 32
strengths = 0.5

[profile seen]
sigma_resid = 0.6
style_seed = 1

[profile other]
sigma_resid = 0.4
style_seed = 2

[train]
rank = 8
total_steps = 200
batch_size = 32
peak_lr = 3e-3

[grid]
losses = cosface
ranks = 8
k = 10
";

fn oid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oid"))
        .args(args)
        .env_remove("OID_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = oid(args);
    assert!(
        out.status.success(),
        "oid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_kind(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(text.trim()).expect("stderr is one JSON object");
    v["error"]["kind"].as_str().unwrap().to_string()
}

struct Setup {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
}

fn setup() -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg = root.join("run.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    ok(&["simulate", "--config", s(&cfg), "--out", s(&root.join("data"))]);
    Setup { _tmp: tmp, root, cfg }
}

fn train_into(st: &Setup, out: &Path) {
    let d = st.root.join("data/train");
    ok(&[
        "train",
        "--config",
        s(&st.cfg),
        "--out",
        s(out),
        "--origins",
        s(&d.join("origins.oide")),
        "--generated",
        s(&d.join("queries_seen_0.5.oide")),
        "--truth",
        s(&d.join("truth.tsv")),
    ]);
}

#[test]
fn full_pipeline_smoke() {
    let start = Instant::now();
    let st = setup();
    let test = st.root.join("data/test");
    for f in ["origins.oide", "manifest.tsv", "truth.tsv", "queries_seen_0.5.oide", "queries_other_0.5.oide"] {
        assert!(test.join(f).is_file(), "missing {f}");
    }
    train_into(&st, &st.root.join("train"));
    let w = st.root.join("train/w.oide");
    let log = std::fs::read_to_string(st.root.join("train/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 200);

    ok(&[
        "project",
        "--out",
        s(&st.root.join("proj")),
        "--input",
        s(&test.join("origins.oide")),
        "--w",
        s(&w),
    ]);
    assert!(st.root.join("proj/projected.oide").is_file());

    ok(&[
        "search",
        "--config",
        s(&st.cfg),
        "--out",
        s(&st.root.join("search")),
        "--refs",
        s(&test.join("origins.oide")),
        "--queries",
        s(&test.join("queries_other_0.5.oide")),
        "--w",
        s(&w),
    ]);
    let results = std::fs::read_to_string(st.root.join("search/results.tsv")).unwrap();
    assert_eq!(results.lines().count(), 50 * 10);

    let line = ok(&[
        "eval",
        "--out",
        s(&st.root.join("eval")),
        "--results",
        s(&st.root.join("search/results.tsv")),
        "--truth",
        s(&test.join("truth.tsv")),
    ]);
    assert!(line.contains("mAP") && line.contains("Acc"), "{line}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(st.root.join("eval/report.json")).unwrap()).unwrap();
    let map = report["map"].as_f64().or(report["map_score"].as_f64()).unwrap();
    assert!((0.0..=1.0).contains(&map));

    ok(&[
        "diagnose",
        "--out",
        s(&st.root.join("diag")),
        "--w",
        s(&w),
        "--w",
        s(&w),
        "--origins",
        s(&test.join("origins.oide")),
        "--generated",
        s(&test.join("queries_seen_0.5.oide")),
        "--truth",
        s(&test.join("truth.tsv")),
    ]);
    let diag = std::fs::read_to_string(st.root.join("diag/diagnose.json")).unwrap();
    assert!(diag.contains("sv_cosine"));

    let table = ok(&["grid", "--config", s(&st.cfg), "--out", s(&st.root.join("grid"))]);
    assert!(table.contains("unseen avg"), "{table}");
    assert!(st.root.join("grid/w_cosface_r8.oide").is_file());

    for sub in ["simulate", "train", "project", "search", "eval", "diagnose", "grid"] {
        let dir = match sub {
            "simulate" => "data",
            "project" => "proj",
            "diagnose" => "diag",
            other => other,
        };
        assert!(st.root.join(dir).join(format!("{sub}.manifest.json")).is_file(), "{sub}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn reruns_and_replays_are_byte_identical() {
    let st = setup();
    train_into(&st, &st.root.join("a"));
    train_into(&st, &st.root.join("b"));
    ok(&[
        "replay",
        "--manifest",
        s(&st.root.join("a/train.manifest.json")),
        "--out",
        s(&st.root.join("c")),
    ]);
    let read = |d: &str, f: &str| std::fs::read(st.root.join(d).join(f)).unwrap();
    for f in ["w.oide", "train_log.jsonl"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
        assert_eq!(read("a", f), read("c", f), "{f}");
    }

    // Search and eval through replay, with a different thread count.
    let test = st.root.join("data/test");
    for (dir, threads) in [("s1", "1"), ("s2", "3")] {
        ok(&[
            "search",
            "--threads",
            threads,
            "--out",
            s(&st.root.join(dir)),
            "--refs",
            s(&test.join("origins.oide")),
            "--queries",
            s(&test.join("queries_seen_0.5.oide")),
            "--w",
            s(&st.root.join("a/w.oide")),
        ]);
    }
    assert_eq!(read("s1", "results.tsv"), read("s2", "results.tsv"));
    ok(&[
        "replay",
        "--manifest",
        s(&st.root.join("s1/search.manifest.json")),
        "--out",
        s(&st.root.join("s3")),
    ]);
    assert_eq!(read("s1", "results.tsv"), read("s3", "results.tsv"));
}

#[test]
fn truth_for_other_queries_is_reported() {
    let st = setup();
    let test = st.root.join("data/test");
    ok(&[
        "search",
        "--out",
        s(&st.root.join("search")),
        "--refs",
        s(&test.join("origins.oide")),
        "--queries",
        s(&test.join("queries_seen_0.5.oide")),
    ]);
    let foreign = st.root.join("foreign.tsv");
    std::fs::write(&foreign, "1\t2\n3\t4\n").unwrap();
    let out = oid(&[
        "eval",
        "--out",
        s(&st.root.join("eval")),
        "--results",
        s(&st.root.join("search/results.tsv")),
        "--truth",
        s(&foreign),
    ]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "missing-ground-truth");
}

#[test]
fn usage_and_config_errors() {
    let out = oid(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "[sim]\ndim = 16\nbogus = 1\n").unwrap();
    let out = oid(&["simulate", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "config");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = oid(&["eval", "--results", s(&tmp.path().join("none.tsv")), "--truth", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "io");

    let help = oid(&["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("replay"));
}
