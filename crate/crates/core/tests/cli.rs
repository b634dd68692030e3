//! Black-box tests of the `bssad` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bssad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bssad")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SYNTH: &str = "\
# small series for command tests
latent_dim = 2
num_sensors = 3
length = 1000
seed = 11
segment = 820 40 spike
segment = 900 50 mean_shift
";

const SMALL_RUN: &str = "\
tau = 4
latent_dim = 2
hidden_dim = 6
epochs = 5
batch_size = 32
n_particles = 200
";

/// A small synthetic split and a model trained on its normal half, shared
/// by the tests that need one.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let fx = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(fx.path("synth.conf"), SMALL_SYNTH).unwrap();
        fs::write(fx.path("run.conf"), SMALL_RUN).unwrap();
        let out = bssad(&[
            "synth",
            "--config",
            s(&fx.path("synth.conf")),
            "--out",
            s(&fx.path("all.csv")),
            "--train-out",
            s(&fx.path("train.csv")),
            "--test-out",
            s(&fx.path("test.csv")),
            "--split-at",
            "800",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = bssad(&[
            "train",
            s(&fx.path("train.csv")),
            "--config",
            s(&fx.path("run.conf")),
            "--out",
            s(&fx.path("model.txt")),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fx
    })
}

fn csv_rows(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().map(str::to_string);
    let header = lines.next().unwrap();
    (header, lines.collect())
}

#[test]
fn synth_is_deterministic_and_reports_anomaly_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("synth.conf");
    fs::write(&conf, SMALL_SYNTH).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let out_a = bssad(&["synth", "--config", s(&conf), "--out", s(&a)]);
    let out_b = bssad(&["synth", "--config", s(&conf), "--out", s(&b)]);
    assert_eq!(code(&out_a), 0, "{}", stderr(&out_a));
    assert_eq!(code(&out_b), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let summary = String::from_utf8_lossy(&out_a.stdout);
    assert!(summary.contains("anomalous=90"), "{summary}");

    let (header, rows) = csv_rows(&a);
    assert_eq!(header.split(',').count(), 4);
    assert!(header.ends_with("label"));
    assert_eq!(rows.len(), 1000);
}

#[test]
fn synth_seed_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("synth.conf");
    fs::write(&conf, SMALL_SYNTH).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(code(&bssad(&["synth", "--config", s(&conf), "--out", s(&a)])), 0);
    assert_eq!(code(&bssad(&["synth", "--config", s(&conf), "--seed", "12", "--out", s(&b)])), 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn synth_rejects_segment_outside_series() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "length = 100\nsegment = 90 20 spike\n").unwrap();
    let out_path = dir.path().join("out.csv");
    let out = bssad(&["synth", "--config", s(&conf), "--out", s(&out_path)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("(90, 20, spike)"), "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn unknown_config_key_writes_nothing() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "tau = 4\nwindow_size = 9\n").unwrap();
    let out_path = dir.path().join("model.txt");
    let out = bssad(&["train", s(&fx.path("train.csv")), "--config", s(&conf), "--out", s(&out_path)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("window_size"), "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn invalid_flag_value_is_a_config_error() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("scores.csv");
    let out = bssad(&[
        "detect",
        s(&fx.path("test.csv")),
        s(&fx.path("model.txt")),
        "--filter",
        "ukf",
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!out_path.exists());
}

#[test]
fn train_rejects_anomalous_rows() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("model.txt");
    let out = bssad(&[
        "train",
        s(&fx.path("all.csv")),
        "--config",
        s(&fx.path("run.conf")),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn detect_scores_every_step_after_the_window() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut headers = Vec::new();
    for filter in ["enkf", "pf"] {
        let scores = dir.path().join(format!("{filter}.csv"));
        let beliefs = dir.path().join(format!("{filter}_beliefs.csv"));
        let out = bssad(&[
            "detect",
            s(&fx.path("test.csv")),
            s(&fx.path("model.txt")),
            "--config",
            s(&fx.path("run.conf")),
            "--filter",
            filter,
            "--out",
            s(&scores),
            "--beliefs-out",
            s(&beliefs),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let (header, rows) = csv_rows(&scores);
        // 200 test rows, window 4.
        assert_eq!(rows.len(), 196);
        assert!(rows[0].starts_with("4,"), "{}", rows[0]);
        for row in &rows {
            let score: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
            assert!(score.is_finite() && score >= 0.0);
        }
        let (belief_header, belief_rows) = csv_rows(&beliefs);
        assert_eq!(belief_header, "t,mean_1,mean_2,mean_3");
        assert_eq!(belief_rows.len(), 196);
        headers.push(header);
    }
    assert_eq!(headers[0], "t,score,label");
    assert_eq!(headers[0], headers[1]);
}

#[test]
fn detect_is_deterministic_for_a_seed() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let out = bssad(&[
            "detect",
            s(&fx.path("test.csv")),
            s(&fx.path("model.txt")),
            "--config",
            s(&fx.path("run.conf")),
            "--filter=pf",
            "--seed",
            seed,
            "--out",
            s(&path),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(path).unwrap()
    };
    let a = run("a.csv", "3");
    let b = run("b.csv", "3");
    let c = run("c.csv", "4");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn detect_rejects_schema_mismatch() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let test = dir.path().join("test.csv");
    fs::write(&test, "a,b\n0.1,0.2\n0.3,0.4\n0.5,0.6\n0.7,0.8\n0.9,1.0\n1.1,1.2\n").unwrap();
    let out_path = dir.path().join("scores.csv");
    let out = bssad(&["detect", s(&test), s(&fx.path("model.txt")), "--out", s(&out_path)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn malformed_cell_reports_row_and_exits_3() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fx.path("test.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cells: Vec<String> = lines[3].split(',').map(str::to_string).collect();
    cells[1] = "abc".into();
    lines[3] = cells.join(",");
    let test = dir.path().join("test.csv");
    fs::write(&test, lines.join("\n")).unwrap();
    let out = bssad(&[
        "detect",
        s(&test),
        s(&fx.path("model.txt")),
        "--out",
        s(&dir.path().join("scores.csv")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("abc"), "{}", stderr(&out));
}

#[test]
fn eval_on_separable_scores_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    let mut text = String::from("t,score,label\n");
    for t in 0..50 {
        let anomalous = (20..25).contains(&t) || (40..43).contains(&t);
        let score = if anomalous { 10.0 + t as f64 * 0.01 } else { 1.0 + t as f64 * 0.01 };
        text.push_str(&format!("{},{score},{}\n", t + 3, u8::from(anomalous)));
    }
    fs::write(&scores, text).unwrap();
    let report = dir.path().join("report.json");
    let out = bssad(&["eval", s(&scores), "--metric", "mcc", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["metric"], "mcc");
    assert_eq!(v["best_f1"], 1.0);
    assert_eq!(v["best_mcc"], 1.0);
    assert_eq!(v["evaluated_points"], 50);
    assert_eq!(v["confusion"]["tp"], 8);
    assert_eq!(v["confusion"]["fp"], 0);
    assert_eq!(v["config"]["metric"], "mcc");
}

#[test]
fn eval_without_labels_fails() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "t,score\n1,0.5\n2,0.7\n").unwrap();
    let report = dir.path().join("report.json");
    let out = bssad(&["eval", s(&scores), "--out", s(&report)]);
    assert_eq!(code(&out), 2);
    assert!(!report.exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "t,score,label\n1,0.1,0\n2,0.9,1\n3,0.2,0\n").unwrap();
    let conf = dir.path().join("eval.conf");
    fs::write(&conf, "metric = mcc\n").unwrap();
    let report = dir.path().join("report.json");
    let read = |p: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap() };

    assert_eq!(code(&bssad(&["eval", s(&scores), "--config", s(&conf), "--out", s(&report)])), 0);
    assert_eq!(read(&report)["metric"], "mcc");
    let out = bssad(&["eval", s(&scores), "--config", s(&conf), "--metric", "f1", "--out", s(&report)]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(&report)["metric"], "f1");
}

#[test]
fn sweep_reports_one_row_per_pair() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("sweep.json");
    let out = bssad(&[
        "sweep",
        s(&fx.path("test.csv")),
        s(&fx.path("model.txt")),
        "--config",
        s(&fx.path("run.conf")),
        "--seeds",
        "1,2",
        "--sizes",
        "10",
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["status"] == "ok" && r["size"] == 10));
    assert_eq!(v["failures"].as_array().unwrap().len(), 0);
    assert!(v["best"]["f1"].as_f64().is_some());
}
