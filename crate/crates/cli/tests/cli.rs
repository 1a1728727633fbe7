use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use olnmt::corpus::{generate_toy_task, ToyConfig, ToyKind};
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--embedding-dim",
    "12",
    "--hidden-dim",
    "12",
    "--attention-dim",
    "12",
    "--deep-output-dim",
    "12",
    "--max-output-length",
    "12",
];

fn olnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olnmt"))
        .args(args)
        .env_remove("OLNMT_OUT_DIR")
        .output()
        .expect("spawn olnmt")
}

fn ok(args: &[&str]) -> String {
    let o = olnmt(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn stderr_line(o: &Output) -> String {
    let e = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(e.trim_end().lines().count(), 1, "expected a single line, got {e:?}");
    e.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path) -> PathBuf {
    let mut cfg = ToyConfig::new(ToyKind::Copy, 200, 12, 3);
    cfg.vocab_size = 6;
    cfg.n_dev = 10;
    cfg.max_len = 5;
    let data = dir.join("data");
    generate_toy_task(&cfg).unwrap().write(&data).unwrap();
    data
}

/// Trains a tiny system into `dir/train`.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = toy(dir);
    let out = dir.join("train");
    let mut args = vec![
        "train".to_string(),
        "--train-src".into(),
        s(&data.join("train.src")).into(),
        "--train-tgt".into(),
        s(&data.join("train.tgt")).into(),
        "--dev-src".into(),
        s(&data.join("dev.src")).into(),
        "--dev-tgt".into(),
        s(&data.join("dev.tgt")).into(),
        "--max-updates".into(),
        "200".into(),
        "--eval-every".into(),
        "100".into(),
        "--out-dir".into(),
        s(&out).into(),
    ];
    args.extend(SMALL.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
    (data, out.join("system"))
}

#[test]
fn evaluate_identical_files_is_perfect() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("h.txt");
    fs::write(&f, "the cat sat .\na b c d e\n").unwrap();
    let out = ok(&[
        "evaluate",
        "--hyp",
        s(&f),
        "--ref",
        s(&f),
        "--out-dir",
        s(&dir.path().join("e")),
    ]);
    assert!(out.contains("BLEU 100.0 ± 0.0"), "{out}");
    assert!(out.contains("TER 0.0 ± 0.0"), "{out}");
    let only = ok(&[
        "evaluate",
        "--hyp",
        s(&f),
        "--ref",
        s(&f),
        "--metric",
        "ter",
        "--out-dir",
        s(&dir.path().join("e2")),
    ]);
    assert!(!only.contains("BLEU"));
}

#[test]
fn failures_are_single_line() {
    let dir = TempDir::new().unwrap();
    let o = olnmt(&["adapt", "--optimizer", "rmsprop"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error: usage:"));

    let o = olnmt(&["translate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    stderr_line(&o);

    let missing = dir.path().join("missing.txt");
    let o = olnmt(&[
        "evaluate",
        "--hyp",
        s(&missing),
        "--ref",
        s(&missing),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let line = stderr_line(&o);
    assert!(line.starts_with("error: io:") && line.contains("missing.txt"), "{line}");

    let o = olnmt(&["translate", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).contains("--system"));

    let h = dir.path().join("h");
    let r = dir.path().join("r");
    fs::write(&h, "a\nb\n").unwrap();
    fs::write(&r, "a\n").unwrap();
    let o = olnmt(&["evaluate", "--hyp", s(&h), "--ref", s(&r), "--out-dir", s(dir.path())]);
    assert!(stderr_line(&o).starts_with("error: data:"));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("h.txt");
    fs::write(&f, "x y z\n").unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# settings\nbootstrap_samples = 7\nseed = 5\n").unwrap();
    let out = dir.path().join("o");
    ok(&[
        "evaluate",
        "--config",
        s(&conf),
        "--seed",
        "9",
        "--hyp",
        s(&f),
        "--ref",
        s(&f),
        "--out-dir",
        s(&out),
    ]);
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("bootstrap_samples = 7"), "{written}");
    assert!(written.contains("seed = 9"), "{written}");
    assert!(written.contains("command = evaluate"));
    assert!(written.contains(&format!("version = {}", env!("CARGO_PKG_VERSION"))));
}

#[test]
fn out_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("h.txt");
    fs::write(&f, "x y z\n").unwrap();
    let env_out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_olnmt"))
        .args(["evaluate", "--hyp", s(&f), "--ref", s(&f)])
        .env("OLNMT_OUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("config.txt").exists());
    assert!(env_out.join("evaluation.json").exists());
}

#[test]
fn bpe_and_vocab_commands() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("text.txt");
    fs::write(&f, "lower lowest newer newest\nlow new wide widest\n").unwrap();
    let out = dir.path().join("o");
    ok(&["bpe-learn", "--input", s(&f), "--merges", "10", "--out-dir", s(&out)]);
    let codes = out.join("codes.bpe");
    ok(&[
        "bpe-apply",
        "--codes",
        s(&codes),
        "--input",
        s(&f),
        "--out-dir",
        s(&out),
    ]);
    let seg = fs::read_to_string(out.join("text.txt.bpe")).unwrap();
    assert_eq!(seg.lines().count(), 2);
    let rejoined: Vec<String> = seg
        .lines()
        .map(|l| l.split(' ').collect::<String>().replace("</w>", " ").trim().to_string())
        .collect();
    assert_eq!(rejoined, ["lower lowest newer newest", "low new wide widest"]);

    ok(&["vocab", "--input", s(&f), "--max-vocab", "6", "--out-dir", s(&out)]);
    let v = fs::read_to_string(out.join("vocab.tsv")).unwrap();
    assert_eq!(v.lines().count(), 6);
    assert!(v.starts_with("<pad>\t0\n"));
}

#[test]
fn train_translate_adapt() {
    let dir = TempDir::new().unwrap();
    let (data, system) = trained(dir.path());
    assert!(system.join("model.ckpt").exists());
    assert!(dir.path().join("train/training.json").exists());

    let tr = dir.path().join("tr");
    ok(&[
        "translate",
        "--system",
        s(&system),
        "--input",
        s(&data.join("test.src")),
        "--out-dir",
        s(&tr),
    ]);
    let frozen = fs::read_to_string(tr.join("hypotheses.txt")).unwrap();
    assert_eq!(frozen.lines().count(), 12);

    let (src, tgt) = (data.join("test.src"), data.join("test.tgt"));
    let test = ["--system", s(&system), "--test-src", s(&src), "--test-tgt", s(&tgt)];
    let none = dir.path().join("none");
    let mut args = vec!["adapt", "--optimizer", "none", "--out-dir", s(&none)];
    args.extend(test);
    ok(&args);
    assert_eq!(fs::read_to_string(none.join("hypotheses.txt")).unwrap(), frozen);
    assert!(!none.join("update_time.json").exists());

    let mut reports = Vec::new();
    for run in ["adam-a", "adam-b"] {
        let out = dir.path().join(run);
        let mut args = vec!["adapt", "--optimizer", "adam", "--lr", "0.01", "--out-dir", s(&out)];
        args.extend(test);
        let stdout = ok(&args);
        assert!(stdout.contains("reference 65 ms"), "{stdout}");
        assert!(out.join("adam.trace.jsonl").exists() && out.join("update_time.json").exists());
        let conf = fs::read_to_string(out.join("config.txt")).unwrap();
        assert!(conf.contains("lr = 0.01"), "{conf}");
        reports.push((
            fs::read_to_string(out.join("report.json")).unwrap(),
            fs::read_to_string(out.join("adam.trace.jsonl")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);

    let plot = dir.path().join("plot");
    ok(&[
        "plot-data",
        "--baseline",
        s(&none.join("none.trace.jsonl")),
        "--online",
        s(&dir.path().join("adam-a/adam.trace.jsonl")),
        "--out-dir",
        s(&plot),
    ]);
    let tsv = fs::read_to_string(plot.join("trajectory.tsv")).unwrap();
    assert!(tsv.starts_with("sentence\tadam\n"));
    assert_eq!(tsv.lines().count(), 13);
}

#[test]
fn toy_scenario_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sc");
    let mut args = vec![
        "scenario",
        "--id",
        "2",
        "--toy",
        "--toy-kind",
        "substitution",
        "--toy-train",
        "100",
        "--toy-test",
        "10",
        "--max-updates",
        "50",
        "--eval-every",
        "25",
        "--optimizer",
        "sgd,ppas",
        "--ppas-true-projection",
        "--bootstrap-samples",
        "50",
        "--out-dir",
        s(&out),
    ];
    args.extend(SMALL);
    let stdout = ok(&args);
    assert!(stdout.starts_with("scenario 2 (10 sentences)"), "{stdout}");
    for f in [
        "report.json",
        "update_times.json",
        "trajectory.tsv",
        "config.txt",
        "system/model.ckpt",
        "traces/ppas.trace.jsonl",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let stages: Vec<&str> = report["training"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s[0].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["out-of-domain", "fine-tune"]);
    assert!(fs::read_to_string(out.join("config.txt"))
        .unwrap()
        .contains("ppas.ppas_true_projection = true"));
}
