use std::fs;
use std::path::Path;
use std::process::Command;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn svrnn(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_svrnn")).args(args).output().expect("spawn");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = svrnn(args);
    assert_eq!(r.code, 0, "svrnn {args:?}\n{}\n{}", r.stdout, r.stderr);
    r
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> String {
    let d = dir.join("syn");
    ok(&["synth-data", "--out", p(&d), "--sequences", "12", "--min-len", "16", "--max-len", "16", "--seed", "3"]);
    p(&d.join("data.jsonl")).to_string()
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--out", p(&run), "--epochs", "2", "--residual", "true"]);
    for f in ["checkpoint.ckpt", "train_log.csv", "run_config.txt", "spec.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("checkpoint.ckpt");
    let ev = dir.path().join("eval");
    let r = ok(&["eval", "--checkpoint", p(&ck), "--data", &data, "--out", p(&ev), "--tasks", "detect", "--repeats", "2"]);
    assert!(r.stdout.contains("accuracy"));
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(report.starts_with("task,metric,mean,std,repeats,values\ndetect,accuracy,"));

    let det = dir.path().join("det");
    ok(&["detect", "--checkpoint", p(&ck), "--data", &data, "--out", p(&det)]);
    assert_eq!(fs::read_to_string(det.join("timeline.csv")).unwrap().lines().count(), 1 + 12 * 16);

    let fc = dir.path().join("fc");
    ok(&[
        "forecast", "--checkpoint", p(&ck), "--data", &data, "--out", p(&fc), "--horizon", "10", "--samples", "2",
        "--prefix", "6", "--clamp-entity", "0",
    ]);
    let first = fs::read_to_string(fc.join("forecast.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(v["horizon"], 10);
    assert_eq!(v["mean"].as_array().unwrap().len(), 10);
    assert!(fc.join("forecast_errors.csv").exists());
}

#[test]
fn gradcheck_exit_code_follows_the_tolerance() {
    let r = ok(&["gradcheck", "--primitive-seeds", "2"]);
    assert!(r.stdout.contains("model.hierarchical"));
    let strict = svrnn(&["gradcheck", "--primitive-seeds", "1", "--model", "flat", "--tolerance", "1e-15"]);
    assert_eq!(strict.code, 2);
    assert!(strict.stderr.contains("gradient check failed"));
}

#[test]
fn usage_and_runtime_errors() {
    assert_eq!(svrnn(&["--help"]).code, 0);
    assert_eq!(svrnn(&[]).code, 1);
    assert_eq!(svrnn(&["train", "--bogus"]).code, 1);
    assert_eq!(svrnn(&["train", "--data", "x"]).code, 1);
    let missing = svrnn(&["train", "--data", "/nonexistent/d.jsonl", "--out", "/tmp/unused-svrnn"]);
    assert_eq!(missing.code, 2);
    let last = missing.stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["kind"], "io");

    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let bad = svrnn(&["train", "--data", &data, "--out", p(&dir.path().join("r")), "--lr=-1"]);
    assert_eq!(bad.code, 1, "{}", bad.stderr);
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, "{\"id\": 1}\n").unwrap();
    let r = svrnn(&["train", "--data", p(&broken), "--out", p(&dir.path().join("r"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("broken.jsonl:1"), "{}", r.stderr);
}

#[test]
fn config_files_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, format!("command = train\ndata = {data}\nepochs = 1\nseed = 5\nbatch-size = 4\n")).unwrap();
    let out = dir.path().join("r");
    ok(&["train", "--config", p(&cfg), "--out", p(&out), "--seed", "9"]);
    let resolved = fs::read_to_string(out.join("run_config.txt")).unwrap();
    for line in ["command = train", "seed = 9", "epochs = 1", "batch-size = 4", "lr = 0.001", "classes = 3"] {
        assert!(resolved.lines().any(|l| l == line), "{line}\n{resolved}");
    }
    let again = dir.path().join("r2");
    ok(&["train", "--config", p(&out.join("run_config.txt")), "--out", p(&again)]);
    assert_eq!(fs::read(out.join("checkpoint.ckpt")).unwrap(), fs::read(again.join("checkpoint.ckpt")).unwrap());

    let wrong = svrnn(&["eval", "--config", p(&cfg)]);
    assert_eq!(wrong.code, 1);
    fs::write(&cfg, "not a pair\n").unwrap();
    assert_eq!(svrnn(&["train", "--config", p(&cfg)]).code, 1);
}

#[test]
fn resumed_cli_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let rest = dir.path().join("rest");
    let common = ["--data", &data, "--epochs", "4", "--batch-size", "4", "--seed", "2"];
    let train = |extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        ok(&args);
    };
    let resume_from = half.join("checkpoint.ckpt");
    train(&["--out", p(&full)]);
    train(&["--out", p(&half), "--stop-at", "5"]);
    train(&["--out", p(&rest), "--resume", p(&resume_from)]);
    assert_eq!(fs::read(full.join("checkpoint.ckpt")).unwrap(), fs::read(rest.join("checkpoint.ckpt")).unwrap());
    let rows = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("train_log.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!([rows(&half), rows(&rest)].concat(), rows(&full));
}

#[test]
fn preprocess_writes_residuals_and_first_frames() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("pre");
    ok(&["preprocess", "--data", &data, "--out", p(&out), "--smooth", "1", "--residuals", "true"]);
    let seqs = svrnn::format::load_sequences(out.join("data.jsonl")).unwrap();
    assert!(seqs.iter().all(|s| s.entities[0].frames[0].iter().all(|&v| v == 0.0)));
    assert!(out.join("first_frames.jsonl").exists());
    assert_eq!(svrnn(&["preprocess", "--data", &data, "--out", p(&out), "--smooth", "2"]).code, 1);
}
