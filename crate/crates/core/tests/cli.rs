use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn kvec(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvec"))
        .args(args)
        .env("KVEC_RUN_DIR", run_root)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// The only run directory under `root` whose name ends with `command`.
fn run_dir(root: &Path, command: &str) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().contains(command))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

/// Generates a small dataset and returns its root.
fn small_dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    let out = kvec(
        &["generate", "--flows", "60", "--len", "12", "--signal-length", "3", "--k", "3", "--seed", "4", "--out", data.to_str().unwrap()],
        root,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn train(data: &Path, root: &Path) -> PathBuf {
    let out = kvec(
        &["train", "--data", data.to_str().unwrap(), "--epochs", "2", "--lr", "0.003", "--seed", "9", "--run-root", root.to_str().unwrap()],
        root,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run_dir(root, "train")
}

#[test]
fn help_succeeds_and_usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&kvec(&["--help"], tmp.path())), 0);
    assert_eq!(code(&kvec(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&kvec(&["train", "--epochs", "many"], tmp.path())), 1);
}

#[test]
fn validation_failures_exit_two_with_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = kvec(&["eval", "--data", missing.to_str().unwrap(), "--checkpoint", "x.ckpt"], tmp.path());
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap();
    let err: serde_json::Value = serde_json::from_str(last).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

}

#[test]
fn bad_settings_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kvec(&["generate", "--signal", "middle"], tmp.path());
    assert_eq!(code(&out), 1);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[train]\nbeta = 0.5\nwarp = 9\n").unwrap();
    let out = kvec(&["gradcheck", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kvec(&["gradcheck"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let dir = run_dir(tmp.path(), "gradcheck");
    let csv = fs::read_to_string(dir.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(dir.join("config.toml").exists() && dir.join("log.txt").exists());
}

#[test]
fn training_is_deterministic_and_feeds_every_command() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (run_a, run_b) = (train(&data, &a), train(&data, &b));
    let ckpt = run_a.join("model.ckpt");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(run_b.join("model.ckpt")).unwrap());
    for file in ["history.csv", "metrics.csv", "summary.json", "config.toml"] {
        assert!(run_a.join(file).exists(), "{file}");
    }
    let (data_arg, ckpt_arg) = (data.to_str().unwrap(), ckpt.to_str().unwrap());

    let root = tmp.path().join("eval");
    for mode in [&["--mode", "policy"][..], &["--mode", "fixed", "--tau", "2"], &["--mode", "confidence", "--mu", "0.7"]] {
        let mut args = vec!["eval", "--data", data_arg, "--checkpoint", ckpt_arg, "--run-root", root.to_str().unwrap()];
        args.extend_from_slice(mode);
        assert_eq!(code(&kvec(&args, &root)), 0, "{mode:?}");
    }

    let root = tmp.path().join("analyze");
    let out = kvec(&["analyze", "--data", data_arg, "--checkpoint", ckpt_arg, "--bins", "4", "--run-root", root.to_str().unwrap()], &root);
    assert_eq!(code(&out), 0);
    let dir = run_dir(&root, "analyze");
    let hist = fs::read_to_string(dir.join("halting_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);
    assert!(dir.join("attention_split.csv").exists());

    let root = tmp.path().join("sweep");
    let out = kvec(&["sweep", "--data", data_arg, "--checkpoint", ckpt_arg, "--param", "tau", "--grid", "1,2,100", "--seeds", "1", "--run-root", root.to_str().unwrap()], &root);
    assert_eq!(code(&out), 0);
    let curve = fs::read_to_string(run_dir(&root, "sweep").join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    // stream the test split's first sequence from stdin
    let items = fs::read_to_string(data.join("test").join("items.jsonl")).unwrap();
    let first: Vec<&str> = items.lines().filter(|l| l.starts_with("{\"seq\":0,")).collect();
    let records: String = first
        .iter()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            serde_json::json!({ "t": v["t"], "key": v["key"], "v": v["v"] }).to_string() + "\n"
        })
        .collect();
    let root = tmp.path().join("stream");
    let mut child = Command::new(env!("CARGO_BIN_EXE_kvec"))
        .args(["stream", "--checkpoint", ckpt_arg, "--run-root", root.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(records.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let halts = lines.iter().filter(|l| l["action"] == "halt").count();
    let keys: std::collections::HashSet<&str> = lines.iter().map(|l| l["key"].as_str().unwrap()).collect();
    assert_eq!(halts, keys.len());
    assert!(lines.iter().filter(|l| l["action"] == "halt").all(|l| l["label"].is_u64()));
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&root, "stream").join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["items"].as_u64().unwrap() as usize, first.len());
}

#[test]
fn stream_rejects_out_of_order_records() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = train(&data, &tmp.path().join("t"));
    let input = tmp.path().join("bad.jsonl");
    fs::write(&input, "{\"t\":1,\"key\":\"a\",\"v\":[0,0,0.1]}\n{\"t\":3,\"key\":\"a\",\"v\":[0,0,0.1]}\n").unwrap();
    let out = kvec(
        &["stream", "--checkpoint", run.join("model.ckpt").to_str().unwrap(), "--input", input.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.jsonl:2") || stderr.contains("line 2"), "{stderr}");
}
