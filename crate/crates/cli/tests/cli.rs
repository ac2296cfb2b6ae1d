use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedrec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrec"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn smoke_config(dir: &Path, extra: &str) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut text = fs::read_to_string(src).unwrap();
    text.push_str(extra);
    let path = dir.join("smoke.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedrec(&["selftest"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn train_eval_attack_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = fedrec(&["train", "--config", cfg, "--out", "run", "--workers", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let run = tmp.path().join("run");
    for f in ["checkpoint.bin", "deltas.bin", "train_log.csv", "report.json", "hits.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert!(!run.join("attacks.csv").exists());

    let out = fedrec(&["eval", "--config", cfg, "--checkpoint", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        fs::read(run.join("hits.csv")).unwrap(),
        fs::read(run.join("eval/hits.csv")).unwrap()
    );

    let out = fedrec(&["attack", "--config", cfg, "--checkpoint", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let attacks = fs::read_to_string(run.join("attack/attacks.csv")).unwrap();
    assert!(attacks.lines().nth(1).unwrap().starts_with("attribute,attacker"));
    assert!(stdout(&out).contains("gender"));
}

#[test]
fn run_matches_train_then_attack() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    assert!(fedrec(&["run", "--config", cfg, "--out", "all", "--workers", "1"], tmp.path()).status.success());
    assert!(fedrec(&["run", "--config", cfg, "--out", "all3", "--workers", "3"], tmp.path()).status.success());
    assert!(fedrec(&["train", "--config", cfg, "--out", "split"], tmp.path()).status.success());
    assert!(fedrec(&["attack", "--config", cfg, "--checkpoint", "split"], tmp.path()).status.success());
    let read = |p: &str| fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("all/attacks.csv"), read("split/attack/attacks.csv"));
    assert_eq!(read("all/checkpoint.bin"), read("split/checkpoint.bin"));
    for f in ["checkpoint.bin", "deltas.bin", "report.json", "hits.csv", "attacks.csv", "f1_by_component.csv"] {
        assert_eq!(read(&format!("all/{f}")), read(&format!("all3/{f}")), "{f}");
    }
}

#[test]
fn config_errors_exit_one_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    for extra in ["\n[privacy]\nmode = \"fixed\"\n", "\nbogus_key = 3\n"] {
        let cfg = smoke_config(tmp.path(), extra);
        let out = fedrec(&["train", "--config", cfg.to_str().unwrap(), "--out", "x"], tmp.path());
        assert_eq!(out.status.code(), Some(1), "{extra}");
        assert!(stderr(&out).contains("error"));
        assert!(!tmp.path().join("x").exists());
    }
    let out = fedrec(&["train", "--nonsense"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("missing.toml");
    fs::write(
        &cfg,
        "[data]\nsource = \"files\"\nformat = \"ml100k\"\nratings = \"nowhere/u.data\"\nusers = \"nowhere/u.user\"\n",
    )
    .unwrap();
    let out = fedrec(&["train", "--config", cfg.to_str().unwrap(), "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("data:"));
    assert!(!tmp.path().join("x").exists());

    let smoke = smoke_config(tmp.path(), "");
    let out = fedrec(&["eval", "--config", smoke.to_str().unwrap(), "--checkpoint", "nothing"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_dir_env_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("rel.toml");
    fs::write(
        &cfg,
        "[data]\nsource = \"files\"\nformat = \"ml100k\"\nratings = \"u.data\"\nusers = \"u.user\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fedrec"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", "x"])
        .current_dir(tmp.path())
        .env("FEDREC_DATA_DIR", "/definitely/not/here")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/definitely/not/here/u.data"), "{}", stderr(&out));
}

#[test]
fn sweep_writes_one_report_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let grid = tmp.path().join("grid.toml");
    fs::write(&grid, "[[axis]]\nkey = \"model.dim\"\nvalues = [4, 8]\n").unwrap();
    let out = fedrec(
        &["sweep", "--config", cfg.to_str().unwrap(), "--grid", grid.to_str().unwrap(), "--out", "sw"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let sw = tmp.path().join("sw");
    for cell in ["model.dim=4", "model.dim=8"] {
        assert!(sw.join(cell).join("report.json").is_file(), "{cell}");
    }
    let hits = fs::read_to_string(sw.join("sweep_hits.csv")).unwrap();
    assert_eq!(hits.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 2);
    assert!(sw.join("sweep_f1.csv").is_file());
}
