use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpo")).args(args).output().expect("run vpo")
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

#[test]
fn single_join_writes_csv_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = vpo(&["single-join", "--public-size", "30", "--private-size", "6", "--reps", "2", "--synthetic", "100,100", "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("single-join converged=2/2"));
    let csv = fs::read_to_string(dir.path().join("single_join.csv")).unwrap();
    assert!(csv.starts_with("repetition,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "public-size=30\nprivate-size=6\nreps=1\nsynthetic=100,100\nmethod=dht\n").unwrap();
    let out = out_arg(dir.path());
    let o = vpo(&["revoke", "--config", conf.to_str().unwrap(), "--method", "broadcast", "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("revoke.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("broadcast,6,"), "{row}");
}

#[test]
fn flagged_runs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = vpo(&["single-join", "--public-size", "4", "--private-size", "2", "--reps", "2", "--synthetic", "200000,200000", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("single_join.csv").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    for args in [
        vec!["bandwidth", "--timer", "hourly", "--out", &out],
        vec!["revoke", "--method", "email", "--out", &out],
        vec!["model", "--synthetic", "5", "--out", &out],
        vec!["single-join", "--config", "/nonexistent/vpo.conf", "--out", &out],
    ] {
        let o = vpo(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "flavour=mint\n").unwrap();
    let o = vpo(&["mass-join", "--config", bad.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown option"));
}

#[test]
fn reruns_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = out_arg(dir.path());
        let o = vpo(&["mass-join", "--public-size", "30", "--private-size", "8", "--reps", "2", "--seed", "4", "--out", &out]);
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("mass_join.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn latency_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let matrix = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample_rtt.txt");
    let o = vpo(&["heal", "--public-size", "30", "--private-size", "8", "--latency-file", matrix.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = vpo(&["heal", "--latency-file", "x", "--synthetic", "1,2", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}
