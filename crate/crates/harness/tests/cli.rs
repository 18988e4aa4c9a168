use std::path::PathBuf;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betree-harness")).args(args).output().unwrap()
}

fn scratch(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("betree-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn clean_run_exits_zero_and_writes_csv() {
    let csv = scratch("m.csv", "");
    let out = run(&["--gen", "random", "--n", "3000", "--n-cap", "4096", "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("k_io") && text.contains("digest"));
    let rows = std::fs::read_to_string(csv).unwrap();
    assert!(rows.starts_with("op,kind,reads,writes,cold,k,cumulative,max_per_op,height,leaves,overfull\n"));
    assert_eq!(rows.lines().count(), 3001);
}

#[test]
fn every_engine_runs_a_workload_file() {
    let w = scratch("w.txt", "# tiny\nI 5\nI 9\nP 7\nR 0 10\nD 5\nP 7\n");
    for engine in ["deamo", "baseline", "oracle"] {
        let out = run(&["--engine", engine, "--workload", w.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{engine}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn usage_errors_exit_one() {
    let absent = scratch("absent.txt", "I 1\nD 2\n");
    let garbled = scratch("garbled.txt", "I 1\nQ 3\n");
    for args in [
        vec!["--bogus"],
        vec!["--gen", "random"],
        vec!["--gen", "zigzag", "--n", "10"],
        vec!["--engine", "btree", "--gen", "random", "--n", "10"],
        vec!["--gen", "random", "--n", "0"],
        vec!["--B", "1", "--gen", "random", "--n", "10"],
        vec!["--workload", absent.to_str().unwrap()],
        vec!["--workload", garbled.to_str().unwrap()],
        vec!["--workload", "/nonexistent/ops.txt"],
        vec!["--engine", "oracle", "--gen", "random", "--n", "10", "--file-backed", "/tmp/x"],
    ] {
        assert_eq!(run(&args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn starved_cache_is_reported_as_a_failure() {
    let out = run(&["--gen", "random", "--n", "20000", "--n-cap", "20000", "--cache-blocks", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pinned"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
