use std::process::Command;

use acqret_bench::report::CSV_HEADER;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acqret-bench"))
}

#[test]
fn sweep_writes_one_row_per_thread_count() {
    let out = bench()
        .args(["--impl", "weak-atomic-counted", "--ops", "2000", "--sweep", "1,2,3", "--store-prob", "0.3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert_eq!(lines.len(), 4);
    for (row, threads) in lines[1..].iter().zip(["1", "2", "3"]) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 8);
        assert_eq!(f[0], "weak-atomic-counted");
        assert_eq!(f[1], threads);
        assert_eq!(f[7], "0");
    }
}

#[test]
fn every_impl_runs_from_the_command_line() {
    for name in ["refcount", "weak-atomic-counted", "lock-baseline"] {
        let out = bench().args(["--impl", name, "--ops", "500", "--threads", "2"]).output().unwrap();
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_arguments_exit_with_two() {
    for args in [
        &["--store-prob", "1.5"][..],
        &["--threads", "0"],
        &["--n-refs", "0"],
        &["--impl", "nonsense"],
    ] {
        let out = bench().args(args).args(["--ops", "10"]).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn csv_file_and_summary() {
    let path = std::env::temp_dir().join(format!("acqret-cli-{}.csv", std::process::id()));
    let out = bench()
        .args(["--ops", "1000", "--sweep", "1,2", "--summary", "--csv"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let (csv, summary) = text.split_once("\n\n").expect("blank line before summary");
    assert_eq!(csv.lines().count(), 3);
    assert!(!summary.trim().is_empty());
}
