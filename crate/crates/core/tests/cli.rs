//! The `agile-sim` binary: arguments, artifacts and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agile-sim"))
}

fn conf(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn naive_deadlock_is_flagged_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, trace) = (dir.path().join("out.csv"), dir.path().join("out.trace"));
    let out = run(&[
        "deadlock_demo",
        "--config",
        conf("deadlock_demo.conf").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("flagged"), "{stderr}");
    let table = std::fs::read_to_string(csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("mode,depth,threads,commands,completed,blocked,deadlock,cycles")
    );
    assert!(lines.next().unwrap().starts_with("naive,2,4,4,0,4,true,"));
    assert!(lines.next().unwrap().starts_with("agile,2,4,4,4,0,false,"));
    let trace = std::fs::read_to_string(trace).unwrap();
    assert!(trace.contains("DEADLOCK") || trace.contains("deadlock"));
}

#[test]
fn same_seed_same_csv_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let csv = dir.path().join(format!("{i}.csv"));
        let out = run(&[
            "coherence",
            "--config",
            conf("coherence.conf").to_str().unwrap(),
            "--seed",
            "42",
            "--csv",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        outputs.push(std::fs::read(csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].starts_with(b"workload,seed,share_table,"));
}

#[test]
fn csv_goes_to_stdout_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("tiny.conf");
    std::fs::write(
        &c,
        "inflight = 1, 64\ndevice_counts = 1\nrequests_per_thread = 2\nnum_queue_pairs = 4\n",
    )
    .unwrap();
    let out = run(&["rand_write", "--config", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("concurrent_requests,num_devices,op,gb_per_s,kernel_ns\n"));
    assert_eq!(stdout.lines().count(), 3);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("typo.conf");
    std::fs::write(&c, "queue_dpeth = 8\n").unwrap();
    let out = run(&["ctc_sweep", "--config", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("queue_dpeth"));

    // Usage errors stay clear of exit code 2.
    let out = run(&["no_such_experiment", "--config", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(64));

    let out = run(&["ctc_sweep", "--config", "/nonexistent/x.conf"]);
    assert_eq!(out.status.code(), Some(1));
}
