//! Every example under `examples/` runs to completion. Cargo builds the
//! example binaries next to this test's `deps/` directory.

use std::path::PathBuf;
use std::process::Command;

const EXAMPLES: [&str; 8] = [
    "quickstart",
    "deadlock_demo",
    "coalescing",
    "share_table",
    "ctc_sweep",
    "bandwidth_scaling",
    "queue_protocol",
    "gather_sweeps",
];

fn example_path(name: &str) -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let dir = exe.parent().unwrap().parent().unwrap().join("examples");
    dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

#[test]
fn examples_run() {
    let mut listed: Vec<String> = std::fs::read_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/examples"))
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    listed.sort();
    let mut known: Vec<String> = EXAMPLES.iter().map(|s| s.to_string()).collect();
    known.sort();
    assert_eq!(listed, known, "examples/ and this list disagree");

    for name in EXAMPLES {
        let path = example_path(name);
        assert!(path.exists(), "{} not built; run via `cargo test`", path.display());
        let out = Command::new(&path).output().unwrap();
        assert!(
            out.status.success(),
            "{name} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stdout.is_empty(), "{name} printed nothing");
    }
}
