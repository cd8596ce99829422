#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_topocast");

/// A model small enough that a full CLI pipeline runs in seconds.
pub const TINY_MODEL: &[&str] = &[
    "window=8",
    "horizon=2",
    "d_model=8",
    "n_layers=1",
    "n_heads=2",
    "d_ff=16",
    "epochs=2",
    "batch_size=32",
];

pub const SMALL_SIM: &[&str] = &["topology=chain", "services=4", "steps=400"];

pub fn run(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("spawn topocast")
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Runs `simulate` into `dir` and returns the trace and edge file paths.
pub fn simulate_into(dir: &Path, sets: &[&str]) -> (PathBuf, PathBuf) {
    let out = run(&["simulate", "--out-dir", path_str(dir)], sets);
    ok(&out);
    (dir.join("traces.csv"), dir.join("edges.csv"))
}
