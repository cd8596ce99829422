mod common;

use common::*;

#[test]
fn simulate_train_eval_pipeline_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, edges) = simulate_into(dir.path(), SMALL_SIM);
    for f in ["traces.csv", "edges.csv", "metadata.json", "run.conf"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let run_dir = dir.path().join("run");
    let common = [
        "--traces",
        path_str(&traces),
        "--edges",
        path_str(&edges),
        "--out-dir",
        path_str(&run_dir),
    ];
    ok(&run(&[&["train"][..], &common].concat(), TINY_MODEL));
    assert!(run_dir.join("checkpoint.bin").is_file());
    let log = std::fs::read_to_string(run_dir.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(log.starts_with("epoch,train_loss,val_loss,lr_last,seconds\n"));

    ok(&run(&[&["eval"][..], &common].concat(), &[]));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    for side in ["model", "baseline"] {
        for key in ["mse", "mae", "mape"] {
            assert!(metrics[side]["service"][key].is_number(), "{side}.{key}");
        }
    }
    assert!(metrics["checkpoint_epoch"].as_u64().unwrap() >= 1);
}

#[test]
fn training_twice_with_one_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, edges) = simulate_into(dir.path(), SMALL_SIM);
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let args = [
            "train",
            "--seed",
            "42",
            "--traces",
            path_str(&traces),
            "--edges",
            path_str(&edges),
            "--out-dir",
            path_str(&out_dir),
        ];
        ok(&run(&args, TINY_MODEL));
        artifacts.push((
            std::fs::read(out_dir.join("epochs.csv")).unwrap(),
            std::fs::read(out_dir.join("checkpoint.bin")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn window_sweep_writes_the_four_point_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, edges) = simulate_into(dir.path(), &["topology=chain", "services=3", "steps=1300"]);
    let args = [
        "sweep",
        "--param",
        "window_T",
        "--traces",
        path_str(&traces),
        "--edges",
        path_str(&edges),
        "--out-dir",
        path_str(dir.path()),
    ];
    ok(&run(&args, &["d_model=8", "n_layers=1", "n_heads=2", "d_ff=16", "epochs=1", "horizon=2"]));
    let csv = std::fs::read_to_string(dir.path().join("sweep_window_T.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("param,value,mse,mae,mape,r_score"));
    let values: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["30", "60", "90", "120"]);
}

#[test]
fn failures_exit_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = run(&["simulate", "--out-dir", path_str(dir.path())], &["no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&bad_key.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");

    let missing = dir.path().join("absent.csv");
    let no_file = run(
        &["train", "--traces", path_str(&missing), "--edges", path_str(&missing)],
        &[],
    );
    assert_eq!(no_file.status.code(), Some(3));

    let (traces, edges) = simulate_into(dir.path(), SMALL_SIM);
    let diverge = run(
        &[
            "train",
            "--traces",
            path_str(&traces),
            "--edges",
            path_str(&edges),
            "--out-dir",
            path_str(&dir.path().join("run")),
        ],
        &[TINY_MODEL, &["lr=1e300", "warmup_fraction=0"]].concat(),
    );
    assert_eq!(diverge.status.code(), Some(5), "{}", String::from_utf8_lossy(&diverge.stderr));
    assert!(String::from_utf8_lossy(&diverge.stderr).contains("step"));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf.in");
    std::fs::write(&conf, "# layered\nsteps = 300\nservices = 5\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(
        &["simulate", "--config", path_str(&conf), "--out-dir", path_str(&out_dir)],
        &["services=3"],
    );
    ok(&out);
    let resolved = std::fs::read_to_string(out_dir.join("run.conf")).unwrap();
    let lines: Vec<&str> = resolved.lines().collect();
    assert!(lines.contains(&"steps=300"), "{resolved}");
    assert!(lines.contains(&"services=3"));
    assert!(lines.contains(&"base_rate=100"));
    let traces = std::fs::read_to_string(out_dir.join("traces.csv")).unwrap();
    assert_eq!(traces.lines().count(), 1 + 3 * 300);
}
