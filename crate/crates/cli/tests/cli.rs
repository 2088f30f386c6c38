//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn ctnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnas"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "data": {
            "source": {"synth": {
                "classes": 2, "channels": 4, "points": 160,
                "sample_rate_hz": 250.0, "trials_per_class": 10,
                "snr_db": 30.0, "subjects": 2, "seed": 5
            }},
            "split": {"Mixed": {"ratio": 0.8}},
            "window": 64,
            "stride": 32
        },
        "space_id": "desk8",
        "arch": {"blocks": 1, "nodes": 1},
        "search": {"epochs": 2, "batch_size": 8},
        "retrain": {"epochs": 2, "batch_size": 8, "lr": 0.01, "lr_min": 1e-4, "momentum": 0.9},
        "seed": 3
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_writes_native_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctnas(&[
        "synth",
        "--out",
        dir.path().to_str().unwrap(),
        "--classes",
        "2",
        "--channels",
        "3",
        "--points",
        "120",
        "--trials-per-class",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/meta.json").exists());
    assert!(dir.path().join("synth_config.json").exists());
}

#[test]
fn full_pipeline_search_retrain_eval_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run_dir = dir.path().join("run");

    let out = ctnas(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let genotype = run_dir.join("genotype.json");
    assert!(genotype.exists());
    assert!(run_dir.join("trajectory.csv").exists());

    let retrain_dir = dir.path().join("retrain");
    let out = ctnas(&[
        "retrain",
        "--genotype",
        genotype.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        retrain_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = retrain_dir.join("checkpoint.ckpt");
    assert!(checkpoint.exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("accuracy"), "stdout: {stdout}");

    let eval_dir = dir.path().join("eval");
    let out = ctnas(&[
        "eval",
        "--genotype",
        genotype.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let stats_dir = dir.path().join("stats");
    let out = ctnas(&[
        "stats",
        run_dir.to_str().unwrap(),
        "--out",
        stats_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stats_dir.join("op_counts.csv").exists());
}

#[test]
fn identical_seeds_give_byte_identical_genotypes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for name in ["r1", "r2"] {
        let out = ctnas(&[
            "search",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("r1/genotype.json")).unwrap();
    let b = std::fs::read(dir.path().join("r2/genotype.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());

    // Unknown search space.
    let out = ctnas(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--space",
        "bogus",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Malformed config file.
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    let out = ctnas(&["search", "--config", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Invalid constraint bounds.
    let out = ctnas(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--c-low",
        "100",
        "--c-high",
        "50",
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Unknown ablation axis.
    let out = ctnas(&[
        "ablate",
        "--axis",
        "bogus",
        "--out",
        dir.path().join("z").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unconstrained_flags_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = ctnas(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--lambda1",
        "0",
        "--lambda2",
        "0",
        "--lambda3",
        "0",
        "--out",
        dir.path().join("u").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("unconstrained"), "stdout: {stdout}");
}

#[test]
fn ablate_emits_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("ablate");
    let out = ctnas(&[
        "ablate",
        "--axis",
        "nodes",
        "--grid",
        "1,2",
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablate_nodes.csv")).unwrap();
    // Header plus one row per grid setting.
    assert_eq!(csv.lines().count(), 3);
}
