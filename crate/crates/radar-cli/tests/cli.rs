//! Command-level behavior: manifests, exit codes, file outputs, and the
//! ablation/override flags.

use std::path::{Path, PathBuf};
use std::process::Command;

fn radar(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_radar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn fresh_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("radar-cli-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        format!(
            "epochs = 2\ntrajectories = 2\nhidden_dim = 8\npe_dim = 4\ncomp_emb_dim = 4\nmlp_hidden = 8\nmixture_components = 2\nutility_period = 2\nes_probe_samples = 1\nseed = 3\n{extra}"
        ),
    )
    .unwrap();
    path
}

/// Builds a tiny dataset + checkpoint in a caller-owned directory.
fn prepared(tag: &str) -> (PathBuf, PathBuf, PathBuf) {
    let dir = fresh_dir(tag);
    let cfg = small_config(&dir, "");
    let ds = dir.join("ds");
    let tr = dir.join("train");
    let out = radar(&[
        "build-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--tasks",
        "4",
        "--out",
        ds.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = radar(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        &format!("{}/dataset.json", ds.display()),
        "--suite",
        &format!("{}/tasks.json", ds.display()),
        "--out",
        tr.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, ds, tr)
}

#[test]
fn default_dataset_cardinality_is_500() {
    let dir = fresh_dir("cardinality");
    let out = radar(&["build-dataset", "--seed", "5", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let dataset = read(&dir.join("dataset.json"));
    let parsed: serde_json::Value = serde_json::from_str(&dataset).unwrap();
    // 50 tasks x 5 families x 2 sizes.
    assert_eq!(parsed["records"].as_array().unwrap().len(), 500);
}

#[test]
fn dataset_rebuild_is_byte_identical() {
    let a = fresh_dir("rebuild-a");
    let b = fresh_dir("rebuild-b");
    for dir in [&a, &b] {
        let out = radar(&[
            "build-dataset",
            "--seed",
            "9",
            "--tasks",
            "6",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(read(&a.join("dataset.json")), read(&b.join("dataset.json")));
    assert_eq!(read(&a.join("tasks.json")), read(&b.join("tasks.json")));
}

#[test]
fn corrupt_config_fails_naming_the_field_with_error_manifest() {
    let dir = fresh_dir("corrupt");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "utility_fraction = 0.0\n").unwrap();
    let out = radar(&[
        "build-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("utility_fraction"), "{stderr}");
    let manifest = read(&dir.join("manifest.json"));
    assert!(manifest.contains("\"error\""));
}

#[test]
fn exit_status_matches_manifest_error_section() {
    // Success: manifest has no error section, exit code 0.
    let dir = fresh_dir("exit-ok");
    let out = radar(&["build-dataset", "--tasks", "2", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let manifest = read(&dir.join("manifest.json"));
    assert!(!manifest.contains("\"error\""));

    // Failure: missing dataset file, nonzero exit, manifest carries error.
    let dir = fresh_dir("exit-err");
    let out = radar(&[
        "train",
        "--dataset",
        "/nonexistent/dataset.json",
        "--suite",
        "/nonexistent/tasks.json",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let manifest = read(&dir.join("manifest.json"));
    assert!(manifest.contains("\"error\""));
}

#[test]
fn metrics_csv_has_one_row_per_epoch() {
    let (_, _, tr) = prepared("prep-metrics");
    let metrics = read(&tr.join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 1 + 2, "header plus one row per epoch");
    assert!(lines[0].starts_with("epoch,vlb_loss,mean_reward,mean_utility"));
}

#[test]
fn generate_writes_dot_files_matching_active_size() {
    let (cfg, ds, tr) = prepared("prep-dot");
    let gen = fresh_dir("gen-dot");
    let out = radar(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        &format!("{}/checkpoint.json", tr.display()),
        "--suite",
        &format!("{}/tasks.json", ds.display()),
        "--task-id",
        "task-001",
        "--n-samples",
        "3",
        "--out",
        gen.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..3 {
        let topo = read(&gen.join(format!("topology-{k:03}.json")));
        let parsed: serde_json::Value = serde_json::from_str(&topo).unwrap();
        let n = parsed["n"].as_u64().unwrap() as usize;
        let edges: Vec<(usize, usize)> = parsed["edges"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| {
                (
                    e[0].as_u64().unwrap() as usize,
                    e[1].as_u64().unwrap() as usize,
                )
            })
            .collect();
        let active = (0..n)
            .filter(|&v| edges.iter().any(|&(a, b)| a == v || b == v))
            .count();
        let dot = read(&gen.join(format!("topology-{k:03}.dot")));
        let dot_nodes = dot.lines().filter(|l| l.contains("[label=")).count();
        assert_eq!(dot_nodes, active, "sample {k}");
    }
}

#[test]
fn evaluate_empty_suite_writes_header_only() {
    let (cfg, _, tr) = prepared("prep-empty");
    let dir = fresh_dir("eval-empty");
    let suite = dir.join("empty.json");
    std::fs::write(&suite, "[]").unwrap();
    let out = radar(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        &format!("{}/checkpoint.json", tr.display()),
        "--suite",
        suite.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read(&dir.join("report.csv"));
    assert_eq!(report.lines().count(), 1);
    assert!(report.starts_with("task_id,"));
}

#[test]
fn evaluate_aggregate_row_averages_task_rows() {
    let (cfg, ds, tr) = prepared("prep-agg");
    let dir = fresh_dir("eval-agg");
    let out = radar(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        &format!("{}/checkpoint.json", tr.display()),
        "--suite",
        &format!("{}/tasks.json", ds.display()),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read(&dir.join("report.csv"));
    let lines: Vec<&str> = report.lines().collect();
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let (tasks, aggregate): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r[0] != "aggregate");
    assert_eq!(aggregate.len(), 1);
    // utility column (index 2) must average exactly.
    let mean: f64 = tasks
        .iter()
        .map(|r| r[2].parse::<f64>().unwrap())
        .sum::<f64>()
        / tasks.len() as f64;
    let agg: f64 = aggregate[0][2].parse().unwrap();
    assert!((agg - mean).abs() < 1e-12, "{agg} vs {mean}");
}

#[test]
fn attack_none_mode_is_identity_and_liar_mode_flips_two() {
    let (cfg, ds, tr) = prepared("prep-attack");
    let dir = fresh_dir("attack-none");
    let out = radar(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        &format!("{}/checkpoint.json", tr.display()),
        "--suite",
        &format!("{}/tasks.json", ds.display()),
        "--mode",
        "none",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.join("attack.csv"));
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], cols[3], "clean vs attacked correctness: {line}");
        assert_eq!(cols[4], cols[5], "clean vs attacked vote share: {line}");
        assert_eq!(cols[6], "0");
    }

    let dir = fresh_dir("attack-liar");
    let out = radar(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        &format!("{}/checkpoint.json", tr.display()),
        "--suite",
        &format!("{}/tasks.json", ds.display()),
        "--mode",
        "prompt_liar",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.join("attack.csv"));
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let liars: usize = cols[6].parse().unwrap();
        assert!(liars <= 2);
    }
    let manifest = read(&dir.join("manifest.json"));
    assert!(manifest.contains("liar_agents"));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = fresh_dir("resume");
    let cfg = small_config(&dir, "");
    let ds = dir.join("ds");
    let out = radar(&[
        "build-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--tasks",
        "3",
        "--out",
        ds.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let dataset = format!("{}/dataset.json", ds.display());
    let suite = format!("{}/tasks.json", ds.display());

    // Continuous 4-epoch run.
    let full = dir.join("full");
    let out = radar(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        &dataset,
        "--suite",
        &suite,
        "--epochs",
        "4",
        "--out",
        full.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Split 2 + 2 run resumed from the checkpoint.
    let part1 = dir.join("part1");
    let out = radar(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        &dataset,
        "--suite",
        &suite,
        "--epochs",
        "2",
        "--out",
        part1.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let part2 = dir.join("part2");
    let out = radar(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        &dataset,
        "--suite",
        &suite,
        "--resume",
        &format!("{}/checkpoint.json", part1.display()),
        "--epochs",
        "4",
        "--out",
        part2.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let strip = |csv: String| -> Vec<String> {
        csv.lines()
            .skip(1)
            .map(|l| match l.rsplit_once(',') {
                Some((rest, _)) => rest.to_string(),
                None => l.to_string(),
            })
            .collect()
    };
    let full_rows = strip(read(&full.join("metrics.csv")));
    let mut split_rows = strip(read(&part1.join("metrics.csv")));
    split_rows.extend(strip(read(&part2.join("metrics.csv"))));
    assert_eq!(full_rows, split_rows);
    // And the final checkpoints agree exactly.
    assert_eq!(
        read(&full.join("checkpoint.json")),
        read(&part2.join("checkpoint.json"))
    );
}

#[test]
fn ablation_flags_change_behavior() {
    let (cfg, ds, tr) = prepared("prep-abl");
    let gen = |dir: &Path, extra: &[&str]| {
        let mut args = vec![
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
        ];
        let ckpt = format!("{}/checkpoint.json", tr.display());
        let suite = format!("{}/tasks.json", ds.display());
        args.push(&ckpt);
        args.push("--suite");
        args.push(&suite);
        args.extend(["--task-id", "task-000", "--seed", "4"]);
        args.extend(extra);
        args.extend(["--out", dir.to_str().unwrap()]);
        let out = radar(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        read(&dir.join("topology-000.json"))
    };
    let plain_dir = fresh_dir("abl-plain");
    let plain = gen(&plain_dir, &[]);
    let plain_again = gen(&fresh_dir("abl-plain2"), &[]);
    assert_eq!(plain, plain_again, "same seed must reproduce");
    let noes_dir = fresh_dir("abl-noes");
    let _ = gen(&noes_dir, &["--no-es"]);
    // The resolved configuration in the manifest must carry the ablation.
    let plain_manifest = read(&plain_dir.join("manifest.json"));
    let noes_manifest = read(&noes_dir.join("manifest.json"));
    assert!(plain_manifest.contains("\"no_es\": false"));
    assert!(noes_manifest.contains("\"no_es\": true"));
}
