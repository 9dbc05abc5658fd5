//! End-to-end runs of the `equiplace` binary at toy scale.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_equiplace"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn equiplace");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("epcli-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn estimate_storage_prints_reference_numbers() {
    let out = run_ok(&["estimate-storage", "357000", "0.08", "512", "2"]);
    let text = stdout(&out);
    assert!(text.contains("4462500 images"), "{text}");
    assert!(text.contains("~4.57 GB"), "{text}");
}

#[test]
fn build_dataset_is_deterministic_and_respects_years() {
    let dir_a = tmp("ds-a");
    let dir_b = tmp("ds-b");
    for dir in [&dir_a, &dir_b] {
        let out = run_ok(&[
            "build-dataset",
            "--seed",
            "7",
            "--jobs",
            "2",
            "--out",
            &s(dir),
            "--size",
            "400",
            "--interval",
            "52",
            "--diameter-px",
            "48",
            "--years",
            "3",
        ]);
        assert!(stdout(&out).contains("built"), "{}", stdout(&out));
    }
    let a = std::fs::read(dir_a.join("manifest.jsonl")).unwrap();
    let b = std::fs::read(dir_b.join("manifest.jsonl")).unwrap();
    assert_eq!(a, b, "same seed must give identical manifests");
    // every place has 3 variants
    let text = String::from_utf8(a).unwrap();
    for line in text.lines() {
        assert_eq!(line.matches("\"year\"").count(), 3, "{line}");
    }
    // non-empty out dir without --force is rejected
    let fail = bin()
        .args(["build-dataset", "--seed", "7", "--out", &s(&dir_a), "--size", "400"])
        .output()
        .unwrap();
    assert!(!fail.status.success());
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}

/// One shared toy pipeline: dataset -> train -> encode -> eval -> sweep ->
/// bench. Chained in a single test to keep the suite fast.
#[test]
fn pipeline_end_to_end() {
    let root = tmp("pipe");
    let data = root.join("data");
    run_ok(&[
        "build-dataset",
        "--seed",
        "11",
        "--jobs",
        "2",
        "--out",
        &s(&data),
        "--size",
        "320",
        "--interval",
        "40",
        "--diameter-px",
        "36",
        "--years",
        "2",
        "--water-fraction",
        "0.05",
    ]);
    let manifest = data.join("manifest.jsonl");

    // -- train (tiny): group 4 and group 1 configs differ only in group line
    let mut model_paths = Vec::new();
    for group in ["4", "1"] {
        let out_dir = root.join(format!("run-g{group}"));
        let out = run_ok(&[
            "train",
            "--seed",
            "3",
            "--jobs",
            "2",
            "--manifest",
            &s(&manifest),
            "--out",
            &s(&out_dir),
            "--group",
            group,
            "--epochs",
            "1",
            "--input-size",
            "24",
            "--widths",
            "3,4",
            "--blocks",
            "1",
            "--descriptor-dim",
            "8",
            "--places-per-batch",
            "4",
            "--views-per-place",
            "2",
        ]);
        assert!(stdout(&out).contains("trained 1 epochs"), "{}", stdout(&out));
        assert!(out_dir.join("log.csv").exists());
        assert!(out_dir.join("config.resolved.txt").exists());
        model_paths.push(out_dir.join("model.epm"));
    }
    // saved configs must differ only in the group_order line
    let cfg4 = std::fs::read_to_string(root.join("run-g4/config.resolved.txt")).unwrap();
    let cfg1 = std::fs::read_to_string(root.join("run-g1/config.resolved.txt")).unwrap();
    let diff: Vec<(&str, &str)> = cfg4
        .lines()
        .zip(cfg1.lines())
        .filter(|(a, b)| a != b)
        .collect();
    assert_eq!(diff, vec![("group_order=4", "group_order=1")]);

    // log csv has the canonical header
    let log = std::fs::read_to_string(root.join("run-g4/log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,kept_pos,kept_neg,val_recall1\n"));

    // -- encode: db store and store with reduced dim
    let db_path = root.join("db.epd");
    run_ok(&[
        "encode",
        "--jobs",
        "2",
        "--model",
        &s(&model_paths[0]),
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&db_path),
    ]);
    let out = run_ok(&[
        "encode",
        "--model",
        &s(&model_paths[0]),
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&db_path),
        "--force",
    ]);
    assert!(stdout(&out).contains("dim 8"));
    // re-encode with the same model gives identical bytes
    let bytes_a = std::fs::read(&db_path).unwrap();
    run_ok(&[
        "encode",
        "--model",
        &s(&model_paths[0]),
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&db_path),
        "--force",
    ]);
    assert_eq!(bytes_a, std::fs::read(&db_path).unwrap());

    let small_path = root.join("db4.epd");
    let out = run_ok(&[
        "encode",
        "--model",
        &s(&model_paths[0]),
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&small_path),
        "--dim",
        "4",
    ]);
    assert!(stdout(&out).contains("dim 4"), "{}", stdout(&out));

    // -- eval: self-retrieval scores 100% under same-place
    let eval_dir = root.join("eval");
    let out = run_ok(&[
        "eval",
        "--queries",
        &s(&db_path),
        "--db",
        &s(&db_path),
        "--criterion",
        "same-place",
        "--out",
        &s(&eval_dir),
    ]);
    assert!(stdout(&out).contains("R@1 = 100.00%"), "{}", stdout(&out));
    // CSV and JSON agree
    let csv = std::fs::read_to_string(eval_dir.join("recall.csv")).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("recall.json")).unwrap())
            .unwrap();
    for (i, line) in csv.lines().skip(1).enumerate() {
        let (n, pct) = line.split_once(',').unwrap();
        assert_eq!(json["ns"][i], n.parse::<u64>().unwrap());
        let jr = json["recall_pct"][i].as_f64().unwrap();
        assert!((jr - pct.parse::<f64>().unwrap()).abs() < 1e-3);
    }
    // radius criterion works with geo from the manifest
    run_ok(&[
        "eval",
        "--queries",
        &s(&db_path),
        "--db",
        &s(&db_path),
        "--criterion",
        "radius:50",
        "--manifest",
        &s(&manifest),
        "--out",
        &s(&root.join("eval-radius")),
    ]);

    // -- sweep-dims: one CSV row per dim
    let sweep_dir = root.join("sweep");
    run_ok(&[
        "sweep-dims",
        "--queries",
        &s(&db_path),
        "--db",
        &s(&db_path),
        "--dims",
        "8,4,2",
        "--out",
        &s(&sweep_dir),
    ]);
    let sweep_csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep_csv.lines().count(), 4, "{sweep_csv}");
    assert!(sweep_csv.starts_with("dim,recall1,recall5,recall10,delta_recall1\n"));

    // -- bench-encode emits mean and std columns
    let bench_dir = root.join("bench");
    let out = run_ok(&[
        "bench-encode",
        "--model",
        &s(&model_paths[0]),
        "--manifest",
        &s(&manifest),
        "--reps",
        "10",
        "--warmup",
        "3",
        "--out",
        &s(&bench_dir),
    ]);
    assert!(stdout(&out).contains("mean"), "{}", stdout(&out));
    let bench_csv = std::fs::read_to_string(bench_dir.join("bench.csv")).unwrap();
    assert!(bench_csv.starts_with("mean_ms,std_ms,reps,warmup,machine\n"));

    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn config_file_merges_and_rejects_unknown_keys() {
    let root = tmp("cfg");
    std::fs::create_dir_all(&root).unwrap();
    let cfg_path = root.join("run.cfg");
    std::fs::write(&cfg_path, "seed=9\nworld_size=400\ninterval_m=52\ndiameter_px=48\nyears=1\n").unwrap();
    let out_dir = root.join("ds");
    run_ok(&[
        "build-dataset",
        "--config",
        &s(&cfg_path),
        "--out",
        &s(&out_dir),
    ]);
    let echoed = std::fs::read_to_string(out_dir.join("config.resolved.txt")).unwrap();
    assert!(echoed.contains("seed=9"));
    assert!(echoed.contains("world_size=400"));

    std::fs::write(&cfg_path, "seed=9\nbogus_key=1\n").unwrap();
    let fail = bin()
        .args([
            "build-dataset",
            "--config",
            &s(&cfg_path),
            "--out",
            &s(&root.join("ds2")),
        ])
        .output()
        .unwrap();
    assert!(!fail.status.success());
    assert!(
        String::from_utf8_lossy(&fail.stderr).contains("bogus_key"),
        "{}",
        String::from_utf8_lossy(&fail.stderr)
    );
    std::fs::remove_dir_all(&root).ok();
}
