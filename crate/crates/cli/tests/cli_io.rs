//! End-to-end contracts of the runner: reproducibility, stable output
//! formats, warnings, checkpoints, and the comparison sweep.

use cnorm_cli::{compare_layers, parse_experiment, run_experiment};
use std::path::Path;
use std::process::Command;

fn synth_config(out: &Path, extra: &str) -> String {
    format!(
        "stream = split_synthetic\n\
         backbone = mlp_toy\n\
         n_tasks = 3\n\
         train_per_task = 90\n\
         strategy = er\n\
         memory_capacity = 60\n\
         per_task_quota = 20\n\
         seeds = 7\n\
         out = {}\n\
         {extra}",
        out.display()
    )
}

#[test]
fn identical_seeds_produce_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let exp_a = parse_experiment(&synth_config(&out_a, "")).unwrap();
    let exp_b = parse_experiment(&synth_config(&out_b, "")).unwrap();
    run_experiment(&exp_a, None, None).unwrap();
    run_experiment(&exp_b, None, None).unwrap();
    let csv_a = std::fs::read(out_a.join("er-bn/runs.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("er-bn/runs.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let sum_a = std::fs::read(out_a.join("summary.json")).unwrap();
    let sum_b = std::fs::read(out_b.join("summary.json")).unwrap();
    assert_eq!(sum_a, sum_b);
}

#[test]
fn csv_columns_and_json_keys_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let exp = parse_experiment(&synth_config(&out, "bn_star = on\ndrift_tracking = on\n")).unwrap();
    run_experiment(&exp, None, None).unwrap();

    let csv = std::fs::read_to_string(out.join("er-bn/runs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "seed,after_task,eval_task,accuracy");
    // lower-triangular listing in (seed, after_task, eval_task) order
    let first = lines.next().unwrap();
    assert!(first.starts_with("7,1,1,"), "first row: {first}");

    let drift = std::fs::read_to_string(out.join("er-bn/drift.csv")).unwrap();
    assert_eq!(
        drift.lines().next().unwrap(),
        "seed,after_task,layer,delta_mu,delta_var"
    );

    let json = std::fs::read_to_string(out.join("summary.json")).unwrap();
    // key order is fixed by the summary struct definition
    for pair in [
        ("\"methods\"", "\"name\""),
        ("\"name\"", "\"seeds\""),
        ("\"seeds\"", "\"acc_mean\""),
        ("\"acc_mean\"", "\"acc_sd\""),
        ("\"acc_sd\"", "\"fm_mean\""),
        ("\"fm_mean\"", "\"fm_sd\""),
        ("\"fm_sd\"", "\"la_mean\""),
        ("\"la_mean\"", "\"la_sd\""),
        ("\"la_sd\"", "\"drift\""),
    ] {
        let a = json
            .find(pair.0)
            .unwrap_or_else(|| panic!("{} missing", pair.0));
        let b = json
            .find(pair.1)
            .unwrap_or_else(|| panic!("{} missing", pair.1));
        assert!(a < b, "expected {} before {}", pair.0, pair.1);
    }
    // star rows present under the derived method name
    assert!(json.contains("er-bn-bnstar"));
    assert!(out.join("er-bn-bnstar/runs.csv").exists());
}

#[test]
fn oracle_on_per_sample_stack_records_warning_and_omits_drift() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let exp = parse_experiment(&synth_config(
        &out,
        "norm_layer = gn\ngroups = 4\nbn_star = on\ndrift_tracking = on\n",
    ))
    .unwrap();
    run_experiment(&exp, None, None).unwrap();
    let json = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    let warnings = parsed["warnings"].as_array().unwrap();
    assert!(!warnings.is_empty(), "expected a warning, got none");
    assert!(!json.contains("bnstar"));
    let drift = parsed["methods"][0]["drift"].as_array().unwrap();
    assert!(drift.is_empty());
    assert!(!out.join("er-gn/drift.csv").exists());
}

#[test]
fn checkpoints_are_emitted_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let exp = parse_experiment(&synth_config(&out, "checkpoint = on\n")).unwrap();
    run_experiment(&exp, None, None).unwrap();
    let path = out.join("er-bn/checkpoint_seed7.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let entries: serde_json::Value = serde_json::from_str(&text).unwrap();
    let arr = entries.as_array().unwrap();
    assert!(arr.iter().any(|e| e["name"] == "0.dense.weight"));
    assert!(arr
        .iter()
        .any(|e| e["name"].as_str().unwrap().contains("running_mu")));
}

#[test]
fn seeds_override_replaces_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let exp = parse_experiment(&synth_config(&out, "")).unwrap();
    let report = run_experiment(&exp, None, Some(&[11, 12])).unwrap();
    assert_eq!(report.methods[0].seeds.len(), 2);
    let csv = std::fs::read_to_string(out.join("er-bn/runs.csv")).unwrap();
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.starts_with("11,") || l.starts_with("12,")));
}

#[test]
fn compare_merges_rows_and_identical_configs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let base = |norm: &str, extra: &str| {
        format!(
            "stream = split_synthetic\n\
             backbone = mlp_toy\n\
             n_tasks = 2\n\
             train_per_task = 60\n\
             strategy = single\n\
             memory_capacity = 40\n\
             norm_layer = {norm}\n\
             seeds = 3,4\n\
             {extra}"
        )
    };
    let exps: Vec<_> = [
        base("bn", ""),
        base("gn", "groups = 4\n"),
        base("cn", "groups = 4\n"),
    ]
    .iter()
    .map(|t| parse_experiment(t).unwrap())
    .collect();
    let (_, rows) = compare_layers(&exps, Some(&dir.path().join("cmp"))).unwrap();
    assert_eq!(rows.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "layer,acc_mean,acc_sd,fm_mean,fm_sd,la_mean,la_sd,seconds"
    );

    // duplicated identical configs yield identical metric rows
    let twice: Vec<_> = [base("bn", ""), base("bn", "")]
        .iter()
        .map(|t| parse_experiment(t).unwrap())
        .collect();
    let (_, rows2) = compare_layers(&twice, None).unwrap();
    assert_eq!(rows2[0].1.acc_mean, rows2[1].1.acc_mean);
    assert_eq!(rows2[0].1.la_mean, rows2[1].1.la_mean);

    // diverging non-norm fields are rejected
    let bad: Vec<_> = [base("bn", ""), base("gn", "groups = 4\nlr = 0.05\n")]
        .iter()
        .map(|t| parse_experiment(t).unwrap())
        .collect();
    assert!(compare_layers(&bad, None).is_err());
}

#[test]
fn standard_mnist_files_load_with_expected_counts() {
    let dir = std::env::var_os("CNORM_MNIST_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| {
            std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
        });
    assert!(
        dir.join("train-images-idx3-ubyte").exists(),
        "MNIST IDX files not found in {} — set CNORM_MNIST_DIR or place the four \
         standard files there",
        dir.display()
    );
    let (train, test) = cnorm_cli::load_mnist_base(&dir).unwrap();
    assert_eq!(train.len(), 60000);
    assert_eq!((train.rows, train.cols), (28, 28));
    assert_eq!(test.len(), 10000);
    assert!(train.labels.iter().all(|&l| l < 10));
    assert!(train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn binary_exits_nonzero_on_bad_config_and_zero_on_success() {
    let dir = tempfile::tempdir().unwrap();
    let bad_path = dir.path().join("bad.cfg");
    std::fs::write(&bad_path, "no_such_key = 1\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cnorm"))
        .args(["run", "--config"])
        .arg(&bad_path)
        .status()
        .unwrap();
    assert!(!status.success());

    let good_path = dir.path().join("good.cfg");
    let out = dir.path().join("run");
    std::fs::write(&good_path, synth_config(&out, "")).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_cnorm"))
        .args(["run", "--config"])
        .arg(&good_path)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("er-bn"), "stdout: {stdout}");
}
