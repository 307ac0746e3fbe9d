//! Relative wall-clock overhead of the composed layer versus batch norm
//! on the toy MLP, via the comparison sweep.

use cnorm_cli::{compare_layers, parse_experiment};
use std::path::PathBuf;

fn mnist_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("CNORM_MNIST_DIR") {
        return dir.into();
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn composed_layer_overhead_stays_small() {
    let dir = mnist_dir();
    assert!(
        dir.join("train-images-idx3-ubyte").exists(),
        "MNIST IDX files not found in {}",
        dir.display()
    );
    let cfg = |norm: &str, groups: usize| {
        format!(
            "dataset = {}\n\
             stream = pmnist\n\
             backbone = mlp_toy\n\
             n_tasks = 3\n\
             train_per_task = 800\n\
             strategy = single\n\
             norm_layer = {norm}\n\
             groups = {groups}\n\
             seeds = 1,2\n",
            dir.display()
        )
    };
    let exps = vec![
        parse_experiment(&cfg("bn", 32)).unwrap(),
        parse_experiment(&cfg("cn", 4)).unwrap(),
    ];
    // single wall-clock samples on a shared box are noisy; the min over a
    // few repetitions estimates the intrinsic ratio
    let mut best_ratio = f64::INFINITY;
    let mut last_rows = None;
    for round in 0..3 {
        let (table, rows) = compare_layers(&exps, None).unwrap();
        let ratio = rows[1].2 / rows[0].2;
        println!("round {round}: wall-clock cn/bn = {ratio:.3}\n{table}");
        best_ratio = best_ratio.min(ratio);
        last_rows = Some(rows);
        if best_ratio < 1.15 {
            break;
        }
    }
    println!("wall-clock cn/bn (min) = {best_ratio:.3}");
    assert!(
        best_ratio < 1.15,
        "composed-layer overhead {best_ratio:.3} exceeds 1.15"
    );
    // both runs learned something: mean ACC above chance
    let rows = last_rows.unwrap();
    assert!(rows.iter().all(|(_, s, _)| s.acc_mean > 0.3));
}
