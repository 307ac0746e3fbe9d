//! Experiment orchestration: builds streams and stacks from a config,
//! runs every (method, seed) pair, and emits `runs.csv`, `drift.csv`,
//! `summary.json`, and optional checkpoints.

use crate::config::{
    Backbone, Experiment, ExperimentConfig, NormChoice, PolicyChoice, StrategyChoice, StreamChoice,
};
use crate::idx::load_mnist_idx;
use crate::synth::blob_dataset;
use anyhow::{anyhow, bail, Context, Result};
use cnorm::{
    acc, fm, la, mean_sd, AccuracyMatrix, Dataset, DriftRecord, EpisodicMemory, InputLayout,
    LayerStack, NormConfig, NormSelect, SeededRng, SgdConfig, Strategy, TaskStream, TrainOptions,
};
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub struct SeedRun {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub star: Option<AccuracyMatrix>,
    pub drift: Vec<DriftRecord>,
    pub warnings: Vec<String>,
    pub state: Option<Vec<(String, Vec<f64>)>>,
    pub seconds: f64,
}

pub struct MethodRun {
    pub name: String,
    pub cfg: ExperimentConfig,
    pub seeds: Vec<SeedRun>,
    /// Wall-clock seconds for the whole method (all seeds).
    pub seconds: f64,
}

pub struct RunReport {
    pub out_dir: PathBuf,
    pub methods: Vec<MethodRun>,
}

#[derive(Debug, Serialize)]
pub struct DriftSummary {
    pub layer: usize,
    pub d_mu_mean: f64,
    pub d_mu_sd: f64,
    pub d_var_mean: f64,
    pub d_var_sd: f64,
}

#[derive(Debug, Serialize)]
pub struct MethodSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub fm_mean: Option<f64>,
    pub fm_sd: Option<f64>,
    pub la_mean: f64,
    pub la_sd: f64,
    pub drift: Vec<DriftSummary>,
}

#[derive(Debug, Serialize)]
pub struct SummaryFile {
    pub methods: Vec<MethodSummary>,
    pub warnings: Vec<String>,
}

fn norm_config(cfg: &ExperimentConfig) -> NormConfig {
    let select = match cfg.norm_layer {
        NormChoice::None => NormSelect::None,
        NormChoice::Bn => NormSelect::Batch,
        NormChoice::Brn => NormSelect::BatchRenorm,
        NormChoice::Gn => NormSelect::Group,
        NormChoice::Ln => NormSelect::Layer,
        NormChoice::In => NormSelect::Instance,
        NormChoice::Sn => NormSelect::Switch,
        NormChoice::Cn => NormSelect::Continual,
        NormChoice::CnVariant => NormSelect::ContinualVariant,
    };
    let mut nc = NormConfig::new(select).with_groups(cfg.groups);
    nc.eps = cfg.epsilon;
    nc.eta = cfg.eta;
    nc.average = cfg.moving_average;
    nc.r_max = cfg.r_max;
    nc.d_max = cfg.d_max;
    nc.order = cfg.variant_order;
    nc.tied_affine = cfg.tied_affine;
    nc
}

fn strategy_of(cfg: &ExperimentConfig) -> Strategy {
    match cfg.strategy {
        StrategyChoice::Single => Strategy::Single,
        StrategyChoice::Er => Strategy::Er {
            replay_batch: cfg.replay_batch_size,
        },
        StrategyChoice::Derpp => Strategy::DerPlusPlus {
            replay_batch: cfg.replay_batch_size,
            alpha: cfg.der_alpha,
            beta: cfg.der_beta,
        },
    }
}

fn layout_of(cfg: &ExperimentConfig) -> InputLayout {
    match cfg.backbone {
        Backbone::MlpToy => InputLayout::Flat,
        Backbone::CnnSmall => InputLayout::Spatial,
    }
}

fn classes_of(cfg: &ExperimentConfig) -> usize {
    match cfg.stream {
        StreamChoice::Pmnist => 10,
        StreamChoice::SplitSynthetic => 2 * cfg.n_tasks,
    }
}

/// Loads the base MNIST pair from the configured directory (standard
/// file names).
pub fn load_mnist_base(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

fn build_stream(
    cfg: &ExperimentConfig,
    mnist: Option<&(Dataset, Dataset)>,
    root: &SeededRng,
) -> Result<TaskStream> {
    match cfg.stream {
        StreamChoice::Pmnist => {
            let (train, test) = mnist.ok_or_else(|| anyhow!("MNIST base not loaded"))?;
            Ok(cnorm::build_pmnist_stream(
                train,
                test,
                cfg.n_tasks,
                cfg.train_per_task,
                cfg.permute_first_task,
                root,
            )?)
        }
        StreamChoice::SplitSynthetic => {
            let classes = classes_of(cfg);
            let per_class_train = cfg.train_per_task.div_ceil(2);
            let mut data_rng = root.substream("synthdata");
            let train = blob_dataset(classes, per_class_train, &mut data_rng);
            let test = blob_dataset(classes, 50, &mut data_rng);
            Ok(cnorm::build_split_stream(
                &train,
                &test,
                cfg.n_tasks,
                2,
                Some(cfg.train_per_task),
                root,
            )?)
        }
    }
}

fn build_stack(
    cfg: &ExperimentConfig,
    input_pixels: usize,
    root: &SeededRng,
) -> Result<LayerStack> {
    let nc = norm_config(cfg);
    let classes = classes_of(cfg);
    let stack = match cfg.backbone {
        Backbone::MlpToy => cnorm::mlp(input_pixels, &[100, 100], classes, &nc, root)?,
        Backbone::CnnSmall => cnorm::cnn_small(1, 8, classes, &nc, root)?,
    };
    Ok(stack)
}

/// Runs one (method, seed) pair end to end.
pub fn run_one_seed(
    cfg: &ExperimentConfig,
    mnist: Option<&(Dataset, Dataset)>,
    seed: u64,
) -> Result<SeedRun> {
    let started = Instant::now();
    let root = SeededRng::new(seed);
    let stream = build_stream(cfg, mnist, &root)?;
    let pixels = stream.tasks[0].train.pixels();
    let mut stack = build_stack(cfg, pixels, &root)?;
    let mut memory = match cfg.memory_policy {
        PolicyChoice::Ring => EpisodicMemory::ring(cfg.memory_capacity, cfg.per_task_quota),
        PolicyChoice::Reservoir => EpisodicMemory::reservoir(cfg.memory_capacity),
    };
    let strategy = strategy_of(cfg);
    let sgd = SgdConfig::new(cfg.lr, cfg.batch_size);
    let opts = TrainOptions {
        bn_star: cfg.bn_star,
        drift_tracking: cfg.drift_tracking,
        eval_batch: cfg.eval_batch,
        layout: layout_of(cfg),
    };
    let outcome = cnorm::train_online(
        &stream,
        &mut stack,
        &strategy,
        &mut memory,
        &sgd,
        &root,
        &opts,
    )?;
    Ok(SeedRun {
        seed,
        matrix: outcome.matrix,
        star: outcome.star_matrix,
        drift: outcome.drift,
        warnings: outcome.warnings,
        state: cfg.checkpoint.then(|| stack.state_arrays()),
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn run_method(
    name: &str,
    cfg: &ExperimentConfig,
    mnist: Option<&Arc<(Dataset, Dataset)>>,
    seeds: &[u64],
) -> Result<MethodRun> {
    let started = Instant::now();
    let runs: Vec<Result<SeedRun>> = seeds
        .par_iter()
        .map(|&seed| {
            run_one_seed(cfg, mnist.map(|m| m.as_ref()), seed)
                .with_context(|| format!("method `{name}`, seed {seed}"))
        })
        .collect();
    let mut seed_runs = Vec::with_capacity(runs.len());
    for r in runs {
        seed_runs.push(r?);
    }
    Ok(MethodRun {
        name: name.to_string(),
        cfg: cfg.clone(),
        seeds: seed_runs,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Executes every method entry of the experiment. Results are computed
/// fully before anything is written, so a failure leaves no partial
/// output files.
pub fn run_experiment(
    exp: &Experiment,
    out_override: Option<&Path>,
    seeds_override: Option<&[u64]>,
) -> Result<RunReport> {
    let needs_mnist = exp
        .methods
        .iter()
        .any(|(_, c)| matches!(c.stream, StreamChoice::Pmnist));
    let mnist: Option<Arc<(Dataset, Dataset)>> = if needs_mnist {
        let dir = &exp.methods[0].1.dataset;
        let pair = load_mnist_base(dir)
            .with_context(|| format!("loading MNIST from {}", dir.display()))?;
        Some(Arc::new(pair))
    } else {
        None
    };

    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| exp.methods[0].1.out.clone());

    let mut methods = Vec::new();
    for (name, cfg) in &exp.methods {
        let seeds: Vec<u64> = seeds_override
            .map(<[u64]>::to_vec)
            .unwrap_or_else(|| cfg.seeds.clone());
        methods.push(run_method(name, cfg, mnist.as_ref(), &seeds)?);
    }

    let report = RunReport { out_dir, methods };
    write_outputs(&report)?;
    Ok(report)
}

fn matrix_csv(seed_runs: &[(u64, &AccuracyMatrix)]) -> String {
    let mut csv = String::from("seed,after_task,eval_task,accuracy\n");
    for (seed, matrix) in seed_runs {
        for (i, row) in matrix.rows().iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                csv.push_str(&format!("{seed},{},{},{a:.6}\n", i + 1, j + 1));
            }
        }
    }
    csv
}

fn drift_csv(runs: &[SeedRun]) -> String {
    let mut csv = String::from("seed,after_task,layer,delta_mu,delta_var\n");
    for run in runs {
        for rec in &run.drift {
            for l in &rec.layers {
                csv.push_str(&format!(
                    "{},{},{},{:.9},{:.9}\n",
                    run.seed, rec.after_task, l.layer, l.d_mu, l.d_var
                ));
            }
        }
    }
    csv
}

/// Accuracy-metric summary of a set of per-seed matrices.
pub fn summarize_matrices(
    name: &str,
    seeds: &[u64],
    matrices: &[&AccuracyMatrix],
    drift: Vec<DriftSummary>,
) -> MethodSummary {
    let accs: Vec<f64> = matrices.iter().map(|m| acc(m)).collect();
    let las: Vec<f64> = matrices.iter().map(|m| la(m)).collect();
    let fms: Option<Vec<f64>> = matrices.iter().map(|m| fm(m)).collect();
    let (acc_mean, acc_sd) = mean_sd(&accs);
    let (la_mean, la_sd) = mean_sd(&las);
    let (fm_mean, fm_sd) = match fms {
        Some(v) => {
            let (m, s) = mean_sd(&v);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    MethodSummary {
        name: name.to_string(),
        seeds: seeds.to_vec(),
        acc_mean,
        acc_sd,
        fm_mean,
        fm_sd,
        la_mean,
        la_sd,
        drift,
    }
}

fn drift_summary(runs: &[SeedRun]) -> Vec<DriftSummary> {
    // final drift record per seed
    let finals: Vec<&DriftRecord> = runs.iter().filter_map(|r| r.drift.last()).collect();
    if finals.is_empty() {
        return Vec::new();
    }
    let layers = finals[0].layers.len();
    (0..layers)
        .map(|k| {
            let mus: Vec<f64> = finals.iter().map(|d| d.layers[k].d_mu).collect();
            let vars: Vec<f64> = finals.iter().map(|d| d.layers[k].d_var).collect();
            let (d_mu_mean, d_mu_sd) = mean_sd(&mus);
            let (d_var_mean, d_var_sd) = mean_sd(&vars);
            DriftSummary {
                layer: k + 1,
                d_mu_mean,
                d_mu_sd,
                d_var_mean,
                d_var_sd,
            }
        })
        .collect()
}

pub fn build_summary(report: &RunReport) -> SummaryFile {
    let mut methods = Vec::new();
    let mut warnings = Vec::new();
    for m in &report.methods {
        let seeds: Vec<u64> = m.seeds.iter().map(|s| s.seed).collect();
        let mats: Vec<&AccuracyMatrix> = m.seeds.iter().map(|s| &s.matrix).collect();
        methods.push(summarize_matrices(
            &m.name,
            &seeds,
            &mats,
            drift_summary(&m.seeds),
        ));
        let stars: Vec<&AccuracyMatrix> = m.seeds.iter().filter_map(|s| s.star.as_ref()).collect();
        if stars.len() == m.seeds.len() && !stars.is_empty() {
            methods.push(summarize_matrices(
                &format!("{}-bnstar", m.name),
                &seeds,
                &stars,
                Vec::new(),
            ));
        }
        for s in &m.seeds {
            for w in &s.warnings {
                let tagged = format!("{} (seed {}): {w}", m.name, s.seed);
                if !warnings.contains(&tagged) {
                    warnings.push(tagged);
                }
            }
        }
    }
    SummaryFile { methods, warnings }
}

fn write_outputs(report: &RunReport) -> Result<()> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        std::fs::create_dir_all(&report.out_dir)?;
        for m in &report.methods {
            let dir = report.out_dir.join(&m.name);
            std::fs::create_dir_all(&dir)?;
            let runs: Vec<(u64, &AccuracyMatrix)> =
                m.seeds.iter().map(|s| (s.seed, &s.matrix)).collect();
            let path = dir.join("runs.csv");
            std::fs::write(&path, matrix_csv(&runs))?;
            written.push(path);

            if m.seeds.iter().any(|s| !s.drift.is_empty()) {
                let path = dir.join("drift.csv");
                std::fs::write(&path, drift_csv(&m.seeds))?;
                written.push(path);
            }
            let stars: Vec<(u64, &AccuracyMatrix)> = m
                .seeds
                .iter()
                .filter_map(|s| s.star.as_ref().map(|st| (s.seed, st)))
                .collect();
            if !stars.is_empty() {
                let sdir = report.out_dir.join(format!("{}-bnstar", m.name));
                std::fs::create_dir_all(&sdir)?;
                let path = sdir.join("runs.csv");
                std::fs::write(&path, matrix_csv(&stars))?;
                written.push(path);
            }
            for s in &m.seeds {
                if let Some(state) = &s.state {
                    let entries: Vec<serde_json::Value> = state
                        .iter()
                        .map(|(name, values)| {
                            serde_json::json!({
                                "name": name,
                                "len": values.len(),
                                "values": values,
                            })
                        })
                        .collect();
                    let path = dir.join(format!("checkpoint_seed{}.json", s.seed));
                    std::fs::write(&path, serde_json::to_string(&entries)?)?;
                    written.push(path);
                }
            }
        }
        let summary = build_summary(report);
        let path = report.out_dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
        written.push(path);
        Ok(())
    })();
    if result.is_err() {
        for p in written {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

pub fn format_summary_table(summary: &SummaryFile) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>16} {:>16} {:>16}\n",
        "method", "ACC %", "FM %", "LA %"
    ));
    for m in &summary.methods {
        let fm_text = match (m.fm_mean, m.fm_sd) {
            (Some(mean), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * sd),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<24} {:>16} {:>16} {:>16}\n",
            m.name,
            format!("{:.2} ± {:.2}", 100.0 * m.acc_mean, 100.0 * m.acc_sd),
            fm_text,
            format!("{:.2} ± {:.2}", 100.0 * m.la_mean, 100.0 * m.la_sd),
        ));
        for d in &m.drift {
            out.push_str(&format!(
                "  drift layer {}: |d_mu| {:.3} ± {:.3}, |d_var| {:.3} ± {:.3}\n",
                d.layer, d.d_mu_mean, d.d_mu_sd, d.d_var_mean, d.d_var_sd
            ));
        }
    }
    for w in &summary.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

/// One comparison row: layer name, metric summary, wall-clock seconds.
pub type CompareRow = (String, MethodSummary, f64);

/// Runs a set of single-method configs that differ only in the
/// normalization layer and emits one merged comparison table with
/// wall-clock seconds per layer.
pub fn compare_layers(
    configs: &[Experiment],
    out_dir: Option<&Path>,
) -> Result<(String, Vec<CompareRow>)> {
    if configs.is_empty() {
        bail!("no configs to compare");
    }
    let mut entries = Vec::new();
    for exp in configs {
        if exp.methods.len() != 1 {
            bail!("compare expects single-method configs");
        }
        entries.push(exp.methods[0].clone());
    }
    // sweep axes: everything except the norm fields must agree
    let sanitized = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.norm_layer = NormChoice::Bn;
        c.groups = 0;
        c.variant_order = cnorm::StageOrder::GroupThenBatch;
        c.tied_affine = false;
        c.out = PathBuf::new();
        c
    };
    let reference = sanitized(&entries[0].1);
    for (name, cfg) in &entries[1..] {
        if sanitized(cfg) != reference {
            bail!("config `{name}` differs from the first in more than the norm layer");
        }
    }

    let needs_mnist = entries
        .iter()
        .any(|(_, c)| matches!(c.stream, StreamChoice::Pmnist));
    let mnist: Option<Arc<(Dataset, Dataset)>> = if needs_mnist {
        Some(Arc::new(load_mnist_base(&entries[0].1.dataset)?))
    } else {
        None
    };

    let mut rows = Vec::new();
    for (name, cfg) in &entries {
        let run = run_method(name, cfg, mnist.as_ref(), &cfg.seeds)?;
        let seeds: Vec<u64> = run.seeds.iter().map(|s| s.seed).collect();
        let mats: Vec<&AccuracyMatrix> = run.seeds.iter().map(|s| &s.matrix).collect();
        let summary = summarize_matrices(name, &seeds, &mats, Vec::new());
        rows.push((name.clone(), summary, run.seconds));
    }

    let mut table = format!(
        "{:<16} {:>16} {:>16} {:>16} {:>10}\n",
        "layer", "ACC %", "FM %", "LA %", "seconds"
    );
    let mut csv = String::from("layer,acc_mean,acc_sd,fm_mean,fm_sd,la_mean,la_sd,seconds\n");
    for (name, s, secs) in &rows {
        let fm_text = match (s.fm_mean, s.fm_sd) {
            (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
            _ => "-".to_string(),
        };
        table.push_str(&format!(
            "{:<16} {:>16} {:>16} {:>16} {:>10.2}\n",
            name,
            format!("{:.2} ± {:.2}", 100.0 * s.acc_mean, 100.0 * s.acc_sd),
            fm_text,
            format!("{:.2} ± {:.2}", 100.0 * s.la_mean, 100.0 * s.la_sd),
            secs
        ));
        csv.push_str(&format!(
            "{name},{:.6},{:.6},{},{},{:.6},{:.6},{:.3}\n",
            s.acc_mean,
            s.acc_sd,
            s.fm_mean.map_or("".into(), |v| format!("{v:.6}")),
            s.fm_sd.map_or("".into(), |v| format!("{v:.6}")),
            s.la_mean,
            s.la_sd,
            secs
        ));
    }
    let base = rows[0].2;
    if base > 0.0 {
        for (name, _, secs) in &rows[1..] {
            table.push_str(&format!(
                "relative wall-clock {name} / {}: {:.3}\n",
                rows[0].0,
                secs / base
            ));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("compare.csv"), &csv)?;
    }
    Ok((table, rows))
}
