//! Flat key-value experiment configs with one `[section]` per method
//! entry. Section keys override the globals above them; unknown keys are
//! hard errors.

use anyhow::{anyhow, bail, Context, Result};
use cnorm::{Average, StageOrder};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamChoice {
    Pmnist,
    SplitSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    MlpToy,
    CnnSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    None,
    Bn,
    Brn,
    Gn,
    Ln,
    In,
    Sn,
    Cn,
    CnVariant,
}

impl NormChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormChoice::None => "none",
            NormChoice::Bn => "bn",
            NormChoice::Brn => "brn",
            NormChoice::Gn => "gn",
            NormChoice::Ln => "ln",
            NormChoice::In => "in",
            NormChoice::Sn => "sn",
            NormChoice::Cn => "cn",
            NormChoice::CnVariant => "cn_variant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    Single,
    Er,
    Derpp,
}

impl StrategyChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyChoice::Single => "single",
            StrategyChoice::Er => "er",
            StrategyChoice::Derpp => "derpp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyChoice {
    Ring,
    Reservoir,
}

/// One fully-resolved experiment configuration (one method entry).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub stream: StreamChoice,
    pub n_tasks: usize,
    pub train_per_task: usize,
    pub backbone: Backbone,
    pub norm_layer: NormChoice,
    pub groups: usize,
    pub variant_order: StageOrder,
    pub tied_affine: bool,
    pub strategy: StrategyChoice,
    pub memory_policy: PolicyChoice,
    pub memory_capacity: usize,
    pub per_task_quota: usize,
    pub replay_batch_size: usize,
    pub der_alpha: f64,
    pub der_beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub eta: f64,
    pub moving_average: Average,
    pub epsilon: f64,
    pub bn_star: bool,
    pub drift_tracking: bool,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub permute_first_task: bool,
    pub r_max: f64,
    pub d_max: f64,
    pub checkpoint: bool,
    pub eval_batch: usize,
}

/// A parsed config file: an ordered list of named method entries.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub methods: Vec<(String, ExperimentConfig)>,
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "stream",
    "n_tasks",
    "train_per_task",
    "backbone",
    "norm_layer",
    "groups",
    "variant_order",
    "tied_affine",
    "strategy",
    "memory_policy",
    "memory_capacity",
    "per_task_quota",
    "replay_batch_size",
    "der_alpha",
    "der_beta",
    "lr",
    "batch_size",
    "eta",
    "moving_average",
    "epsilon",
    "bn_star",
    "drift_tracking",
    "seeds",
    "out",
    "permute_first_task",
    "r_max",
    "d_max",
    "checkpoint",
    "eval_batch",
];

type KeyMap = BTreeMap<String, String>;

fn parse_sections(text: &str) -> Result<(KeyMap, Vec<(String, KeyMap)>)> {
    let mut globals = KeyMap::new();
    let mut sections: Vec<(String, KeyMap)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| anyhow!("line {}: unterminated section header", lineno + 1))?
                .trim();
            if name.is_empty() {
                bail!("line {}: empty section name", lineno + 1);
            }
            if sections.iter().any(|(n, _)| n == name) {
                bail!("line {}: duplicate section [{name}]", lineno + 1);
            }
            sections.push((name.to_string(), KeyMap::new()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            bail!("line {}: unknown key `{key}`", lineno + 1);
        }
        let target = match sections.last_mut() {
            Some((_, map)) => map,
            None => &mut globals,
        };
        if target.insert(key.clone(), value).is_some() {
            bail!(
                "line {}: key `{key}` set twice in the same scope",
                lineno + 1
            );
        }
    }
    Ok((globals, sections))
}

fn get<'a>(map: &'a KeyMap, fallback: &'a KeyMap, key: &str) -> Option<&'a str> {
    map.get(key)
        .or_else(|| fallback.get(key))
        .map(|s| s.as_str())
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => bail!("key `{key}`: expected a boolean, got `{v}`"),
    }
}

fn resolve(section: &KeyMap, globals: &KeyMap) -> Result<ExperimentConfig> {
    let s = |key: &str| get(section, globals, key);
    let num = |key: &str, default: usize| -> Result<usize> {
        match s(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("key `{key}`: bad integer `{v}`")),
            None => Ok(default),
        }
    };
    let float = |key: &str, default: f64| -> Result<f64> {
        match s(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("key `{key}`: bad number `{v}`")),
            None => Ok(default),
        }
    };
    let flag = |key: &str, default: bool| -> Result<bool> {
        match s(key) {
            Some(v) => parse_bool(key, v),
            None => Ok(default),
        }
    };

    let stream = match s("stream").unwrap_or("pmnist") {
        "pmnist" => StreamChoice::Pmnist,
        "split_synthetic" => StreamChoice::SplitSynthetic,
        v => bail!("key `stream`: unknown value `{v}`"),
    };
    let backbone = match s("backbone").unwrap_or("mlp_toy") {
        "mlp_toy" => Backbone::MlpToy,
        "cnn_small" => Backbone::CnnSmall,
        v => bail!("key `backbone`: unknown value `{v}`"),
    };
    let norm_layer = match s("norm_layer").unwrap_or("bn") {
        "none" => NormChoice::None,
        "bn" => NormChoice::Bn,
        "brn" => NormChoice::Brn,
        "gn" => NormChoice::Gn,
        "ln" => NormChoice::Ln,
        "in" => NormChoice::In,
        "sn" => NormChoice::Sn,
        "cn" => NormChoice::Cn,
        "cn_variant" => NormChoice::CnVariant,
        v => bail!("key `norm_layer`: unknown value `{v}`"),
    };
    let variant_order = match s("variant_order").unwrap_or("gn_then_bn") {
        "gn_then_bn" => StageOrder::GroupThenBatch,
        "bn_then_gn" => StageOrder::BatchThenGroup,
        v => bail!("key `variant_order`: unknown value `{v}`"),
    };
    let strategy = match s("strategy").unwrap_or("single") {
        "single" => StrategyChoice::Single,
        "er" => StrategyChoice::Er,
        "derpp" => StrategyChoice::Derpp,
        v => bail!("key `strategy`: unknown value `{v}`"),
    };
    let memory_policy = match s("memory_policy").unwrap_or("ring") {
        "ring" => PolicyChoice::Ring,
        "reservoir" => PolicyChoice::Reservoir,
        v => bail!("key `memory_policy`: unknown value `{v}`"),
    };
    let moving_average = match s("moving_average").unwrap_or("ema") {
        "ema" => Average::Ema,
        "cma" => Average::Cma,
        v => bail!("key `moving_average`: unknown value `{v}`"),
    };

    let n_tasks = num("n_tasks", 5)?;
    let per_task_quota = num("per_task_quota", 50)?;
    let memory_capacity = num("memory_capacity", n_tasks * per_task_quota)?;
    let seeds: Vec<u64> = match s("seeds") {
        Some(v) => parse_seed_list(v)?,
        None => vec![1, 2, 3, 4, 5],
    };

    let cfg = ExperimentConfig {
        dataset: PathBuf::from(s("dataset").unwrap_or("data/mnist")),
        stream,
        n_tasks,
        train_per_task: num("train_per_task", 2000)?,
        backbone,
        norm_layer,
        groups: num("groups", 32)?,
        variant_order,
        tied_affine: flag("tied_affine", false)?,
        strategy,
        memory_policy,
        memory_capacity,
        per_task_quota,
        replay_batch_size: num("replay_batch_size", 10)?,
        der_alpha: float("der_alpha", 0.5)?,
        der_beta: float("der_beta", 0.5)?,
        lr: float("lr", 0.03)?,
        batch_size: num("batch_size", 10)?,
        eta: float("eta", 0.1)?,
        moving_average,
        epsilon: float("epsilon", 1e-5)?,
        bn_star: flag("bn_star", false)?,
        drift_tracking: flag("drift_tracking", false)?,
        seeds,
        out: PathBuf::from(s("out").unwrap_or("out")),
        permute_first_task: flag("permute_first_task", true)?,
        r_max: float("r_max", 3.0)?,
        d_max: float("d_max", 5.0)?,
        checkpoint: flag("checkpoint", false)?,
        eval_batch: num("eval_batch", 256)?,
    };
    validate(&cfg)?;
    Ok(cfg)
}

pub fn parse_seed_list(v: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = v
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed `{p}`"))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("empty seed list");
    }
    Ok(seeds)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.n_tasks == 0 {
        bail!("n_tasks must be at least 1");
    }
    if cfg.train_per_task == 0 {
        bail!("train_per_task must be at least 1");
    }
    if cfg.lr <= 0.0 {
        bail!("lr must be positive");
    }
    if cfg.batch_size == 0 {
        bail!("batch_size must be at least 1");
    }
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        bail!("eta must lie in (0, 1]");
    }
    if cfg.epsilon <= 0.0 {
        bail!("epsilon must be positive");
    }
    if cfg.r_max < 1.0 || cfg.d_max < 0.0 {
        bail!("r_max must be >= 1 and d_max >= 0");
    }
    if cfg.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    if cfg.eval_batch == 0 {
        bail!("eval_batch must be at least 1");
    }
    let needs_memory = !matches!(cfg.strategy, StrategyChoice::Single);
    if needs_memory {
        if cfg.memory_capacity == 0 {
            bail!(
                "strategy `{}` needs memory_capacity > 0",
                cfg.strategy.as_str()
            );
        }
        if cfg.replay_batch_size == 0 {
            bail!("replay_batch_size must be at least 1 for replay strategies");
        }
        if cfg.replay_batch_size > cfg.memory_capacity {
            bail!(
                "replay_batch_size {} exceeds memory_capacity {}",
                cfg.replay_batch_size,
                cfg.memory_capacity
            );
        }
    }
    Ok(())
}

/// Parses a config file into its method entries. A file without sections
/// yields one method named `<strategy>-<norm_layer>`.
pub fn parse_experiment(text: &str) -> Result<Experiment> {
    let (globals, sections) = parse_sections(text)?;
    let mut methods = Vec::new();
    if sections.is_empty() {
        let cfg = resolve(&KeyMap::new(), &globals)?;
        let name = format!("{}-{}", cfg.strategy.as_str(), cfg.norm_layer.as_str());
        methods.push((name, cfg));
    } else {
        for (name, map) in &sections {
            methods.push((name.clone(), resolve(map, &globals)?));
        }
    }
    Ok(Experiment { methods })
}

pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse_experiment(&text).with_context(|| format!("in config {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_reference_settings() {
        let exp = parse_experiment("").unwrap();
        assert_eq!(exp.methods.len(), 1);
        let (name, cfg) = &exp.methods[0];
        assert_eq!(name, "single-bn");
        assert_eq!(cfg.batch_size, 10);
        assert!((cfg.lr - 0.03).abs() < 1e-12);
        assert!((cfg.eta - 0.1).abs() < 1e-12);
        assert_eq!(cfg.per_task_quota, 50);
        assert_eq!(cfg.memory_capacity, 250);
        assert_eq!(cfg.train_per_task, 2000);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = parse_experiment("learning_rate = 0.05\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn sections_override_globals() {
        let text = "\
norm_layer = bn
strategy = single
seeds = 7

[er-cn]
strategy = er
norm_layer = cn
groups = 4
";
        let exp = parse_experiment(text).unwrap();
        assert_eq!(exp.methods.len(), 1);
        let (name, cfg) = &exp.methods[0];
        assert_eq!(name, "er-cn");
        assert_eq!(cfg.strategy, StrategyChoice::Er);
        assert_eq!(cfg.norm_layer, NormChoice::Cn);
        assert_eq!(cfg.groups, 4);
        assert_eq!(cfg.seeds, vec![7]);
    }

    #[test]
    fn memory_strategy_requires_capacity() {
        let err = parse_experiment("strategy = er\nmemory_capacity = 0\n").unwrap_err();
        assert!(err.to_string().contains("memory_capacity"));
    }

    #[test]
    fn replay_bounded_by_capacity() {
        let err = parse_experiment("strategy = er\nmemory_capacity = 5\nreplay_batch_size = 10\n")
            .unwrap_err();
        assert!(err.to_string().contains("replay_batch_size"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let exp = parse_experiment("# a comment\n\nlr = 0.05 # trailing\n").unwrap();
        assert!((exp.methods[0].1.lr - 0.05).abs() < 1e-12);
    }

    #[test]
    fn duplicate_sections_rejected() {
        let err = parse_experiment("[a]\nlr = 0.1\n[a]\nlr = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate section"));
    }
}
