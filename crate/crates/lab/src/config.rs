//! `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use stp_core::data::{CopyTaskSpec, PatternTaskSpec, FRACTION_DIVISORS};
use stp_core::losses::{AuxVariant, PredTarget, TripleStrategy};
use stp_core::theory::FanoDenominator;
use stp_core::transformer::ModelConfig;

pub const DEFAULT_SEEDS: [u64; 5] = [82, 23, 37, 84, 4];
/// Cap on total steps relative to the fraction-1 budget.
pub const MAX_STEP_MULTIPLIER: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskSpec {
    Pattern(PatternTaskSpec),
    Copy(CopyTaskSpec),
}

impl TaskSpec {
    pub fn n_train(&self) -> usize {
        match self {
            TaskSpec::Pattern(p) => p.n_train,
            TaskSpec::Copy(c) => c.n_train,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxSettings {
    pub variant: AuxVariant,
    pub lambda: f64,
    pub warmup_steps: Option<usize>,
    pub pred_target: PredTarget,
    pub strategy: Option<TripleStrategy>,
}

impl Default for AuxSettings {
    fn default() -> Self {
        Self {
            variant: AuxVariant::Stp,
            lambda: 0.02,
            warmup_steps: None,
            pred_target: PredTarget::Continuation,
            strategy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    /// Seed of the dataset, shared by every run of an experiment.
    pub data_seed: u64,
    pub aux: AuxSettings,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fraction: usize,
    pub half_compute: bool,
    pub output_dir: Option<PathBuf>,
    /// Seed list for sweeps and data-efficiency grids.
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub fractions: Vec<usize>,
    /// Window length for linearity diagnostics.
    pub tau: usize,
    /// Number of test sequences used by diagnostics.
    pub diag_sequences: usize,
    pub p1_ntp_range: f64,
    pub p1_stp_drop: f64,
    pub fano_denominator: FanoDenominator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskSpec::Pattern(PatternTaskSpec::default()),
            data_seed: 1,
            aux: AuxSettings::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 20,
            seed: DEFAULT_SEEDS[0],
            fraction: 1,
            half_compute: false,
            output_dir: None,
            seeds: DEFAULT_SEEDS.to_vec(),
            lambdas: vec![0.0, 0.005, 0.02, 0.08],
            fractions: vec![1, 2, 4],
            tau: 8,
            diag_sequences: 50,
            p1_ntp_range: 0.05,
            p1_stp_drop: 0.05,
            fano_denominator: FanoDenominator::VocabMinusOne,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

impl TrainConfig {
    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "vocab_size" => self.model.vocab_size = parse(v)?,
            "d_model" => self.model.d_model = parse(v)?,
            "n_layers" => self.model.n_layers = parse(v)?,
            "n_heads" => self.model.n_heads = parse(v)?,
            "d_ff" => self.model.d_ff = parse(v)?,
            "max_seq_len" => self.model.max_seq_len = parse(v)?,
            "tie_embeddings" => self.model.tie_embeddings = parse_bool(v)?,
            "task" => {
                self.task = match v {
                    "pattern" => TaskSpec::Pattern(PatternTaskSpec {
                        n_train: self.task.n_train(),
                        ..Default::default()
                    }),
                    "copy" => TaskSpec::Copy(CopyTaskSpec {
                        n_train: self.task.n_train(),
                        ..Default::default()
                    }),
                    other => return Err(format!("unknown task `{other}` (pattern|copy)")),
                }
            }
            "n_train" => match &mut self.task {
                TaskSpec::Pattern(p) => p.n_train = parse(v)?,
                TaskSpec::Copy(c) => c.n_train = parse(v)?,
            },
            "n_test" => match &mut self.task {
                TaskSpec::Pattern(p) => p.n_test = parse(v)?,
                TaskSpec::Copy(c) => c.n_test = parse(v)?,
            },
            k @ ("suffix_ratio" | "min_clauses" | "max_clauses") => match &mut self.task {
                TaskSpec::Pattern(p) => match k {
                    "suffix_ratio" => p.suffix_ratio = parse(v)?,
                    "min_clauses" => p.min_clauses = parse(v)?,
                    _ => p.max_clauses = parse(v)?,
                },
                TaskSpec::Copy(_) => return Err(format!("`{k}` applies to the pattern task only")),
            },
            k @ ("payload_len" | "disjoint_alphabets" | "alphabet") => match &mut self.task {
                TaskSpec::Copy(c) => match k {
                    "payload_len" => c.payload_len = parse(v)?,
                    "alphabet" => c.alphabet = parse(v)?,
                    _ => c.disjoint_alphabets = parse_bool(v)?,
                },
                TaskSpec::Pattern(_) => return Err(format!("`{k}` applies to the copy task only")),
            },
            "data_seed" => self.data_seed = parse(v)?,
            "variant" => self.aux.variant = v.parse().map_err(|e| format!("{e}"))?,
            "lambda" => self.aux.lambda = parse(v)?,
            "warmup_steps" => self.aux.warmup_steps = Some(parse(v)?),
            "pred_target" => self.aux.pred_target = v.parse().map_err(|e| format!("{e}"))?,
            "triple_strategy" => self.aux.strategy = Some(v.parse().map_err(|e| format!("{e}"))?),
            "lr" => self.adam.lr = parse(v)?,
            "beta1" => self.adam.beta1 = parse(v)?,
            "beta2" => self.adam.beta2 = parse(v)?,
            "adam_eps" => self.adam.eps = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "epochs" => self.epochs = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "fraction" => self.fraction = parse(v)?,
            "half_compute" => self.half_compute = parse_bool(v)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            "seeds" => self.seeds = parse_list(v)?,
            "lambdas" => self.lambdas = parse_list(v)?,
            "fractions" => self.fractions = parse_list(v)?,
            "tau" => self.tau = parse(v)?,
            "diag_sequences" => self.diag_sequences = parse(v)?,
            "p1_ntp_range" => self.p1_ntp_range = parse(v)?,
            "p1_stp_drop" => self.p1_stp_drop = parse(v)?,
            "fano_denominator" => {
                self.fano_denominator = match v {
                    "vocab_minus_one" => FanoDenominator::VocabMinusOne,
                    "vocab" => FanoDenominator::Vocab,
                    other => return Err(format!("unknown fano_denominator `{other}` (vocab_minus_one|vocab)")),
                }
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.aux.lambda.is_finite() && self.aux.lambda >= 0.0) {
            return bad(format!("lambda must be finite and ≥ 0, got {}", self.aux.lambda));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("every lambda must be finite and ≥ 0".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        for f in std::iter::once(&self.fraction).chain(&self.fractions) {
            if !FRACTION_DIVISORS.contains(f) {
                return bad(format!("fraction divisor {f} not in {FRACTION_DIVISORS:?}"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.tau < 2 {
            return bad(format!("tau must be ≥ 2, got {}", self.tau));
        }
        Ok(())
    }
}

/// Parses config text on top of the defaults.
pub fn parse_config_str(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ConfigError::Parse { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        cfg.set(k, v).map_err(err)?;
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_config_str(&text)
}

/// Applies `key=value` overrides after the file.
pub fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not key=value")))?;
        cfg.set(k, v).map_err(|m| ConfigError::Invalid(format!("--set {o}: {m}")))?;
    }
    Ok(())
}
