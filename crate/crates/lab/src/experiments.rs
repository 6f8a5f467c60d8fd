//! Multi-run drivers: λ sweep, data-efficiency grid, diagnostics.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use stp_core::data::ExamplePair;
use stp_core::geometry::{self, DiagnosticRow};
use stp_core::tensor::Tensor;
use stp_core::theory::{self, TTest};
use stp_core::transformer::ModelParams;

use crate::config::TrainConfig;
use crate::train::{self, io_err, LabError, MetricRow, TrainedRun};

/// Worker threads for concurrent runs: `STP_THREADS`, else the CPU count.
pub fn thread_count() -> usize {
    std::env::var("STP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Completed runs keyed by everything that influences training.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: Mutex<HashMap<String, Arc<TrainedRun>>>,
}

fn run_key(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = None;
    c.seeds.clear();
    c.lambdas.clear();
    c.fractions.clear();
    c.tau = 0;
    c.diag_sequences = 0;
    c.p1_ntp_range = 0.0;
    c.p1_stp_drop = 0.0;
    format!("{c:?}")
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trains every config not already cached (concurrently, up to
    /// [`thread_count`] at a time) and returns runs in input order.
    pub fn run_all(&self, cfgs: &[TrainConfig]) -> Result<Vec<Arc<TrainedRun>>, LabError> {
        let keys: Vec<String> = cfgs.iter().map(run_key).collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let runs = self.runs.lock().expect("cache lock");
            for (i, k) in keys.iter().enumerate() {
                if !runs.contains_key(k) && !missing.iter().any(|&j| keys[j] == *k) {
                    missing.push(i);
                }
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("thread pool");
        let trained: Vec<Result<TrainedRun, LabError>> = pool.install(|| {
            missing
                .par_iter()
                .map(|&i| {
                    let mut c = cfgs[i].clone();
                    c.output_dir = None;
                    train::train_run(&c)
                })
                .collect()
        });
        let mut runs = self.runs.lock().expect("cache lock");
        for (&i, r) in missing.iter().zip(trained) {
            runs.insert(keys[i].clone(), Arc::new(r?));
        }
        Ok(keys.iter().map(|k| Arc::clone(&runs[k])).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub experiment: String,
    pub variant: String,
    pub lambda: f64,
    pub fraction: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub acc_star: Option<f64>,
    pub acc_starstar: Option<f64>,
    pub final_ntp: f64,
    pub final_stp: f64,
}

pub const AGGREGATE_HEADER: &str =
    "experiment,variant,lambda,fraction,seed,accuracy,acc_star,acc_starstar,final_ntp,final_stp";

impl AggregateRow {
    pub fn from_run(experiment: &str, variant: &str, run: &TrainedRun) -> Self {
        let r = &run.record;
        Self {
            experiment: experiment.into(),
            variant: variant.into(),
            lambda: r.lambda,
            fraction: r.fraction,
            seed: r.seed,
            accuracy: r.eval.accuracy,
            acc_star: r.eval.acc_star,
            acc_starstar: r.eval.acc_starstar,
            final_ntp: r.final_ntp,
            final_stp: r.final_stp,
        }
    }
}

pub fn write_aggregate<W: Write>(mut w: W, rows: &[AggregateRow]) -> io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.variant,
            r.lambda,
            r.fraction,
            r.seed,
            r.accuracy,
            opt(r.acc_star),
            opt(r.acc_starstar),
            r.final_ntp,
            r.final_stp
        )?;
    }
    Ok(())
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn run_dir(root: &Path, experiment: &str, label: &str, run: &TrainedRun, half: bool) -> PathBuf {
    let r = &run.record;
    root.join(experiment).join(format!(
        "{label}_lambda{}_frac{}{}_seed{}",
        r.lambda,
        r.fraction,
        if half { "_half" } else { "" },
        r.seed
    ))
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: f64,
    /// One run per seed, in seed order.
    pub runs: Vec<Arc<TrainedRun>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub final_stp: (f64, f64),
    pub final_ntp: (f64, f64),
    pub accuracy: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn summaries(&self) -> Vec<LambdaSummary> {
        self.points
            .iter()
            .map(|p| {
                let col = |f: fn(&TrainedRun) -> f64| p.runs.iter().map(|r| f(r)).collect::<Vec<_>>();
                LambdaSummary {
                    lambda: p.lambda,
                    final_stp: mean_sd(&col(|r| r.record.final_stp)),
                    final_ntp: mean_sd(&col(|r| r.record.final_ntp)),
                    accuracy: mean_sd(&col(|r| r.record.eval.accuracy)),
                }
            })
            .collect()
    }

    pub fn aggregate_rows(&self) -> Vec<AggregateRow> {
        self.points
            .iter()
            .flat_map(|p| p.runs.iter().map(|r| AggregateRow::from_run("sweep", r.record.variant.name(), r)))
            .collect()
    }

    pub fn at(&self, lambda: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.lambda == lambda)
    }
}

/// One run per (λ, seed) on the base config.
pub fn sweep_lambda(
    base: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
    cache: &RunCache,
) -> Result<SweepResult, LabError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(crate::config::ConfigError::Invalid("sweep needs a nonempty λ grid and seed list".into()).into());
    }
    let cfgs: Vec<TrainConfig> = grid
        .iter()
        .flat_map(|&l| {
            seeds.iter().map(move |&s| {
                let mut c = base.clone();
                c.aux.lambda = l;
                c.seed = s;
                c
            })
        })
        .collect();
    let runs = cache.run_all(&cfgs)?;
    let points = grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| SweepPoint {
            lambda,
            runs: runs[i * seeds.len()..(i + 1) * seeds.len()].to_vec(),
        })
        .collect();
    Ok(SweepResult { points })
}

#[derive(Debug, Clone)]
pub struct EfficiencyCell {
    pub fraction: usize,
    pub half_compute: bool,
    pub ntp: Vec<Arc<TrainedRun>>,
    pub stp: Vec<Arc<TrainedRun>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionTest {
    pub fraction: usize,
    pub half_compute: bool,
    pub ntp_accuracy: (f64, f64),
    pub stp_accuracy: (f64, f64),
    /// One-tailed paired test of STP > NTP; `Err` when undefined.
    pub ttest: Result<TTest, String>,
}

#[derive(Debug, Clone)]
pub struct EfficiencyResult {
    pub cells: Vec<EfficiencyCell>,
}

pub const TTEST_HEADER: &str = "fraction,half_compute,ntp_mean,ntp_sd,stp_mean,stp_sd,t,df,p";

impl EfficiencyResult {
    pub fn tests(&self) -> Vec<FractionTest> {
        self.cells
            .iter()
            .map(|c| {
                let acc = |runs: &[Arc<TrainedRun>]| runs.iter().map(|r| r.record.eval.accuracy).collect::<Vec<_>>();
                let (a, b) = (acc(&c.stp), acc(&c.ntp));
                FractionTest {
                    fraction: c.fraction,
                    half_compute: c.half_compute,
                    ntp_accuracy: mean_sd(&b),
                    stp_accuracy: mean_sd(&a),
                    ttest: theory::paired_t_test_one_tailed(&a, &b).map_err(|e| e.to_string()),
                }
            })
            .collect()
    }

    pub fn aggregate_rows(&self) -> Vec<AggregateRow> {
        self.cells
            .iter()
            .flat_map(|c| {
                let ntp = c.ntp.iter().map(|r| AggregateRow::from_run("data_eff", "ntp", r));
                let stp = c.stp.iter().map(|r| AggregateRow::from_run("data_eff", r.record.variant.name(), r));
                ntp.chain(stp).collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn cell(&self, fraction: usize, half_compute: bool) -> Option<&EfficiencyCell> {
        self.cells
            .iter()
            .find(|c| c.fraction == fraction && c.half_compute == half_compute)
    }
}

pub fn write_ttests<W: Write>(mut w: W, tests: &[FractionTest]) -> io::Result<()> {
    writeln!(w, "{TTEST_HEADER}")?;
    for t in tests {
        let (tt, df, p) = match &t.ttest {
            Ok(r) => (r.t.to_string(), r.df.to_string(), r.p.to_string()),
            Err(_) => (String::new(), String::new(), String::new()),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{tt},{df},{p}",
            t.fraction, t.half_compute, t.ntp_accuracy.0, t.ntp_accuracy.1, t.stp_accuracy.0, t.stp_accuracy.1
        )?;
    }
    Ok(())
}

/// NTP-only (λ = 0) against NTP + aux (λ = `stp_lambda`) at each 1/n
/// fraction with n× epochs; with `half_compute`, fractions above 1 also get
/// an n/2×-epoch, 2×-lr arm.
pub fn data_efficiency_experiment(
    base: &TrainConfig,
    fractions: &[usize],
    seeds: &[u64],
    stp_lambda: f64,
    half_compute: bool,
    cache: &RunCache,
) -> Result<EfficiencyResult, LabError> {
    let mut layout: Vec<(usize, bool)> = fractions.iter().map(|&f| (f, false)).collect();
    if half_compute {
        layout.extend(fractions.iter().filter(|&&f| f > 1).map(|&f| (f, true)));
    }
    let mut cfgs = Vec::new();
    for &(fraction, half) in &layout {
        for lambda in [0.0, stp_lambda] {
            for &seed in seeds {
                let mut c = base.clone();
                c.fraction = fraction;
                c.half_compute = half;
                c.aux.lambda = lambda;
                c.seed = seed;
                cfgs.push(c);
            }
        }
    }
    let runs = cache.run_all(&cfgs)?;
    let k = seeds.len();
    let cells = layout
        .iter()
        .enumerate()
        .map(|(i, &(fraction, half_compute))| EfficiencyCell {
            fraction,
            half_compute,
            ntp: runs[2 * i * k..(2 * i + 1) * k].to_vec(),
            stp: runs[(2 * i + 1) * k..(2 * i + 2) * k].to_vec(),
        })
        .collect();
    Ok(EfficiencyResult { cells })
}

/// Writes each run's metrics and checkpoint plus `aggregate.csv` under
/// `root/experiment/`.
pub fn save_experiment(
    root: &Path,
    experiment: &str,
    runs: &[(String, bool, Arc<TrainedRun>)],
    aggregate: &[AggregateRow],
) -> Result<(), LabError> {
    for (label, half, run) in runs {
        train::save_run(run, &run_dir(root, experiment, label, run, *half))?;
    }
    let dir = root.join(experiment);
    fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let path = dir.join("aggregate.csv");
    let mut buf = Vec::new();
    write_aggregate(&mut buf, aggregate).map_err(io_err("formatting aggregate"))?;
    fs::write(&path, buf).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(())
}

/// Final-quarter plateau check on per-epoch means: next-token loss flat
/// (range below `ntp_range_max`) while the STP loss still falls by more
/// than `stp_drop_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P1Check {
    pub ntp_range: f64,
    pub stp_drop: f64,
    pub holds: bool,
}

pub fn p1_check(rows: &[MetricRow], ntp_range_max: f64, stp_drop_min: f64) -> P1Check {
    let start = rows.len() - rows.len().div_ceil(4);
    let mut epochs: Vec<(usize, f64, f64, usize)> = Vec::new();
    for r in &rows[start..] {
        match epochs.last_mut() {
            Some(e) if e.0 == r.epoch => {
                e.1 += r.loss_ntp;
                e.2 += r.loss_stp;
                e.3 += 1;
            }
            _ => epochs.push((r.epoch, r.loss_ntp, r.loss_stp, 1)),
        }
    }
    let ntp: Vec<f64> = epochs.iter().map(|e| e.1 / e.3 as f64).collect();
    let stp: Vec<f64> = epochs.iter().map(|e| e.2 / e.3 as f64).collect();
    let max = ntp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ntp.iter().copied().fold(f64::INFINITY, f64::min);
    let ntp_range = max - min;
    let stp_drop = stp.first().copied().unwrap_or(0.0) - stp.last().copied().unwrap_or(0.0);
    P1Check {
        ntp_range,
        stp_drop,
        holds: ntp_range < ntp_range_max && stp_drop > stp_drop_min,
    }
}

/// Mean ε̂(τ) over teacher-forced trajectories of the first `n` examples.
pub fn mean_linearity(params: &ModelParams, examples: &[ExamplePair], tau: usize, n: usize) -> Result<f64, LabError> {
    let chosen = &examples[..n.min(examples.len())];
    let trajs = train::trajectories(params, chosen)?;
    let mut sum = 0.0;
    for t in &trajs {
        sum += geometry::linearity_epsilon(&t.states, tau)?.epsilon_hat;
    }
    Ok(sum / trajs.len().max(1) as f64)
}

fn span_mean(states: &Tensor, from: usize, to: usize) -> Vec<f64> {
    let n = (to - from + 1) as f64;
    (0..states.cols())
        .map(|j| (from..=to).map(|i| states.get(i, j)).sum::<f64>() / n)
        .collect()
}

/// Per-sequence linearity, curvature and rollout divergence for the first
/// `sequences` examples, then dataset-level singular spectra of
/// (mean answer-span state − mean query-span state), raw and row-normalized.
pub fn diagnose(
    params: &ModelParams,
    examples: &[ExamplePair],
    tau: usize,
    sequences: usize,
) -> Result<Vec<DiagnosticRow>, LabError> {
    let mut rows = Vec::new();
    let chosen = &examples[..sequences.min(examples.len())];
    let trajs = train::trajectories(params, chosen)?;
    for (i, (e, t)) in chosen.iter().zip(&trajs).enumerate() {
        let id = i.to_string();
        let lin = geometry::linearity_epsilon(&t.states, tau)?;
        rows.push(DiagnosticRow::new(&id, "linearity_epsilon", None, lin.epsilon_hat));
        for (k, a) in geometry::curvature_profile(&t.states).into_iter().enumerate() {
            rows.push(DiagnosticRow::new(&id, "curvature", Some(k + 1), a));
        }
        let prompt = e.prompt();
        for (k, d) in geometry::rollout_divergence(params, &prompt, &e.target())?.into_iter().enumerate() {
            rows.push(DiagnosticRow::new(&id, "rollout_divergence", Some(prompt.len() + k), d));
        }
    }
    let all = train::trajectories(params, examples)?;
    let diffs: Vec<Vec<f64>> = examples
        .iter()
        .zip(&all)
        .map(|(e, t)| {
            let m = e.marks();
            let q = span_mean(&t.states, m.query_start, m.query_end);
            let a = span_mean(&t.states, m.answer_start, m.answer_end - 1);
            a.iter().zip(&q).map(|(x, y)| x - y).collect()
        })
        .collect();
    if !diffs.is_empty() {
        let mat = Tensor::from_rows(&diffs)?;
        for (metric, normalize) in [("svd_unnormalized", false), ("svd_normalized", true)] {
            for (k, s) in geometry::svd_spectrum(&mat, normalize)?.into_iter().enumerate() {
                rows.push(DiagnosticRow::new("dataset", metric, Some(k), s));
            }
        }
    }
    Ok(rows)
}
