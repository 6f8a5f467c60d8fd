//! Command-line entry point.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use stp_core::data;
use stp_core::geometry;
use stp_core::theory::{self, TheoryQuery};
use stp_core::transformer;

use crate::config::{apply_overrides, parse_config, TrainConfig};
use crate::experiments::{self, RunCache};
use crate::train::{self, io_err, LabError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "stp", about = "Semantic tube prediction: training, experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run and write metrics.csv and model.stpc
    Train(ConfigArgs),
    /// Exact-match accuracy of a checkpoint on the configured test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One run per (λ, seed) over the configured `lambdas` and `seeds`
    Sweep(ConfigArgs),
    /// NTP vs NTP+aux over the configured `fractions` and `seeds`
    DataEff(ConfigArgs),
    /// Geometry diagnostics CSV for a checkpoint
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Capacity, sample and Fano bounds over a query grid
    Theory {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 4.0)]
        h_y: f64,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,3,7,15")]
        snr: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        m: Vec<f64>,
        #[arg(long, default_value_t = 17)]
        vocab: usize,
        /// Also write the table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One-tailed paired t-test of a > b
    Ttest {
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        b: Vec<f64>,
    },
    /// Write the configured dataset as train.tsv and test.tsv
    GenData(ConfigArgs),
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn load(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => parse_config(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &args.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &TrainConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("stp_out"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(args) => {
            let cfg = load(&args)?;
            let dir = out_dir(&cfg);
            let run = train::train_run(&TrainConfig { output_dir: None, ..cfg })?;
            train::save_run(&run, &dir)?;
            let r = &run.record;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "variant={} lambda={} seed={} steps={} final_ntp={:.5} final_stp={:.5} accuracy={:.4} acc_star={} acc_starstar={} wall={:.1}s",
                r.variant,
                r.lambda,
                r.seed,
                r.rows.len(),
                r.final_ntp,
                r.final_stp,
                r.eval.accuracy,
                fmt_opt(r.eval.acc_star),
                fmt_opt(r.eval.acc_starstar),
                r.wall_time.as_secs_f64()
            );
            println!("wrote {}", dir.display());
        }
        Command::Eval { cfg, checkpoint } => {
            let cfg = load(&cfg)?;
            let params = transformer::load_checkpoint(&checkpoint).map_err(LabError::from)?;
            let split = train::build_dataset(&TrainConfig { model: params.config.clone(), ..cfg })?;
            let e = train::evaluate_exact_match(&params, &split.test)?;
            println!(
                "n={} accuracy={:.4} acc_star={} (n={}) acc_starstar={} (n={})",
                e.n,
                e.accuracy,
                fmt_opt(e.acc_star),
                e.n_star,
                fmt_opt(e.acc_starstar),
                e.n_starstar
            );
        }
        Command::Sweep(args) => {
            let cfg = load(&args)?;
            let cache = RunCache::new();
            let res = experiments::sweep_lambda(&cfg, &cfg.lambdas, &cfg.seeds, &cache)?;
            let runs: Vec<_> = res
                .points
                .iter()
                .flat_map(|p| p.runs.iter().map(|r| (r.record.variant.name().to_string(), false, r.clone())))
                .collect();
            experiments::save_experiment(&out_dir(&cfg), "sweep", &runs, &res.aggregate_rows())?;
            println!("lambda   final_stp(mean±sd)   final_ntp(mean±sd)   accuracy(mean±sd)");
            for s in res.summaries() {
                println!(
                    "{:<8} {:.4} ± {:.4}      {:.4} ± {:.4}      {:.4} ± {:.4}",
                    s.lambda, s.final_stp.0, s.final_stp.1, s.final_ntp.0, s.final_ntp.1, s.accuracy.0, s.accuracy.1
                );
            }
        }
        Command::DataEff(args) => {
            let cfg = load(&args)?;
            let cache = RunCache::new();
            let base = TrainConfig { half_compute: false, ..cfg.clone() };
            let res = experiments::data_efficiency_experiment(
                &base,
                &cfg.fractions,
                &cfg.seeds,
                cfg.aux.lambda,
                cfg.half_compute,
                &cache,
            )?;
            let runs: Vec<_> = res
                .cells
                .iter()
                .flat_map(|c| {
                    let ntp = c.ntp.iter().map(|r| ("ntp".to_string(), c.half_compute, r.clone()));
                    let stp = c
                        .stp
                        .iter()
                        .map(|r| (r.record.variant.name().to_string(), c.half_compute, r.clone()));
                    ntp.chain(stp).collect::<Vec<_>>()
                })
                .collect();
            let dir = out_dir(&cfg);
            experiments::save_experiment(&dir, "data_eff", &runs, &res.aggregate_rows())?;
            let tests = res.tests();
            let mut buf = Vec::new();
            experiments::write_ttests(&mut buf, &tests).map_err(io_err("formatting t-tests"))?;
            write_file(&dir.join("data_eff").join("ttests.csv"), &buf)?;
            println!("fraction  half  ntp(mean±sd)       stp(mean±sd)       t        p");
            for t in &tests {
                let (tt, p) = match &t.ttest {
                    Ok(r) => (format!("{:.4}", r.t), format!("{:.4}", r.p)),
                    Err(e) => ("-".into(), e.clone()),
                };
                println!(
                    "1/{:<7} {:<5} {:.4} ± {:.4}    {:.4} ± {:.4}    {tt:<8} {p}",
                    t.fraction, t.half_compute, t.ntp_accuracy.0, t.ntp_accuracy.1, t.stp_accuracy.0, t.stp_accuracy.1
                );
            }
        }
        Command::Diagnose { cfg, checkpoint } => {
            let cfg = load(&cfg)?;
            let params = transformer::load_checkpoint(&checkpoint).map_err(LabError::from)?;
            let split = train::build_dataset(&TrainConfig { model: params.config.clone(), ..cfg.clone() })?;
            let rows = experiments::diagnose(&params, &split.test, cfg.tau, cfg.diag_sequences)?;
            let mut buf = Vec::new();
            geometry::write_diagnostics(&mut buf, &rows).map_err(io_err("formatting diagnostics"))?;
            match &cfg.output_dir {
                Some(dir) => {
                    let path = dir.join("diagnostics.csv");
                    write_file(&path, &buf)?;
                    println!("wrote {}", path.display());
                }
                None => io::stdout().write_all(&buf).map_err(io_err("writing stdout"))?,
            }
        }
        Command::Theory { cfg, h_y, epsilon, snr, m, vocab, csv } => {
            let cfg = load(&cfg)?;
            let mut table = String::from("h_y,epsilon,snr,m,vocab,capacity,min_samples,conditional_entropy,fano\n");
            println!("snr      m      capacity  min_samples  H(Y|X)    fano");
            for &s in &snr {
                for &mm in &m {
                    let q = TheoryQuery { h_y, epsilon, snr: s, m: mm, vocab_size: vocab };
                    let r = q.evaluate(cfg.fano_denominator).map_err(|e| Failure::Usage(e.to_string()))?;
                    println!(
                        "{:<8} {:<6} {:<9.4} {:<12.4} {:<9.4} {:.4}",
                        s, mm, r.capacity, r.min_samples, r.conditional_entropy, r.fano
                    );
                    table.push_str(&format!(
                        "{h_y},{epsilon},{s},{mm},{vocab},{},{},{},{}\n",
                        r.capacity, r.min_samples, r.conditional_entropy, r.fano
                    ));
                }
            }
            if let Some(path) = csv {
                write_file(&path, table.as_bytes())?;
            }
        }
        Command::Ttest { a, b } => {
            let r = theory::paired_t_test_one_tailed(&a, &b).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("t={:.6} df={} p={:.6}", r.t, r.df, r.p);
        }
        Command::GenData(args) => {
            let cfg = load(&args)?;
            let split = train::build_dataset(&cfg)?;
            let dir = out_dir(&cfg);
            for (name, set) in [("train.tsv", &split.train), ("test.tsv", &split.test)] {
                let mut buf = Vec::new();
                data::write_examples(&mut buf, set).map_err(io_err("formatting examples"))?;
                write_file(&dir.join(name), &buf)?;
            }
            println!("wrote {} train / {} test examples to {}", split.train.len(), split.test.len(), dir.display());
        }
    }
    Ok(())
}
