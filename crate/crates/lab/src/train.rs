//! The training loop, exact-match evaluation and per-run CSV output.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use thiserror::Error;

use stp_core::data::{self, DataError, DatasetSplit, ExamplePair, SuffixClass};
use stp_core::geometry::GeometryError;
use stp_core::losses::{self, AuxInputs, AuxLossSpec, AuxVariant, IndexTriple, LossError, NtpRows, TrajRef};
use stp_core::rng::{self, Stream};
use stp_core::theory::TheoryError;
use stp_core::transformer::{self, HiddenTrajectory, ModelError, ModelParams, TokenId};
use stp_core::{Graph, Tensor, TensorError, Var};

use crate::config::{ConfigError, TaskSpec, TrainConfig, MAX_STEP_MULTIPLIER};
use crate::optim::Adam;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("training diverged at step {step}: loss = {value}")]
    Diverged { step: usize, value: f64 },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

pub fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> LabError {
    let context = context.into();
    move |source| LabError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub loss_ntp: f64,
    /// STP cosine loss of this step's triples, logged whatever the variant or λ.
    pub loss_stp: f64,
    pub lambda: f64,
    pub lr: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "step,epoch,loss_ntp,loss_stp,lambda,lr,seed";

pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricRow]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.loss_ntp, r.loss_stp, r.lambda, r.lr, r.seed
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalResult {
    pub accuracy: f64,
    pub acc_star: Option<f64>,
    pub acc_starstar: Option<f64>,
    pub n: usize,
    pub n_star: usize,
    pub n_starstar: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: AuxVariant,
    pub lambda: f64,
    pub fraction: usize,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub eval: EvalResult,
    /// Mean next-token loss over the run's training split after training.
    pub final_ntp: f64,
    /// Mean STP loss over the run's training split after training.
    pub final_stp: f64,
    pub steps_per_epoch: usize,
    pub warnings: Vec<String>,
    pub wall_time: Duration,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &self.rows).expect("writing to a Vec");
        buf
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub params: ModelParams,
    pub projector: Option<Tensor>,
    /// Training subset and test split the run used.
    pub split: DatasetSplit,
}

pub fn build_dataset(cfg: &TrainConfig) -> Result<DatasetSplit, LabError> {
    let split = match &cfg.task {
        TaskSpec::Pattern(p) => data::generate_pattern_task(cfg.data_seed, p)?,
        TaskSpec::Copy(c) => data::generate_copy_task(cfg.data_seed, c)?,
    };
    split.check_capacity(cfg.model.max_seq_len)?;
    if let Some(&id) = split
        .train
        .iter()
        .chain(&split.test)
        .flat_map(|e| e.query.iter().chain(&e.answer))
        .find(|&&t| t as usize >= cfg.model.vocab_size)
    {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: cfg.model.vocab_size,
        }
        .into());
    }
    Ok(split)
}

pub fn aux_spec(cfg: &TrainConfig) -> Result<AuxLossSpec, LabError> {
    let mut spec = AuxLossSpec::new(cfg.aux.variant, cfg.aux.lambda, cfg.model.d_model, cfg.seed)?;
    spec.warmup_steps = cfg.aux.warmup_steps;
    spec.pred_target = cfg.aux.pred_target;
    spec.strategy = cfg.aux.strategy;
    Ok(spec)
}

fn next_token_targets(seq: &[TokenId]) -> Vec<TokenId> {
    seq[1..].iter().copied().chain([data::vocab::PAD]).collect()
}

fn draw_triple(
    seed: u64,
    stream: Stream,
    index: u64,
    example: &ExamplePair,
    spec: &AuxLossSpec,
) -> Result<IndexTriple, LabError> {
    let mut r = rng::stream(seed, stream, index);
    Ok(losses::sample_triple(&mut r, example.len(), spec.strategy(), Some(&example.marks()))?)
}

fn stp_value(hidden: &Tensor, offset: usize, len: usize, triple: &IndexTriple) -> Result<f64, LabError> {
    let traj = HiddenTrajectory {
        states: hidden.slice_rows(offset, len),
        tokens: Vec::new(),
    };
    Ok(losses::stp_loss(&traj, triple)?)
}

struct BatchLoss {
    total: Var,
    ntp: Var,
    stp_mean: f64,
}

/// Builds the loss graph for one batch. The auxiliary term enters the graph
/// only when `lambda_now > 0`.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    g: &mut Graph,
    params: &ModelParams,
    pv: &transformer::ParamVars,
    projector: Option<Var>,
    spec: &AuxLossSpec,
    examples: &[&ExamplePair],
    triples: &[IndexTriple],
    lambda_now: f64,
) -> Result<BatchLoss, LabError> {
    let seqs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.sequence()).collect();
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let fw = transformer::forward_graph(g, &params.config, pv, &refs)?;
    let targets: Vec<Vec<TokenId>> = seqs.iter().map(|s| next_token_targets(s)).collect();
    let masks: Vec<Vec<bool>> = examples.iter().map(|e| e.loss_mask()).collect();
    let rows: Vec<NtpRows> = (0..seqs.len())
        .map(|b| NtpRows {
            offset: fw.offset(b),
            targets: &targets[b],
            mask: &masks[b],
        })
        .collect();
    let ntp = losses::ntp_loss_var(g, fw.logits, &rows)?;

    let hidden = g.value(fw.hidden).clone();
    let mut stp_sum = 0.0;
    for (b, t) in triples.iter().enumerate() {
        stp_sum += stp_value(&hidden, fw.offset(b), seqs[b].len(), t)?;
    }
    let stp_mean = stp_sum / triples.len() as f64;

    let aux = if lambda_now > 0.0 && spec.variant != AuxVariant::None {
        let masked = if spec.variant.uses_masked_pass() {
            let mseqs: Vec<Vec<TokenId>> = seqs
                .iter()
                .zip(triples)
                .map(|(s, t)| losses::mask_span(s, t.s, t.r, spec.mask_token))
                .collect();
            let mrefs: Vec<&[TokenId]> = mseqs.iter().map(Vec::as_slice).collect();
            Some(transformer::forward_graph(g, &params.config, pv, &mrefs)?)
        } else {
            None
        };
        let mut terms = Vec::with_capacity(seqs.len());
        for (b, t) in triples.iter().enumerate() {
            let len = seqs[b].len();
            let inputs = AuxInputs {
                traj: TrajRef {
                    hidden: fw.hidden,
                    offset: fw.offset(b),
                    len,
                },
                triple: *t,
                masked: masked.as_ref().map(|m| TrajRef {
                    hidden: m.hidden,
                    offset: m.offset(b),
                    len,
                }),
                projector,
            };
            if let Some(v) = losses::aux_loss_var(g, spec, &inputs)? {
                terms.push(v);
            }
        }
        let stacked = g.concat_rows(&terms)?;
        Some(g.mean(stacked)?)
    } else {
        None
    };
    let total = losses::combined_loss_var(g, ntp, aux, lambda_now)?;
    Ok(BatchLoss { total, ntp, stp_mean })
}

/// Trains one model from scratch. Deterministic in the config.
pub fn train_run(cfg: &TrainConfig) -> Result<TrainedRun, LabError> {
    cfg.validate()?;
    let started = Instant::now();
    let full = build_dataset(cfg)?;
    let plan = data::subset_fraction(&full, cfg.fraction, cfg.seed, cfg.half_compute)?;
    let train = &plan.split.train;
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let epochs = ((cfg.epochs as f64 * plan.epoch_scale).round() as usize).max(1);
    let base_steps = full.train.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut total_steps = epochs * steps_per_epoch;
    let mut warnings = Vec::new();
    if total_steps > MAX_STEP_MULTIPLIER * base_steps {
        warnings.push(format!(
            "{total_steps} steps exceed {MAX_STEP_MULTIPLIER}× the base budget; capped at {}",
            MAX_STEP_MULTIPLIER * base_steps
        ));
        total_steps = MAX_STEP_MULTIPLIER * base_steps;
    }
    let lr = cfg.adam.lr * plan.lr_scale;

    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut spec = aux_spec(cfg)?;
    let mut adam = Adam::new(
        cfg.adam,
        params
            .tensors()
            .iter()
            .map(|t| t.numel())
            .chain(spec.projector.iter().map(Tensor::numel)),
    );

    let mut rows = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut seq_counter = 0u64;
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Stream::DataOrder, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            let lambda_now = losses::lambda_at(&spec, step, total_steps);
            let examples: Vec<&ExamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let triples = examples
                .iter()
                .map(|e| {
                    let t = draw_triple(cfg.seed, Stream::Triples, seq_counter, e, &spec);
                    seq_counter += 1;
                    t
                })
                .collect::<Result<Vec<_>, _>>()?;

            let mut g = Graph::new();
            let pv = params.attach(&mut g, true);
            let proj = spec.projector.as_ref().map(|p| g.param(p.clone()));
            let loss = batch_loss(&mut g, &params, &pv, proj, &spec, &examples, &triples, lambda_now)?;
            let loss_ntp = g.value(loss.ntp).item();
            let total = g.value(loss.total).item();
            if !total.is_finite() || !loss_ntp.is_finite() {
                return Err(LabError::Diverged {
                    step,
                    value: if total.is_finite() { loss_ntp } else { total },
                });
            }
            g.backward(loss.total)?;
            let grads: Vec<Option<Tensor>> = pv
                .iter()
                .map(|&v| g.grad(v))
                .chain(proj.map(|v| g.grad(v)))
                .collect();
            let mut targets: Vec<&mut Tensor> = params.weights.iter_mut().collect();
            if let Some(p) = spec.projector.as_mut() {
                targets.push(p);
            }
            adam.update(&mut targets, &grads, lr);

            rows.push(MetricRow {
                step,
                epoch,
                loss_ntp,
                loss_stp: loss.stp_mean,
                lambda: lambda_now,
                lr,
                seed: cfg.seed,
            });
            step += 1;
        }
    }
    if !params.is_finite() {
        return Err(LabError::Diverged {
            step,
            value: f64::NAN,
        });
    }

    let (final_ntp, final_stp) = evaluate_losses(&params, &spec, train, cfg.seed)?;
    let eval = evaluate_exact_match(&params, &plan.split.test)?;
    let record = RunRecord {
        variant: cfg.aux.variant,
        lambda: cfg.aux.lambda,
        fraction: cfg.fraction,
        seed: cfg.seed,
        rows,
        eval,
        final_ntp,
        final_stp,
        steps_per_epoch,
        warnings,
        wall_time: started.elapsed(),
    };
    let run = TrainedRun {
        record,
        params,
        projector: spec.projector,
        split: plan.split,
    };
    if let Some(dir) = &cfg.output_dir {
        save_run(&run, dir)?;
    }
    Ok(run)
}

/// Writes `metrics.csv` and `model.stpc` into `dir`.
pub fn save_run(run: &TrainedRun, dir: &Path) -> Result<(), LabError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, run.record.metrics_csv()).map_err(io_err(format!("writing {}", metrics.display())))?;
    transformer::save_checkpoint(&run.params, &dir.join("model.stpc"))?;
    Ok(())
}

/// Mean NTP and STP loss over `examples`, triples from the evaluation stream.
pub fn evaluate_losses(
    params: &ModelParams,
    spec: &AuxLossSpec,
    examples: &[ExamplePair],
    seed: u64,
) -> Result<(f64, f64), LabError> {
    let mut ntp_sum = 0.0;
    let mut stp_sum = 0.0;
    for (c, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&ExamplePair> = chunk.iter().collect();
        let triples = refs
            .iter()
            .enumerate()
            .map(|(i, e)| draw_triple(seed, Stream::EvalTriples, (c * EVAL_BATCH + i) as u64, e, spec))
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let pv = params.attach(&mut g, false);
        let loss = batch_loss(&mut g, params, &pv, None, &AuxLossSpec::none(), &refs, &triples, 0.0)?;
        ntp_sum += g.value(loss.ntp).item() * chunk.len() as f64;
        stp_sum += loss.stp_mean * chunk.len() as f64;
    }
    let n = examples.len().max(1) as f64;
    Ok((ntp_sum / n, stp_sum / n))
}

/// Greedy exact match of answer ⊕ EOS from BOS ⊕ query ⊕ SEP, overall and
/// per suffix class.
pub fn evaluate_exact_match(params: &ModelParams, test: &[ExamplePair]) -> Result<EvalResult, LabError> {
    let mut r = EvalResult {
        n: test.len(),
        ..Default::default()
    };
    let (mut hits, mut hits_star, mut hits_starstar) = (0usize, 0usize, 0usize);
    for chunk in test.chunks(EVAL_BATCH) {
        let prompts: Vec<Vec<TokenId>> = chunk.iter().map(ExamplePair::prompt).collect();
        let refs: Vec<&[TokenId]> = prompts.iter().map(Vec::as_slice).collect();
        let max_new = chunk.iter().map(|e| e.target().len()).max().unwrap_or(0);
        let outs = transformer::greedy_decode_many(params, &refs, max_new)?;
        for ((e, p), out) in chunk.iter().zip(&prompts).zip(&outs) {
            let ok = out[p.len()..] == e.target()[..];
            hits += ok as usize;
            match e.suffix {
                SuffixClass::Star => {
                    r.n_star += 1;
                    hits_star += ok as usize;
                }
                SuffixClass::StarStar => {
                    r.n_starstar += 1;
                    hits_starstar += ok as usize;
                }
                SuffixClass::None => {}
            }
        }
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    r.accuracy = frac(hits, r.n).unwrap_or(0.0);
    r.acc_star = frac(hits_star, r.n_star);
    r.acc_starstar = frac(hits_starstar, r.n_starstar);
    Ok(r)
}

/// Teacher-forced trajectories of whole sequences.
pub fn trajectories(params: &ModelParams, examples: &[ExamplePair]) -> Result<Vec<HiddenTrajectory>, LabError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let seqs: Vec<Vec<TokenId>> = chunk.iter().map(ExamplePair::sequence).collect();
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        out.extend(transformer::forward_many(params, &refs)?);
    }
    Ok(out)
}
