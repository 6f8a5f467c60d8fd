//! Acceptance suite: one PASS/FAIL line per criterion. Criteria 9–12 are
//! training-experiment outcomes sharing one set of runs; their failures are
//! reported but only a failed deterministic criterion makes the exit status
//! non-zero.

use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use stp_core::geometry::{self, svd_spectrum};
use stp_core::losses::{self, AuxInputs, AuxLossSpec, AuxVariant, IndexTriple, TrajRef, TripleStrategy};
use stp_core::rng::{self, Stream};
use stp_core::tensor::finite_difference_check_many;
use stp_core::theory::{self, FanoDenominator};
use stp_core::transformer::HiddenTrajectory;
use stp_core::{Graph, Tensor, TensorError, Var};

use stp_lab::config::DEFAULT_SEEDS;
use stp_lab::experiments::{self, mean_sd, RunCache};
use stp_lab::train;
use stp_lab::TrainConfig;

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 10;
const PRIMITIVE_STEP: f64 = 1e-5;
const LOSS_STEP: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-9;
const INVARIANCE_TOL: f64 = 1e-10;
const STRAIGHTENING_SAMPLES: usize = 10_000;
const STRAIGHTENING_MAX_EPS: f64 = 1e-2;
const BROWNIAN_BAND: (f64, f64) = (0.45, 0.55);
const SVD_TOL: f64 = 1e-8;
const TTEST_TOL: f64 = 1e-3;
const LAMBDA_GRID: [f64; 4] = [0.0, 0.005, 0.02, 0.08];
const STP_LAMBDA: f64 = 0.02;
const MIN_STP_GAP: f64 = 0.3;
const MIN_SEEDS_AGREEING: usize = 4;
const LINEARITY_TAU: usize = 8;
const LINEARITY_SEQUENCES: usize = 50;
const HALF_FRACTION: usize = 2;
const EXPERIMENTAL: [usize; 4] = [9, 10, 11, 12];

#[derive(Default)]
struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String, took: Duration) {
        if !pass {
            self.failed.push(id);
        }
        println!(
            "[{}] {id:>2}. {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn uniform(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = rng::stream(seed, Stream::Simulation, 7);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn gaussian_vec(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn weigh(g: &mut Graph, y: Var) -> Result<Var, TensorError> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.3).collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let p = g.mul(y, w)?;
    g.sum(p)
}

type GradFn = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;
type Case = (&'static str, Vec<(usize, usize)>, GradFn);
type Criterion = (usize, &'static str, fn() -> (bool, String), f64);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![(3, 4), (4, 5)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weigh(g, y)
        }),
        ("add", vec![(3, 4), (3, 4)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weigh(g, y)
        }),
        ("sub", vec![(3, 4), (3, 4)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weigh(g, y)
        }),
        ("mul", vec![(3, 4), (3, 4)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weigh(g, y)
        }),
        ("scalar_mul", vec![(2, 3)], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weigh(g, y)
        }),
        ("add_row", vec![(4, 3), (1, 3)], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weigh(g, y)
        }),
        ("row_softmax", vec![(3, 5)], |g, v| {
            let y = g.softmax(v[0])?;
            weigh(g, y)
        }),
        ("layer_norm", vec![(3, 6), (1, 6), (1, 6)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weigh(g, y)
        }),
        ("gelu", vec![(3, 5)], |g, v| {
            let y = g.gelu(v[0])?;
            weigh(g, y)
        }),
        ("embed_lookup", vec![(6, 4)], |g, v| {
            let y = g.embed(v[0], vec![1, 3, 1, 5])?;
            weigh(g, y)
        }),
        ("transpose", vec![(3, 4)], |g, v| {
            let y = g.transpose(v[0])?;
            weigh(g, y)
        }),
        ("sum", vec![(3, 4)], |g, v| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        }),
        ("mean", vec![(3, 4)], |g, v| {
            let m = g.mean(v[0])?;
            g.mul(m, m)
        }),
        ("dot", vec![(1, 6), (1, 6)], |g, v| g.dot(v[0], v[1])),
        ("l2_norm", vec![(1, 6)], |g, v| g.l2_norm(v[0])),
        ("concat_rows", vec![(2, 4), (3, 4)], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            weigh(g, y)
        }),
        ("slice_rows", vec![(5, 4)], |g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            weigh(g, y)
        }),
        ("cosine", vec![(1, 6), (1, 6)], |g, v| g.cosine(v[0], v[1])),
        ("acos", vec![(2, 3)], |g, v| {
            let h = g.scale(v[0], 0.9)?;
            let y = g.acos(h)?;
            weigh(g, y)
        }),
        ("cross_entropy", vec![(4, 5)], |g, v| {
            g.cross_entropy(v[0], vec![0, 4, 2, 1], vec![0.25, 0.5, 0.0, 0.25])
        }),
        ("causal_attention", vec![(8, 4), (8, 4), (8, 4)], |g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], 2, 4, 2)?;
            weigh(g, y)
        }),
    ]
}

fn criterion_gradients() -> (bool, String) {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checks = 0;
    for (name, shapes, f) in primitive_cases() {
        for seed in 0..GRAD_INSTANCES {
            let params: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| uniform(seed * 31 + i as u64, r, c))
                .collect();
            let err = finite_difference_check_many(f, &params, PRIMITIVE_STEP).unwrap_or(f64::INFINITY);
            checks += 1;
            if err.is_nan() || err > worst.0 {
                worst = (err, name.to_string());
            }
        }
    }
    for variant in AuxVariant::ALL.into_iter().filter(|&v| v != AuxVariant::None) {
        for seed in 0..GRAD_INSTANCES {
            let mut rng = rng::stream(seed, Stream::Simulation, 11);
            let (len, d) = (8, 16);
            let h = Tensor::matrix(len, d, gaussian_vec(&mut rng, len * d)).unwrap();
            let masked = Tensor::matrix(len, d, gaussian_vec(&mut rng, len * d)).unwrap();
            let strategy = if variant.strategy() == TripleStrategy::Zero { TripleStrategy::Zero } else { TripleStrategy::Random };
            let tri = losses::sample_triple(&mut rng, len, strategy, None).unwrap();
            let spec = AuxLossSpec::new(variant, 0.5, d, seed).unwrap();
            let mut params = vec![h, masked];
            params.extend(spec.projector.clone());
            let err = finite_difference_check_many(
                |g: &mut Graph, v| {
                    let inputs = AuxInputs {
                        traj: TrajRef::whole(g, v[0]),
                        triple: tri,
                        masked: Some(TrajRef::whole(g, v[1])),
                        projector: v.get(2).copied(),
                    };
                    losses::aux_loss_var(g, &spec, &inputs)
                        .map_err(|e| TensorError::Invalid(e.to_string()))?
                        .ok_or_else(|| TensorError::Invalid("no loss".into()))
                },
                &params,
                LOSS_STEP,
            )
            .unwrap_or(f64::INFINITY);
            checks += 1;
            if err.is_nan() || err > worst.0 {
                worst = (err, variant.name().to_string());
            }
        }
    }
    (
        worst.0 < GRAD_TOL,
        format!("{checks} checks, max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn traj(rows: Vec<Vec<f64>>) -> HiddenTrajectory {
    let n = rows.len();
    HiddenTrajectory { states: Tensor::from_rows(&rows).unwrap(), tokens: vec![0; n] }
}

fn criterion_stp_identities() -> (bool, String) {
    let tri = IndexTriple::new(0, 1, 2);
    let cases = [
        (vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, 3.0]], 0.0),
        (vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 2.0]], 1.0),
        (vec![vec![0.0, 0.0], vec![2.0, 1.0], vec![0.0, 0.0]], 2.0),
    ];
    let mut worst_id: f64 = 0.0;
    for (rows, want) in cases {
        let got = losses::stp_loss(&traj(rows), &tri).unwrap();
        worst_id = worst_id.max((got - want).abs());
    }
    let mut worst_inv: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = rng::stream(seed, Stream::Simulation, 13);
        let (len, d) = (rng.gen_range(3..=8), rng.gen_range(2..=16));
        let rows: Vec<Vec<f64>> = (0..len).map(|_| gaussian_vec(&mut rng, d)).collect();
        let shift = gaussian_vec(&mut rng, d);
        let scale = rng.gen_range(0.1..10.0);
        let t = losses::sample_triple(&mut rng, len, TripleStrategy::Random, None).unwrap();
        let base = losses::stp_loss(&traj(rows.clone()), &t).unwrap();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|a| a * scale).collect()).collect();
        worst_inv = worst_inv
            .max((losses::stp_loss(&traj(moved), &t).unwrap() - base).abs())
            .max((losses::stp_loss(&traj(scaled), &t).unwrap() - base).abs());
    }
    (
        worst_id < IDENTITY_TOL && worst_inv < INVARIANCE_TOL,
        format!("identity error {worst_id:.1e}, invariance error {worst_inv:.1e} over 100 trajectories"),
    )
}

fn criterion_straightening() -> (bool, String) {
    let mut rng = rng::stream(82, Stream::Simulation, 17);
    let (mut accepted, mut proposed, mut violations) = (0usize, 0usize, 0usize);
    let mut worst_ratio: f64 = 0.0;
    while accepted < STRAIGHTENING_SAMPLES {
        proposed += 1;
        let d = rng.gen_range(2..=16);
        let eps = 10f64.powf(rng.gen_range(-6.0..=STRAIGHTENING_MAX_EPS.log10()));
        let h_s = gaussian_vec(&mut rng, d);
        let u = gaussian_vec(&mut rng, d);
        let w = gaussian_vec(&mut rng, d);
        let wobble = 10f64.powf(rng.gen_range(-4.0..0.0));
        let len = rng.gen_range(0.1..10.0);
        let h_r: Vec<f64> = h_s.iter().zip(&u).map(|(a, b)| a + b).collect();
        let h_t: Vec<f64> = (0..d).map(|i| h_r[i] + len * (u[i] + wobble * w[i])).collect();
        match geometry::straightening_check(&h_s, &h_r, &h_t, &h_s, &h_t, eps) {
            Ok(c) => {
                accepted += 1;
                violations += (!c.holds) as usize;
                if c.rhs > 0.0 {
                    worst_ratio = worst_ratio.max(c.lhs / c.rhs);
                }
            }
            Err(_) => continue,
        }
    }
    (
        violations == 0,
        format!("{violations} violations in {accepted} accepted of {proposed} proposed; max lhs/rhs {worst_ratio:.3}"),
    )
}

fn criterion_lift_identity() -> (bool, String) {
    let mut all = true;
    let mut checks = 0;
    for seed in 0..100 {
        let mut rng = rng::stream(seed, Stream::Simulation, 19);
        let (n, d) = (rng.gen_range(2..=12), rng.gen_range(1..=16));
        let x = Tensor::matrix(n, d, gaussian_vec(&mut rng, n * d)).unwrap();
        for t in 0..n - 1 {
            all &= theory::lift_identity_check(&x, t).unwrap();
            checks += 1;
        }
    }
    (all, format!("{checks} (matrix, t) checks exact"))
}

fn criterion_theory_arithmetic() -> (bool, String) {
    let cap = theory::gaussian_capacity(3.0).unwrap();
    let ms = theory::min_samples(4.0, 0.0, 3.0).unwrap();
    let fano = theory::fano_error_lower_bound(4.0, 2.0, 3.0, 17, FanoDenominator::VocabMinusOne).unwrap();
    let exact = cap == 1.0 && ms == 4.0 && fano == 0.5;
    let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
    let mut monotone = true;
    for &snr in &grid {
        let by_m: Vec<f64> = grid
            .iter()
            .map(|&m| theory::fano_error_lower_bound(6.0, m, snr, 17, FanoDenominator::VocabMinusOne).unwrap())
            .collect();
        monotone &= by_m.windows(2).all(|w| w[1] <= w[0]);
    }
    for &m in &grid {
        let by_snr: Vec<f64> = grid
            .iter()
            .map(|&s| theory::fano_error_lower_bound(6.0, m, s, 17, FanoDenominator::VocabMinusOne).unwrap())
            .collect();
        monotone &= by_snr.windows(2).all(|w| w[1] <= w[0]);
    }
    let caps: Vec<f64> = grid.iter().map(|&s| theory::gaussian_capacity(s).unwrap()).collect();
    monotone &= caps.windows(2).all(|w| w[1] > w[0]);
    let inverse = grid[1..].iter().all(|&s| {
        let c = theory::gaussian_capacity(s).unwrap();
        ((theory::min_samples(5.0, 1.0, s).unwrap() * c) - 4.0).abs() < 1e-12
    });
    (
        exact && monotone && inverse,
        format!(
            "capacity(3) = {cap}, min_samples(4,0,3) = {ms}, fano(4,2,3,17) = {fano}; monotone {monotone}; inverse {inverse}"
        ),
    )
}

fn criterion_brownian() -> (bool, String) {
    let r = theory::brownian_growth_sim(16, 1.0, 1024, 1000, 82).unwrap();
    let e = r.exponent.unwrap_or(f64::NAN);
    (
        (BROWNIAN_BAND.0..=BROWNIAN_BAND.1).contains(&e),
        format!("fitted exponent {e:.4} (band {:?})", BROWNIAN_BAND),
    )
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (apk, aqk) = (*x, *y);
                    *x = c * apk - s * aqk;
                    *y = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn criterion_svd() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = rng::stream(seed, Stream::Simulation, 23);
        let (r, c) = (rng.gen_range(1..=32), rng.gen_range(1..=16));
        let m = Tensor::matrix(r, c, gaussian_vec(&mut rng, r * c)).unwrap();
        let got = svd_spectrum(&m, false).unwrap();
        let k = r.min(c);
        let gram: Vec<Vec<f64>> = if c <= r {
            (0..c).map(|i| (0..c).map(|j| (0..r).map(|l| m.get(l, i) * m.get(l, j)).sum()).collect()).collect()
        } else {
            (0..r).map(|i| (0..r).map(|j| (0..c).map(|l| m.get(i, l) * m.get(j, l)).sum()).collect()).collect()
        };
        let want: Vec<f64> = symmetric_eigenvalues(gram).into_iter().take(k).map(|e| e.max(0.0).sqrt()).collect();
        if got.len() != want.len() {
            return (false, format!("seed {seed}: {} values, oracle has {}", got.len(), want.len()));
        }
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst < SVD_TOL, format!("max |σ − σ_oracle| = {worst:.2e} over 50 matrices"))
}

fn criterion_ttest() -> (bool, String) {
    let b = [0.3, -1.2, 4.0];
    let a: Vec<f64> = b.iter().zip([1.0, 2.0, 3.0]).map(|(x, d)| x + d).collect();
    let r = theory::paired_t_test_one_tailed(&a, &b).unwrap();
    let oracle_p = theory::integrate(|x| theory::student_t_density(x, 2.0), r.t, 1e4, 1e-12);
    let ok = (r.t - 3.4641).abs() < TTEST_TOL
        && (r.p - 0.0371).abs() < TTEST_TOL
        && (r.p - oracle_p).abs() < TTEST_TOL
        && r.df == 2;
    (ok, format!("t = {:.4}, df = {}, p = {:.4} (oracle {:.4})", r.t, r.df, r.p, oracle_p))
}

fn main() {
    let mut report = Report::default();
    let cheap: [Criterion; 8] = [
        (1, "gradient correctness", criterion_gradients, 30.0),
        (2, "STP loss identities", criterion_stp_identities, 1.0),
        (3, "straightening bound", criterion_straightening, 10.0),
        (4, "lift identity", criterion_lift_identity, 1.0),
        (5, "capacity / sample / Fano arithmetic", criterion_theory_arithmetic, 1.0),
        (6, "Brownian cone exponent", criterion_brownian, 30.0),
        (7, "SVD oracle equivalence", criterion_svd, 10.0),
        (8, "t-test oracle", criterion_ttest, 1.0),
    ];
    for (id, name, f, budget) in cheap {
        let start = Instant::now();
        let (ok, detail) = f();
        let took = start.elapsed();
        let in_budget = took.as_secs_f64() < budget;
        let detail = if in_budget { detail } else { format!("{detail}; over {budget} s budget") };
        report.line(id, name, ok && in_budget, detail, took);
    }

    let base = TrainConfig::default();
    let seeds = DEFAULT_SEEDS.to_vec();
    let cache = RunCache::new();

    let start = Instant::now();
    let sweep = experiments::sweep_lambda(&base, &LAMBDA_GRID, &seeds, &cache).expect("sweep runs");
    let sweep_time = start.elapsed();
    println!("       λ sweep on the pattern task ({} runs, {:.0} s):", cache.len(), sweep_time.as_secs_f64());
    for s in sweep.summaries() {
        println!(
            "         λ = {:<6} final L_STP {:.4} ± {:.4}   final L_NTP {:.4} ± {:.4}   accuracy {:.3} ± {:.3}",
            s.lambda, s.final_stp.0, s.final_stp.1, s.final_ntp.0, s.final_ntp.1, s.accuracy.0, s.accuracy.1
        );
    }
    let means: Vec<f64> = sweep.summaries().iter().map(|s| s.final_stp.0).collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let gap = means[0] - means[means.len() - 1];
    report.line(
        9,
        "final L_STP decreases in λ",
        decreasing && gap >= MIN_STP_GAP && sweep_time.as_secs_f64() < 30.0 * 60.0,
        format!(
            "means {:?}; strictly decreasing {decreasing}; gap λ=0 − λ=0.08 = {gap:.4} (need ≥ {MIN_STP_GAP})",
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
        sweep_time,
    );

    let start = Instant::now();
    let stp_runs = &sweep.at(STP_LAMBDA).expect("λ = 0.02 in grid").runs;
    let checks: Vec<_> = stp_runs
        .iter()
        .map(|r| experiments::p1_check(&r.record.rows, base.p1_ntp_range, base.p1_stp_drop))
        .collect();
    let holding = checks.iter().filter(|c| c.holds).count();
    let per_seed: Vec<String> = seeds
        .iter()
        .zip(&checks)
        .map(|(s, c)| format!("{s}: ΔNTP {:.3} ΔSTP {:+.3}", c.ntp_range, c.stp_drop))
        .collect();
    report.line(
        10,
        "NTP plateau while L_STP keeps falling (λ = 0.02)",
        holding >= MIN_SEEDS_AGREEING,
        format!("{holding}/5 seeds; {}", per_seed.join(", ")),
        start.elapsed(),
    );

    let start = Instant::now();
    let base_runs = &sweep.at(0.0).expect("λ = 0 in grid").runs;
    let mut lower = 0;
    let mut pairs = Vec::new();
    for (stp, ntp) in stp_runs.iter().zip(base_runs) {
        let e_stp = experiments::mean_linearity(&stp.params, &stp.split.test, LINEARITY_TAU, LINEARITY_SEQUENCES).unwrap();
        let e_ntp = experiments::mean_linearity(&ntp.params, &ntp.split.test, LINEARITY_TAU, LINEARITY_SEQUENCES).unwrap();
        lower += (e_stp < e_ntp) as usize;
        pairs.push(format!("{}: {e_stp:.4} vs {e_ntp:.4}", stp.record.seed));
    }
    let took = start.elapsed();
    report.line(
        11,
        "linearity ε̂(τ=8) lower with STP",
        lower >= MIN_SEEDS_AGREEING && took.as_secs_f64() < 300.0,
        format!("{lower}/5 seeds (λ=0.02 vs λ=0): {}", pairs.join(", ")),
        took,
    );

    let start = Instant::now();
    let eff = experiments::data_efficiency_experiment(&base, &[1, HALF_FRACTION], &seeds, STP_LAMBDA, false, &cache)
        .expect("data-efficiency runs");
    let took = start.elapsed() + sweep_time;
    let mut summary = Vec::new();
    let mut half_ok = false;
    for t in eff.tests() {
        let p = match &t.ttest {
            Ok(r) => format!("t = {:.3}, p = {:.4}", r.t, r.p),
            Err(e) => format!("t-test undefined: {e}"),
        };
        summary.push(format!(
            "1/{}: STP {:.3} ± {:.3} vs NTP {:.3} ± {:.3} ({p})",
            t.fraction, t.stp_accuracy.0, t.stp_accuracy.1, t.ntp_accuracy.0, t.ntp_accuracy.1
        ));
        if t.fraction == HALF_FRACTION {
            half_ok = t.stp_accuracy.0 >= t.ntp_accuracy.0;
        }
    }
    report.line(
        12,
        "data efficiency at 1/2 with 2× epochs",
        half_ok && took.as_secs_f64() < 2.0 * 3600.0,
        summary.join("; "),
        took,
    );

    let start = Instant::now();
    let cfg = TrainConfig { aux: stp_lab::config::AuxSettings { lambda: STP_LAMBDA, ..base.aux.clone() }, ..base.clone() };
    let dir = tempfile::tempdir().unwrap();
    let first = train::train_run(&TrainConfig { output_dir: Some(dir.path().join("a")), ..cfg.clone() }).unwrap();
    let second = train::train_run(&TrainConfig { output_dir: Some(dir.path().join("b")), ..cfg }).unwrap();
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    let cached = stp_runs[0].record.metrics_csv();
    let identical = a == b && a == cached && first.params == second.params;
    report.line(
        13,
        "determinism",
        identical,
        format!("two fresh runs and the sweep run: {} bytes each, identical {identical}", a.len()),
        start.elapsed(),
    );

    let (m, s) = mean_sd(&eff.cell(HALF_FRACTION, false).unwrap().stp.iter().map(|r| r.record.final_stp).collect::<Vec<_>>());
    println!("       (1/2-fraction STP runs: final L_STP {m:.4} ± {s:.4})");
    let (experimental, hard): (Vec<usize>, Vec<usize>) = report.failed.iter().partition(|id| EXPERIMENTAL.contains(id));
    println!(
        "{} of 13 criteria passed; failed experimental outcomes {:?}; failed deterministic criteria {:?}",
        13 - report.failed.len(),
        experimental,
        hard
    );
    if !hard.is_empty() {
        std::process::exit(1);
    }
}
