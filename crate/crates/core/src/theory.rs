//! Information-theoretic sample bounds (all in bits), the Brownian √t
//! simulation, the embedding-lift identity and a paired one-tailed t-test.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::fit_power_law;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Trials per simulation shard; shard k is seeded with `seed + k`.
pub const BROWNIAN_SHARD_TRIALS: usize = 125;
pub const T_TEST_ABS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("vocabulary of size {0} is too small for the Fano bound")]
    VocabTooSmall(usize),
    #[error("paired differences have zero variance")]
    ZeroVariance,
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TheoryError> {
    if cond {
        Ok(())
    } else {
        Err(TheoryError::Invalid(msg()))
    }
}

/// max(0, H(Y) − m·I).
pub fn conditional_entropy_lower_bound(h_y: f64, m: f64, i_bits: f64) -> f64 {
    (h_y - m * i_bits).max(0.0)
}

/// ½·log2(1 + snr).
pub fn gaussian_capacity(snr: f64) -> Result<f64, TheoryError> {
    require(snr >= 0.0, || format!("snr must be ≥ 0, got {snr}"))?;
    Ok(0.5 * snr.ln_1p() / std::f64::consts::LN_2)
}

/// (H(Y) − ε) / capacity(snr); infinite at zero capacity.
pub fn min_samples(h_y: f64, epsilon: f64, snr: f64) -> Result<f64, TheoryError> {
    require(epsilon >= 0.0 && h_y >= epsilon, || {
        format!("need H(Y) ≥ ε ≥ 0, got H(Y)={h_y}, ε={epsilon}")
    })?;
    let cap = gaussian_capacity(snr)?;
    Ok(if cap == 0.0 {
        f64::INFINITY
    } else {
        (h_y - epsilon) / cap
    })
}

/// Denominator of the simplified Fano bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FanoDenominator {
    /// log2(|V| − 1)
    #[default]
    VocabMinusOne,
    /// log2 |V|
    Vocab,
}

/// clamp((H(Y) − m·capacity(snr)) / log2(|V| − 1), 0, 1).
pub fn fano_error_lower_bound(
    h_y: f64,
    m: f64,
    snr: f64,
    vocab_size: usize,
    denominator: FanoDenominator,
) -> Result<f64, TheoryError> {
    let base = match denominator {
        FanoDenominator::VocabMinusOne => vocab_size.saturating_sub(1),
        FanoDenominator::Vocab => vocab_size,
    };
    if base < 2 {
        return Err(TheoryError::VocabTooSmall(vocab_size));
    }
    require(m >= 0.0 && h_y >= 0.0, || format!("need H(Y), m ≥ 0, got {h_y}, {m}"))?;
    let residual = h_y - m * gaussian_capacity(snr)?;
    Ok((residual / (base as f64).log2()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryQuery {
    pub h_y: f64,
    pub epsilon: f64,
    pub snr: f64,
    pub m: f64,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryRow {
    pub query: TheoryQuery,
    pub capacity: f64,
    pub min_samples: f64,
    pub conditional_entropy: f64,
    pub fano: f64,
}

impl TheoryQuery {
    pub fn evaluate(&self, denominator: FanoDenominator) -> Result<TheoryRow, TheoryError> {
        if self.vocab_size < 2 {
            return Err(TheoryError::VocabTooSmall(self.vocab_size));
        }
        let capacity = gaussian_capacity(self.snr)?;
        Ok(TheoryRow {
            query: *self,
            capacity,
            min_samples: min_samples(self.h_y, self.epsilon, self.snr)?,
            conditional_entropy: conditional_entropy_lower_bound(self.h_y, self.m, capacity),
            fano: fano_error_lower_bound(self.h_y, self.m, self.snr, self.vocab_size, denominator)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianResult {
    /// (t, mean ‖Σ_{s≤t} ε_s‖) for t = 1..=steps.
    pub series: Vec<(usize, f64)>,
    /// Fitted growth exponent; `None` when every norm is zero.
    pub exponent: Option<f64>,
}

/// Sum over `trials` walks of ‖S_t‖ for each t, seeded with `seed + shard`.
pub fn brownian_shard(dim: usize, sigma: f64, steps: usize, trials: usize, seed: u64, shard: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed.wrapping_add(shard), Stream::Simulation, 0);
    let mut sums = vec![0.0; steps];
    let mut pos = vec![0.0; dim];
    for _ in 0..trials {
        pos.iter_mut().for_each(|p| *p = 0.0);
        for acc in sums.iter_mut() {
            let mut sq = 0.0;
            for p in pos.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p += sigma * z;
                sq += *p * *p;
            }
            *acc += sq.sqrt();
        }
    }
    sums
}

/// Partition of `trials` into shards of at most [`BROWNIAN_SHARD_TRIALS`].
pub fn brownian_shards(trials: usize) -> Vec<usize> {
    let mut left = trials;
    let mut out = Vec::new();
    while left > 0 {
        let n = left.min(BROWNIAN_SHARD_TRIALS);
        out.push(n);
        left -= n;
    }
    out
}

/// Combines per-shard sums (in shard order) into the mean series and fit.
pub fn brownian_finish(shard_sums: &[Vec<f64>], trials: usize) -> BrownianResult {
    let steps = shard_sums.first().map_or(0, Vec::len);
    let mut total = vec![0.0; steps];
    for s in shard_sums {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let series: Vec<(usize, f64)> = total
        .into_iter()
        .enumerate()
        .map(|(i, v)| (i + 1, v / trials as f64))
        .collect();
    let exponent = if series.iter().all(|&(_, y)| y > 0.0) {
        let pts: Vec<(f64, f64)> = series.iter().map(|&(t, y)| (t as f64, y)).collect();
        fit_power_law(&pts).ok()
    } else {
        None
    };
    BrownianResult { series, exponent }
}

/// Mean norm of accumulated N(0, σ²I) increments and its fitted exponent.
pub fn brownian_growth_sim(
    dim: usize,
    sigma: f64,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<BrownianResult, TheoryError> {
    require(dim >= 1, || "dim must be ≥ 1".into())?;
    require(trials >= 100, || format!("need ≥ 100 trials, got {trials}"))?;
    require(sigma >= 0.0 && sigma.is_finite(), || format!("bad sigma {sigma}"))?;
    let sums: Vec<Vec<f64>> = brownian_shards(trials)
        .into_iter()
        .enumerate()
        .map(|(k, n)| brownian_shard(dim, sigma, steps, n, seed, k as u64))
        .collect();
    Ok(brownian_finish(&sums, trials))
}

/// Zero-padded prefix x_{≤t}: rows 0..=t of `x`, the rest zero.
pub fn padded_prefix(x: &Tensor, t: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let d = x.cols();
    let upto = (t + 1).min(x.rows()) * d;
    out.data_mut()[..upto].copy_from_slice(&x.data()[..upto]);
    out
}

/// Checks x_{≤t+1} − x_{≤t} = v(x_{t+1}, t+1) exactly, where v places a row
/// at one position of an otherwise zero matrix.
pub fn lift_identity_check(x: &Tensor, t: usize) -> Result<bool, TheoryError> {
    require(t + 1 < x.rows(), || format!("need t + 1 < {}, got t = {t}", x.rows()))?;
    let hi = padded_prefix(x, t + 1);
    let lo = padded_prefix(x, t);
    let mut lifted = Tensor::zeros(x.shape());
    let d = x.cols();
    lifted.data_mut()[(t + 1) * d..(t + 2) * d].copy_from_slice(x.row(t + 1));
    Ok(hi
        .data()
        .iter()
        .zip(lo.data())
        .zip(lifted.data())
        .all(|((a, b), v)| a - b == *v))
}

pub fn student_t_density(x: f64, df: f64) -> f64 {
    let ln_norm = libm::lgamma((df + 1.0) / 2.0) - libm::lgamma(df / 2.0) - 0.5 * (df * PI).ln();
    (ln_norm - (df + 1.0) / 2.0 * (x * x / df).ln_1p()).exp()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// ∫_a^b f by adaptive Simpson to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// P(T > t) for Student-t with `df` degrees of freedom.
pub fn student_t_upper_tail(t: f64, df: f64) -> f64 {
    let half = integrate(|x| student_t_density(x, df), 0.0, t.abs(), T_TEST_ABS_TOL);
    let p = if t >= 0.0 { 0.5 - half } else { 0.5 + half };
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// One-tailed p-value for mean(a − b) > 0.
    pub p: f64,
}

pub fn paired_t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest, TheoryError> {
    require(a.len() == b.len(), || format!("lengths differ: {} vs {}", a.len(), b.len()))?;
    require(a.len() >= 2, || "need at least 2 pairs".into())?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(TheoryError::ZeroVariance);
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let df = d.len() - 1;
    Ok(TTest {
        t,
        df,
        p: student_t_upper_tail(t, df as f64),
    })
}
