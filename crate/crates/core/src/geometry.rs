//! Trajectory diagnostics: signal/noise decomposition, local linearity,
//! the straightening bound, singular spectra and rollout divergence.

use std::io::{self, Write};

use thiserror::Error;

use crate::tensor::{Tensor, NORM_EPS};
use crate::transformer::{self, ModelError, ModelParams, TokenId};

/// Multiplicative slack on the straightening bound.
pub const STRAIGHTENING_SLACK: f64 = 1.1;
pub const SVD_TOL: f64 = 1e-10;
pub const SVD_MAX_SWEEPS: usize = 60;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("axis h_t − h_s is zero")]
    DegenerateAxis,
    #[error("vector lengths differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("trajectory of length {0} is too short")]
    TooShort(usize),
    #[error("window length tau must be ≥ 2, got {0}")]
    InvalidTau(usize),
    #[error("empty input")]
    Empty,
    #[error("Jacobi SVD did not converge in {sweeps} sweeps (off-diagonal ratio {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("power-law fit needs ≥ 3 points with t > 0 and y > 0: {0}")]
    BadFit(String),
    #[error("straightening hypothesis violated: {0}")]
    Hypothesis(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn same_dim(vs: &[&[f64]]) -> Result<(), GeometryError> {
    let d = vs[0].len();
    match vs.iter().find(|v| v.len() != d) {
        Some(v) => Err(GeometryError::DimMismatch(d, v.len())),
        None => Ok(()),
    }
}

/// h_r − h_s split into components along and across the chord h_t − h_s.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub parallel: Vec<f64>,
    pub perpendicular: Vec<f64>,
}

impl Decomposition {
    pub fn signal(&self) -> f64 {
        norm(&self.parallel)
    }

    pub fn noise(&self) -> f64 {
        norm(&self.perpendicular)
    }
}

/// Projects `v` onto `axis`; errors when the axis is below the norm guard.
pub fn project(v: &[f64], axis: &[f64]) -> Result<Decomposition, GeometryError> {
    same_dim(&[v, axis])?;
    let a2 = dot(axis, axis);
    if a2.sqrt() <= NORM_EPS {
        return Err(GeometryError::DegenerateAxis);
    }
    let k = dot(v, axis) / a2;
    let parallel: Vec<f64> = axis.iter().map(|a| k * a).collect();
    let perpendicular = sub(v, &parallel);
    Ok(Decomposition {
        parallel,
        perpendicular,
    })
}

pub fn decompose(h_s: &[f64], h_r: &[f64], h_t: &[f64]) -> Result<Decomposition, GeometryError> {
    same_dim(&[h_s, h_r, h_t])?;
    project(&sub(h_r, h_s), &sub(h_t, h_s))
}

/// ‖(h_r − h_s)⊥‖; with a zero chord the whole segment counts as deviation.
fn perpendicular_norm(h_s: &[f64], h_r: &[f64], h_t: &[f64]) -> f64 {
    let v = sub(h_r, h_s);
    match project(&v, &sub(h_t, h_s)) {
        Ok(d) => d.noise(),
        Err(_) => norm(&v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowWorst {
    pub s: usize,
    pub r: usize,
    pub t: usize,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearityReport {
    pub tau: usize,
    pub epsilon_hat: f64,
    /// Worst triple for each window start s (windows with at least one triple).
    pub windows: Vec<WindowWorst>,
}

impl LinearityReport {
    pub fn worst(&self) -> Option<WindowWorst> {
        self.windows
            .iter()
            .copied()
            .max_by(|a, b| a.deviation.total_cmp(&b.deviation))
    }
}

/// Max perpendicular deviation over all s < r < t with t − s ≤ tau.
/// Rows of `states` are the trajectory.
pub fn linearity_epsilon(states: &Tensor, tau: usize) -> Result<LinearityReport, GeometryError> {
    let n = states.rows();
    if n < 3 {
        return Err(GeometryError::TooShort(n));
    }
    if tau < 2 {
        return Err(GeometryError::InvalidTau(tau));
    }
    let mut windows = Vec::new();
    let mut epsilon_hat = 0.0f64;
    for s in 0..n - 2 {
        let mut best: Option<WindowWorst> = None;
        for t in s + 2..n.min(s + tau + 1) {
            for r in s + 1..t {
                let dev = perpendicular_norm(states.row(s), states.row(r), states.row(t));
                if best.is_none_or(|b| dev > b.deviation) {
                    best = Some(WindowWorst { s, r, t, deviation: dev });
                }
            }
        }
        if let Some(b) = best {
            epsilon_hat = epsilon_hat.max(b.deviation);
            windows.push(b);
        }
    }
    Ok(LinearityReport {
        tau,
        epsilon_hat,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraighteningCheck {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// Checks ‖(h_r − h_s)⊥(h*_t − h*_s)‖ ≤ √(2ε)·‖h_r − h_s‖·slack for a
/// configuration whose cosine deficit 1 − cos(h_t − h_r, h_r − h_s) is ≤ ε and
/// whose endpoints coincide with the reference endpoints.
pub fn straightening_check(
    h_s: &[f64],
    h_r: &[f64],
    h_t: &[f64],
    hstar_s: &[f64],
    hstar_t: &[f64],
    eps: f64,
) -> Result<StraighteningCheck, GeometryError> {
    same_dim(&[h_s, h_r, h_t, hstar_s, hstar_t])?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(GeometryError::Hypothesis(format!("eps must be ≥ 0, got {eps}")));
    }
    let scale = norm(h_s).max(norm(h_t)).max(1.0);
    if norm(&sub(h_s, hstar_s)) > 1e-12 * scale || norm(&sub(h_t, hstar_t)) > 1e-12 * scale {
        return Err(GeometryError::Hypothesis("endpoints differ from reference endpoints".into()));
    }
    let behind = sub(h_r, h_s);
    let ahead = sub(h_t, h_r);
    let denom = norm(&behind).max(NORM_EPS) * norm(&ahead).max(NORM_EPS);
    let deficit = 1.0 - dot(&behind, &ahead) / denom;
    if deficit > eps + 1e-12 {
        return Err(GeometryError::Hypothesis(format!(
            "cosine deficit {deficit:e} exceeds eps {eps:e}"
        )));
    }
    let lhs = match project(&behind, &sub(hstar_t, hstar_s)) {
        Ok(d) => d.noise(),
        Err(_) => norm(&behind),
    };
    let rhs = (2.0 * eps).sqrt() * norm(&behind) * STRAIGHTENING_SLACK;
    Ok(StraighteningCheck {
        holds: lhs <= rhs,
        lhs,
        rhs,
    })
}

/// Singular values (descending) of the matrix whose rows are `rows`, by
/// one-sided Jacobi. With `normalize`, rows are scaled to unit norm and zero
/// rows dropped first. Returns min(m, n) values.
pub fn svd_spectrum(rows: &Tensor, normalize: bool) -> Result<Vec<f64>, GeometryError> {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(rows.rows());
    for i in 0..rows.rows() {
        let r = rows.row(i);
        if normalize {
            let n = norm(r);
            if n > NORM_EPS {
                kept.push(r.iter().map(|x| x / n).collect());
            }
        } else {
            kept.push(r.to_vec());
        }
    }
    if kept.is_empty() || rows.cols() == 0 {
        return Err(GeometryError::Empty);
    }
    let m = kept.len();
    let n = rows.cols();
    // Columns of A (or of Aᵀ when wide) as contiguous vectors.
    let mut cols: Vec<Vec<f64>> = if n <= m {
        (0..n).map(|j| kept.iter().map(|r| r[j]).collect()).collect()
    } else {
        kept
    };
    let k = cols.len();

    let mut converged = false;
    let mut residual = 0.0f64;
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0;
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= SVD_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GeometryError::NoConvergence { sweeps, residual });
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// ‖h_t − h*_t‖ along a free-running greedy continuation of `prompt` (h)
/// against the teacher-forced ground-truth continuation (h*, the proxy for
/// the error-free trajectory). One value per continuation position.
pub fn rollout_divergence(
    params: &ModelParams,
    prompt: &[TokenId],
    ground_truth: &[TokenId],
) -> Result<Vec<f64>, GeometryError> {
    if ground_truth.is_empty() {
        return Ok(Vec::new());
    }
    let total = prompt.len() + ground_truth.len();
    if total > params.config.max_seq_len {
        return Err(ModelError::TooLong {
            len: total,
            max: params.config.max_seq_len,
        }
        .into());
    }
    let generated = transformer::free_run(params, prompt, ground_truth.len())?;
    let mut forced = prompt.to_vec();
    forced.extend_from_slice(ground_truth);
    let trajs = transformer::forward_many(params, &[&generated, &forced])?;
    let (h, hstar) = (&trajs[0], &trajs[1]);
    Ok((prompt.len()..total)
        .map(|i| {
            if generated[..=i] == forced[..=i] {
                0.0
            } else {
                norm(&sub(h.state(i), hstar.state(i)))
            }
        })
        .collect())
}

/// Least-squares slope of ln y against ln t.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<f64, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::BadFit(format!("{} points", points.len())));
    }
    if let Some(p) = points.iter().find(|(t, y)| !(*t > 0.0 && *y > 0.0)) {
        return Err(GeometryError::BadFit(format!("nonpositive point {p:?}")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(GeometryError::BadFit("all t equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// For each row of `traj`, the distance to the nearest row of `reference`.
pub fn tube_distance(traj: &Tensor, reference: &Tensor) -> Result<Vec<f64>, GeometryError> {
    if reference.rows() == 0 {
        return Err(GeometryError::Empty);
    }
    if traj.cols() != reference.cols() {
        return Err(GeometryError::DimMismatch(traj.cols(), reference.cols()));
    }
    Ok((0..traj.rows())
        .map(|i| {
            (0..reference.rows())
                .map(|j| norm(&sub(traj.row(i), reference.row(j))))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Turning angle at every interior position, in radians.
pub fn curvature_profile(states: &Tensor) -> Vec<f64> {
    (1..states.rows().saturating_sub(1))
        .map(|i| {
            let a = sub(states.row(i), states.row(i - 1));
            let b = sub(states.row(i + 1), states.row(i));
            let c = dot(&a, &b) / (norm(&a).max(NORM_EPS) * norm(&b).max(NORM_EPS));
            c.clamp(-1.0, 1.0).acos()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub sequence_id: String,
    pub metric: String,
    pub position: Option<usize>,
    pub value: f64,
}

impl DiagnosticRow {
    pub fn new(sequence_id: impl Into<String>, metric: impl Into<String>, position: Option<usize>, value: f64) -> Self {
        Self {
            sequence_id: sequence_id.into(),
            metric: metric.into(),
            position,
            value,
        }
    }
}

pub const DIAGNOSTICS_HEADER: &str = "sequence_id,metric,position,value";

/// Writes the header and rows; an absent position is an empty field.
pub fn write_diagnostics<W: Write>(mut w: W, rows: &[DiagnosticRow]) -> io::Result<()> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for r in rows {
        let pos = r.position.map(|p| p.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.sequence_id, r.metric, pos, r.value)?;
    }
    Ok(())
}
