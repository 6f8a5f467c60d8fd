//! WebAssembly bindings for the browser demo. Every export takes and returns
//! plain numbers so the page needs no bundler.

use wasm_bindgen::prelude::*;

use stp_core::geometry;
use stp_core::losses::{self, IndexTriple};
use stp_core::theory::{self, FanoDenominator, TheoryQuery};
use stp_core::transformer::HiddenTrajectory;
use stp_core::Tensor;

/// Tube loss and chord decomposition of three 2-D points `[sx, sy, rx, ry, tx, ty]`.
///
/// Returns `[loss, signal, noise, parallel_x, parallel_y, perpendicular_x, perpendicular_y]`;
/// the decomposition splits h_r − h_s along and across the chord h_t − h_s.
#[wasm_bindgen]
pub fn tube_triple(points: &[f64]) -> Result<Vec<f64>, String> {
    if points.len() != 6 || points.iter().any(|x| !x.is_finite()) {
        return Err("expected six finite coordinates".into());
    }
    let rows: Vec<Vec<f64>> = points.chunks(2).map(<[f64]>::to_vec).collect();
    let traj = HiddenTrajectory {
        states: Tensor::from_rows(&rows).map_err(|e| e.to_string())?,
        tokens: vec![0; 3],
    };
    let loss = losses::stp_loss(&traj, &IndexTriple::new(0, 1, 2)).map_err(|e| e.to_string())?;
    let d = geometry::decompose(&rows[0], &rows[1], &rows[2]).map_err(|e| e.to_string())?;
    Ok(vec![
        loss,
        d.signal(),
        d.noise(),
        d.parallel[0],
        d.parallel[1],
        d.perpendicular[0],
        d.perpendicular[1],
    ])
}

/// Mean distance travelled by Gaussian random walks: `[exponent, m_1, …, m_steps]`
/// (exponent is NaN when it cannot be fitted).
#[wasm_bindgen]
pub fn brownian_cone(dim: usize, sigma: f64, steps: usize, trials: usize, seed: u64) -> Result<Vec<f64>, String> {
    if steps == 0 || steps > 4096 || dim > 256 || trials > 5000 {
        return Err("need 1 ≤ steps ≤ 4096, dim ≤ 256, trials ≤ 5000".into());
    }
    let r = theory::brownian_growth_sim(dim, sigma, steps, trials, seed).map_err(|e| e.to_string())?;
    let mut out = vec![r.exponent.unwrap_or(f64::NAN)];
    out.extend(r.series.iter().map(|&(_, m)| m));
    Ok(out)
}

/// `[capacity, min_samples, conditional_entropy, fano]` for one query, in bits.
#[wasm_bindgen]
pub fn bounds(h_y: f64, epsilon: f64, snr: f64, m: f64, vocab: usize, vocab_minus_one: bool) -> Result<Vec<f64>, String> {
    let denom = if vocab_minus_one { FanoDenominator::VocabMinusOne } else { FanoDenominator::Vocab };
    let r = TheoryQuery { h_y, epsilon, snr, m, vocab_size: vocab }
        .evaluate(denom)
        .map_err(|e| e.to_string())?;
    Ok(vec![r.capacity, r.min_samples, r.conditional_entropy, r.fano])
}
