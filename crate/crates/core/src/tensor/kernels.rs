//! Raw slice kernels shared by the forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// m×k and `op(b)` is k×n. A transposed operand is stored in its
/// untransposed layout (k×m for `a`, n×k for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, written as x·σ(2u) with u = √(2/π)(x + 0.044715x³).
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Geometry of a packed multi-head causal attention call: `batch` sequences
/// of `seq` rows each, model width split into `heads` column blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn prob_index(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.seq + i) * self.seq
    }
}

/// Returns (output, probabilities). Probabilities are stored as
/// batch×heads×seq×seq with zeros above the diagonal; masked keys are never
/// touched, so row `i` depends only on rows `≤ i`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        batch,
        seq,
        heads,
        width,
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * seq * width];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * width + col..][..dh];
                let p = &mut probs[dims.prob_index(b, h, i)..][..seq];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(b * seq + j) * width + col..][..dh];
                    let s = dot(qi, kj) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                for pj in p.iter_mut().take(i + 1) {
                    *pj /= total;
                }
                let oi = &mut out[(b * seq + i) * width + col..][..dh];
                for j in 0..=i {
                    let vj = &v[(b * seq + j) * width + col..][..dh];
                    let pj = p[j];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates dq, dk, dv given the upstream gradient of the output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    dims: AttnDims,
    dq: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    dv: Option<&mut [f64]>,
) {
    let AttnDims {
        batch,
        seq,
        heads,
        width,
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scratch_q = dq.is_none().then(|| vec![0.0; q.len()]);
    let mut scratch_k = dk.is_none().then(|| vec![0.0; k.len()]);
    let mut scratch_v = dv.is_none().then(|| vec![0.0; v.len()]);
    let dq = match dq {
        Some(d) => d,
        None => scratch_q.as_deref_mut().unwrap(),
    };
    let dk = match dk {
        Some(d) => d,
        None => scratch_k.as_deref_mut().unwrap(),
    };
    let dv = match dv {
        Some(d) => d,
        None => scratch_v.as_deref_mut().unwrap(),
    };
    let mut ds = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..seq {
                let p = &probs[dims.prob_index(b, h, i)..][..seq];
                let gi = &grad_out[(b * seq + i) * width + col..][..dh];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vj = &v[(b * seq + j) * width + col..][..dh];
                    let dp = dot(gi, vj);
                    ds[j] = dp;
                    weighted += p[j] * dp;
                    let dvj = &mut dv[(b * seq + j) * width + col..][..dh];
                    for (d, g) in dvj.iter_mut().zip(gi) {
                        *d += p[j] * g;
                    }
                }
                let qi_off = (b * seq + i) * width + col;
                for j in 0..=i {
                    let s = p[j] * (ds[j] - weighted) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj_off = (b * seq + j) * width + col;
                    for c in 0..dh {
                        dq[qi_off + c] += s * k[kj_off + c];
                        dk[kj_off + c] += s * q[qi_off + c];
                    }
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
