//! Next-token cross-entropy, the tube-prediction cosine loss and its
//! ablation variants, plus the λ schedule.
//!
//! Every loss has a graph form (used for training, differentiable) and a
//! plain-value wrapper that evaluates the same graph code on constants.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{vocab, Marks};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::transformer::{HiddenTrajectory, TokenId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("invalid index triple: {0}")]
    InvalidTriple(String),
    #[error("sequence of length {0} is too short for a triple")]
    TooShort(usize),
    #[error("every position is masked out of the next-token loss")]
    AllMasked,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("variant {variant} needs {what}")]
    MissingInput { variant: AuxVariant, what: &'static str },
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Positions s < r < t anchoring the tube loss, with an optional skip start
/// r′ (r < r′ < t) so the target segment becomes h_t − h_r′.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexTriple {
    pub s: usize,
    pub r: usize,
    pub t: usize,
    pub skip: Option<usize>,
}

impl IndexTriple {
    pub fn new(s: usize, r: usize, t: usize) -> Self {
        Self { s, r, t, skip: None }
    }

    pub fn with_skip(s: usize, r: usize, skip: usize, t: usize) -> Self {
        Self {
            s,
            r,
            t,
            skip: Some(skip),
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<(), LossError> {
        if !(self.s < self.r && self.r < self.t && self.t < seq_len) {
            return Err(LossError::InvalidTriple(format!(
                "need s < r < t < {seq_len}, got ({}, {}, {})",
                self.s, self.r, self.t
            )));
        }
        if let Some(k) = self.skip {
            if !(self.r < k && k < self.t) {
                return Err(LossError::InvalidTriple(format!(
                    "skip {k} must lie strictly between r={} and t={}",
                    self.r, self.t
                )));
            }
        }
        Ok(())
    }

    /// Start of the target segment: r′ when present, else r.
    pub fn target_start(&self) -> usize {
        self.skip.unwrap_or(self.r)
    }
}

/// How positions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleStrategy {
    /// Uniform over all strictly increasing triples.
    Random,
    /// s = 0, (r, t) uniform.
    Zero,
    /// s = query start, r = query end, t = answer end.
    TwoView,
    /// TwoView with r′ = answer start, skipping the separator.
    TwoViewSkip,
    /// s = query start, t = answer end, r uniform in between.
    Anchored,
}

impl FromStr for TripleStrategy {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "random" => Self::Random,
            "zero" => Self::Zero,
            "two_view" | "twoview" => Self::TwoView,
            "two_view_skip" => Self::TwoViewSkip,
            "anchored" => Self::Anchored,
            other => {
                return Err(LossError::Unknown {
                    kind: "triple strategy",
                    value: other.into(),
                })
            }
        })
    }
}

pub fn sample_triple(
    rng: &mut rng::Rng,
    seq_len: usize,
    strategy: TripleStrategy,
    marks: Option<&Marks>,
) -> Result<IndexTriple, LossError> {
    if seq_len < 3 {
        return Err(LossError::TooShort(seq_len));
    }
    let need_marks = || {
        marks.ok_or(LossError::InvalidTriple(
            "two-view strategies need query/answer marks".into(),
        ))
    };
    let triple = match strategy {
        TripleStrategy::Random => {
            let mut p = index::sample(rng, seq_len, 3).into_vec();
            p.sort_unstable();
            IndexTriple::new(p[0], p[1], p[2])
        }
        TripleStrategy::Zero => {
            let mut p = index::sample(rng, seq_len - 1, 2).into_vec();
            p.sort_unstable();
            IndexTriple::new(0, p[0] + 1, p[1] + 1)
        }
        TripleStrategy::TwoView => {
            let m = need_marks()?;
            IndexTriple::new(m.query_start, m.query_end, m.answer_end)
        }
        TripleStrategy::TwoViewSkip => {
            let m = need_marks()?;
            IndexTriple::with_skip(m.query_start, m.query_end, m.answer_start, m.answer_end)
        }
        TripleStrategy::Anchored => {
            let m = need_marks()?;
            if m.answer_end < m.query_start + 2 {
                return Err(LossError::TooShort(seq_len));
            }
            let r = rng.gen_range(m.query_start + 1..m.answer_end);
            IndexTriple::new(m.query_start, r, m.answer_end)
        }
    };
    triple.validate(seq_len)?;
    Ok(triple)
}

/// The auxiliary-loss zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuxVariant {
    Stp,
    StpZero,
    StpPred,
    TwoView,
    TwoViewWarmup,
    TwoViewPred,
    TwoViewMean,
    Mask,
    MaskFull,
    MaskPred,
    Curvature,
    CurvatureSigned,
    None,
}

impl AuxVariant {
    pub const ALL: [AuxVariant; 13] = [
        AuxVariant::Stp,
        AuxVariant::StpZero,
        AuxVariant::StpPred,
        AuxVariant::TwoView,
        AuxVariant::TwoViewWarmup,
        AuxVariant::TwoViewPred,
        AuxVariant::TwoViewMean,
        AuxVariant::Mask,
        AuxVariant::MaskFull,
        AuxVariant::MaskPred,
        AuxVariant::Curvature,
        AuxVariant::CurvatureSigned,
        AuxVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuxVariant::Stp => "stp",
            AuxVariant::StpZero => "stp_zero",
            AuxVariant::StpPred => "stp_pred",
            AuxVariant::TwoView => "two_view",
            AuxVariant::TwoViewWarmup => "two_view_warmup",
            AuxVariant::TwoViewPred => "two_view_pred",
            AuxVariant::TwoViewMean => "two_view_mean",
            AuxVariant::Mask => "mask",
            AuxVariant::MaskFull => "mask_full",
            AuxVariant::MaskPred => "mask_pred",
            AuxVariant::Curvature => "curvature",
            AuxVariant::CurvatureSigned => "curvature_signed",
            AuxVariant::None => "none",
        }
    }

    pub fn uses_projector(self) -> bool {
        matches!(self, AuxVariant::StpPred | AuxVariant::TwoViewPred | AuxVariant::MaskPred)
    }

    pub fn uses_masked_pass(self) -> bool {
        matches!(self, AuxVariant::Mask | AuxVariant::MaskFull | AuxVariant::MaskPred)
    }

    /// Default triple strategy for the variant.
    pub fn strategy(self) -> TripleStrategy {
        match self {
            AuxVariant::StpZero => TripleStrategy::Zero,
            AuxVariant::TwoView
            | AuxVariant::TwoViewWarmup
            | AuxVariant::TwoViewPred
            | AuxVariant::TwoViewMean => TripleStrategy::TwoView,
            _ => TripleStrategy::Random,
        }
    }
}

impl fmt::Display for AuxVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxVariant {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        let norm = norm.replace("twoview", "two_view");
        AuxVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm || (norm == "ntp" && *v == AuxVariant::None))
            .ok_or(LossError::Unknown {
                kind: "aux variant",
                value: s.to_string(),
            })
    }
}

/// Target segment of the Pred variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredTarget {
    /// h_t − h_r (continuation segment).
    Continuation,
    /// h_t − h_s (whole chord).
    Chord,
}

impl FromStr for PredTarget {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "continuation" => Ok(Self::Continuation),
            "chord" => Ok(Self::Chord),
            other => Err(LossError::Unknown {
                kind: "pred target",
                value: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxLossSpec {
    pub variant: AuxVariant,
    pub lambda: f64,
    /// Ramp length for TwoViewWarmup; `None` ramps over the whole run.
    pub warmup_steps: Option<usize>,
    /// d_model × d_model, present iff the variant is a Pred variant.
    pub projector: Option<Tensor>,
    pub pred_target: PredTarget,
    pub mask_token: TokenId,
    /// Overrides the variant's default triple strategy.
    pub strategy: Option<TripleStrategy>,
}

impl AuxLossSpec {
    /// Builds a spec; Pred variants get a projector ~ N(0, 0.02²).
    pub fn new(variant: AuxVariant, lambda: f64, d_model: usize, seed: u64) -> Result<Self, LossError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(LossError::InvalidTriple(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        let projector = variant.uses_projector().then(|| {
            let mut rng = rng::stream(seed, Stream::Projector, 0);
            let normal = Normal::new(0.0, 0.02).expect("positive std");
            Tensor::matrix(d_model, d_model, (0..d_model * d_model).map(|_| normal.sample(&mut rng)).collect())
                .expect("square projector")
        });
        Ok(Self {
            variant,
            lambda,
            warmup_steps: None,
            projector,
            pred_target: PredTarget::Continuation,
            mask_token: vocab::MASK,
            strategy: None,
        })
    }

    pub fn none() -> Self {
        Self::new(AuxVariant::None, 0.0, 1, 0).expect("valid")
    }

    pub fn strategy(&self) -> TripleStrategy {
        self.strategy.unwrap_or(self.variant.strategy())
    }
}

/// λ in effect at `step`: constant, or a linear ramp for TwoViewWarmup.
pub fn lambda_at(spec: &AuxLossSpec, step: usize, total_steps: usize) -> f64 {
    if spec.variant == AuxVariant::None {
        return 0.0;
    }
    if spec.variant != AuxVariant::TwoViewWarmup {
        return spec.lambda;
    }
    let ramp = spec.warmup_steps.unwrap_or(total_steps);
    if ramp == 0 {
        return spec.lambda;
    }
    spec.lambda * (step.min(ramp) as f64 / ramp as f64)
}

/// L = L_NTP + λ·L_aux (plain values).
pub fn combined_loss(ntp: f64, aux: f64, lambda_now: f64) -> f64 {
    ntp + lambda_now * aux
}

/// Graph form; with `aux = None` or λ = 0 the result is the NTP node itself.
pub fn combined_loss_var(
    g: &mut Graph,
    ntp: Var,
    aux: Option<Var>,
    lambda_now: f64,
) -> Result<Var, LossError> {
    match aux {
        Some(a) if lambda_now != 0.0 => {
            let scaled = g.scale(a, lambda_now)?;
            Ok(g.add(ntp, scaled)?)
        }
        _ => Ok(ntp),
    }
}

/// Mean over unmasked positions of −log softmax(logits)[target] (plain).
pub fn ntp_loss(logits: &Tensor, targets: &[TokenId], mask: &[bool]) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = ntp_loss_var(&mut g, l, &[NtpRows { offset: 0, targets, mask }])?;
    Ok(g.value(v).item())
}

/// One sequence's slice of a packed logits matrix.
#[derive(Debug, Clone, Copy)]
pub struct NtpRows<'a> {
    pub offset: usize,
    pub targets: &'a [TokenId],
    pub mask: &'a [bool],
}

/// Batch next-token loss: per-sequence mean over unmasked positions,
/// averaged over sequences.
pub fn ntp_loss_var(g: &mut Graph, logits: Var, items: &[NtpRows<'_>]) -> Result<Var, LossError> {
    let rows = g.value(logits).rows();
    let mut targets = vec![0usize; rows];
    let mut weights = vec![0.0; rows];
    if items.is_empty() {
        return Err(LossError::AllMasked);
    }
    for it in items {
        if it.targets.len() != it.mask.len() {
            return Err(LossError::LengthMismatch(format!(
                "{} targets vs {} mask flags",
                it.targets.len(),
                it.mask.len()
            )));
        }
        if it.offset + it.targets.len() > rows {
            return Err(LossError::LengthMismatch(format!(
                "rows {}..{} outside {rows} logits",
                it.offset,
                it.offset + it.targets.len()
            )));
        }
        let count = it.mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(LossError::AllMasked);
        }
        let w = 1.0 / (count as f64 * items.len() as f64);
        for (i, (&t, &m)) in it.targets.iter().zip(it.mask).enumerate() {
            if m {
                targets[it.offset + i] = t as usize;
                weights[it.offset + i] = w;
            }
        }
    }
    Ok(g.cross_entropy(logits, targets, weights)?)
}

/// Rows `offset..offset+len` of a packed hidden matrix: one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajRef {
    pub hidden: Var,
    pub offset: usize,
    pub len: usize,
}

impl TrajRef {
    pub fn whole(g: &Graph, hidden: Var) -> Self {
        Self {
            hidden,
            offset: 0,
            len: g.value(hidden).rows(),
        }
    }

    fn row(&self, g: &mut Graph, i: usize) -> Result<Var, TensorError> {
        g.row(self.hidden, self.offset + i)
    }

    fn diff(&self, g: &mut Graph, to: usize, from: usize) -> Result<Var, TensorError> {
        let a = self.row(g, to)?;
        let b = self.row(g, from)?;
        g.sub(a, b)
    }

    /// Mean of rows `from..=to` as a 1×d row.
    fn mean_rows(&self, g: &mut Graph, from: usize, to: usize) -> Result<Var, TensorError> {
        let n = to - from + 1;
        let block = g.slice_rows(self.hidden, self.offset + from, n)?;
        let w = g.constant(Tensor::row_vector(vec![1.0 / n as f64; n]));
        g.matmul(w, block)
    }
}

/// 1 − cos(h_t − h_{r′ or r}, h_r − h_s).
pub fn stp_loss_var(g: &mut Graph, traj: TrajRef, triple: &IndexTriple) -> Result<Var, LossError> {
    triple.validate(traj.len)?;
    let ahead = traj.diff(g, triple.t, triple.target_start())?;
    let behind = traj.diff(g, triple.r, triple.s)?;
    let c = g.cosine(ahead, behind)?;
    Ok(g.one_minus(c)?)
}

fn on_constants<F>(traj: &HiddenTrajectory, f: F) -> Result<f64, LossError>
where
    F: FnOnce(&mut Graph, TrajRef) -> Result<Var, LossError>,
{
    let mut g = Graph::new();
    let h = g.constant(traj.states.clone());
    let r = TrajRef::whole(&g, h);
    let v = f(&mut g, r)?;
    Ok(g.value(v).item())
}

pub fn stp_loss(traj: &HiddenTrajectory, triple: &IndexTriple) -> Result<f64, LossError> {
    on_constants(traj, |g, r| stp_loss_var(g, r, triple))
}

/// Mean turning angle between consecutive increments h_i − h_{i−1} and
/// h_{i+1} − h_i over the whole trajectory.
pub fn curvature_var(g: &mut Graph, traj: TrajRef) -> Result<Var, LossError> {
    if traj.len < 3 {
        return Err(LossError::TooShort(traj.len));
    }
    let mut prev = traj.diff(g, 1, 0)?;
    let mut angles = Vec::with_capacity(traj.len - 2);
    for i in 1..traj.len - 1 {
        let next = traj.diff(g, i + 1, i)?;
        let c = g.cosine(prev, next)?;
        angles.push(g.acos(c)?);
        prev = next;
    }
    let all = g.concat_rows(&angles)?;
    Ok(g.mean(all)?)
}

/// Inputs to one auxiliary-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AuxInputs {
    pub traj: TrajRef,
    pub triple: IndexTriple,
    /// Trajectory of the masked copy of the sequence (Mask variants).
    pub masked: Option<TrajRef>,
    /// Trainable projector leaf (Pred variants).
    pub projector: Option<Var>,
}

/// Dispatches on the variant. Returns `None` for `AuxVariant::None`.
pub fn aux_loss_var(g: &mut Graph, spec: &AuxLossSpec, inp: &AuxInputs) -> Result<Option<Var>, LossError> {
    use AuxVariant as V;
    let variant = spec.variant;
    let traj = inp.traj;
    let tri = inp.triple;
    let projector = || {
        inp.projector.ok_or(LossError::MissingInput {
            variant,
            what: "a projector",
        })
    };
    let masked = || {
        inp.masked.ok_or(LossError::MissingInput {
            variant,
            what: "the masked-sequence trajectory",
        })
    };
    let one_minus_cos = |g: &mut Graph, a: Var, b: Var| -> Result<Var, LossError> {
        let c = g.cosine(a, b)?;
        Ok(g.one_minus(c)?)
    };
    let loss = match variant {
        V::None => return Ok(None),
        V::Stp | V::StpZero | V::TwoView | V::TwoViewWarmup => stp_loss_var(g, traj, &tri)?,
        V::StpPred | V::TwoViewPred => {
            tri.validate(traj.len)?;
            let p = projector()?;
            let behind = traj.diff(g, tri.r, tri.s)?;
            let pred = g.matmul(behind, p)?;
            let from = match spec.pred_target {
                PredTarget::Continuation => tri.target_start(),
                PredTarget::Chord => tri.s,
            };
            let target = traj.diff(g, tri.t, from)?;
            one_minus_cos(g, pred, target)?
        }
        V::TwoViewMean => {
            tri.validate(traj.len)?;
            let a = traj.mean_rows(g, tri.s, tri.r)?;
            let b = traj.mean_rows(g, tri.r, tri.t)?;
            one_minus_cos(g, a, b)?
        }
        V::Mask | V::MaskFull | V::MaskPred => {
            tri.validate(traj.len)?;
            let m = masked()?;
            if m.len != traj.len {
                return Err(LossError::LengthMismatch(format!(
                    "masked trajectory has {} rows, original {}",
                    m.len, traj.len
                )));
            }
            let recovered = m.row(g, tri.t)?;
            let source = match variant {
                V::MaskFull => traj.row(g, tri.t)?,
                V::MaskPred => {
                    let p = projector()?;
                    let d = traj.diff(g, tri.r, tri.s)?;
                    g.matmul(d, p)?
                }
                _ => traj.diff(g, tri.r, tri.s)?,
            };
            one_minus_cos(g, source, recovered)?
        }
        // Angles from arccos are non-negative, so the signed form coincides
        // with the absolute one.
        V::Curvature | V::CurvatureSigned => curvature_var(g, traj)?,
    };
    Ok(Some(loss))
}

/// Plain-value evaluation of a variant on owned trajectories.
pub fn aux_loss(
    spec: &AuxLossSpec,
    traj: &HiddenTrajectory,
    triple: &IndexTriple,
    masked: Option<&HiddenTrajectory>,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let h = g.constant(traj.states.clone());
    let m = masked.map(|m| g.constant(m.states.clone()));
    let p = spec.projector.clone().map(|p| g.constant(p));
    let inputs = AuxInputs {
        traj: TrajRef::whole(&g, h),
        triple: *triple,
        masked: m.map(|m| TrajRef::whole(&g, m)),
        projector: p,
    };
    Ok(match aux_loss_var(&mut g, spec, &inputs)? {
        Some(v) => g.value(v).item(),
        None => 0.0,
    })
}

/// Replaces positions `s..=r` with the mask token.
pub fn mask_span(tokens: &[TokenId], s: usize, r: usize, mask_token: TokenId) -> Vec<TokenId> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| if (s..=r).contains(&i) { mask_token } else { t })
        .collect()
}
