//! Pre-norm decoder-only transformer with learned positions and a GELU MLP.
//!
//! Sequences in a batch are right-padded to a common length and processed as
//! one packed `(batch·seq) × d_model` matrix. Attention is causal inside each
//! sequence block, so padding never influences real positions.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::vocab;
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub type TokenId = u32;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"STPC";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 7 * 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds positional capacity {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Positional capacity T.
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 96,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size < vocab::RESERVED {
            return bad(format!("vocab_size {} < {}", self.vocab_size, vocab::RESERVED));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 8 {
            return bad(format!("max_seq_len {} < 8", self.max_seq_len));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in checkpoint order.
    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        let (v, d, f, t) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let mut shapes = vec![[v, d], [t, d]];
        for _ in 0..self.n_layers {
            shapes.extend([
                [d, d],
                [d, d],
                [d, d],
                [d, d],
                [d, f],
                [1, f],
                [f, d],
                [1, d],
                [1, d],
                [1, d],
                [1, d],
                [1, d],
            ]);
        }
        shapes.extend([[1, d], [1, d]]);
        if !self.tie_embeddings {
            shapes.push([d, v]);
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|s| s[0] * s[1]).sum()
    }
}

/// Parameters of one block. Field order here is the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

/// Full parameter set, generic over the storage (`Tensor` for owned values,
/// `Var` once attached to a graph).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    /// `None` when the unembedding is tied to the token embedding.
    pub unembedding: Option<T>,
}

impl<T> Params<T> {
    /// Flattens in checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let layers = self.layers.iter().flat_map(|l| {
            [
                &l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2, &l.ln1_gain, &l.ln1_bias,
                &l.ln2_gain, &l.ln2_bias,
            ]
        });
        [&self.token_embedding, &self.position_embedding]
            .into_iter()
            .chain(layers)
            .chain([&self.final_gain, &self.final_bias])
            .chain(self.unembedding.as_ref())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let layers = self.layers.iter_mut().flat_map(|l| {
            [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]
        });
        [&mut self.token_embedding, &mut self.position_embedding]
            .into_iter()
            .chain(layers)
            .chain([&mut self.final_gain, &mut self.final_bias])
            .chain(self.unembedding.as_mut())
    }

    /// Rebuilds from a flat list in checkpoint order.
    pub fn from_flat(config: &ModelConfig, flat: Vec<T>) -> Result<Self, ModelError> {
        let want = config.param_shapes().len();
        if flat.len() != want {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {want} parameter tensors, got {}",
                flat.len()
            )));
        }
        let mut it = flat.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let final_gain = next();
        let final_bias = next();
        let unembedding = (!config.tie_embeddings).then(next);
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            unembedding,
        })
    }
}

pub type ParamVars = Params<Var>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Params<Tensor>,
}

impl ModelParams {
    /// Weights ~ N(0, 0.02²), norm gains 1, biases 0. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let n_layer_tensors = 12;
        let flat: Vec<Tensor> = config
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, [r, c])| {
                let data = match param_role(config, i, n_layer_tensors) {
                    Role::Weight => (0..r * c).map(|_| normal.sample(&mut rng)).collect(),
                    Role::Gain => vec![1.0; r * c],
                    Role::Bias => vec![0.0; r * c],
                };
                Tensor::matrix(r, c, data).expect("shape from config")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            weights: Params::from_flat(config, flat)?,
        })
    }

    pub fn from_flat(config: ModelConfig, flat: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        for (i, (t, s)) in flat.iter().zip(config.param_shapes()).enumerate() {
            if t.shape() != s {
                return Err(ModelError::ShapeMismatch(format!(
                    "tensor {i}: {:?} vs expected {s:?}",
                    t.shape()
                )));
            }
        }
        let weights = Params::from_flat(&config, flat)?;
        Ok(Self { config, weights })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().collect()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn attach(&self, g: &mut Graph, requires_grad: bool) -> ParamVars {
        let vars = self
            .weights
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect();
        Params::from_flat(&self.config, vars).expect("same layout")
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Tensor::is_finite)
    }
}

enum Role {
    Weight,
    Gain,
    Bias,
}

fn param_role(config: &ModelConfig, index: usize, per_layer: usize) -> Role {
    let layer_end = 2 + config.n_layers * per_layer;
    if index < 2 {
        return Role::Weight;
    }
    if index < layer_end {
        return match (index - 2) % per_layer {
            0..=4 | 6 => Role::Weight,
            5 | 7 | 9 | 11 => Role::Bias,
            _ => Role::Gain,
        };
    }
    match index - layer_end {
        0 => Role::Gain,
        1 => Role::Bias,
        _ => Role::Weight,
    }
}

/// Last-layer, post-final-norm states of one sequence (the rows fed to the
/// unembedding).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrajectory {
    pub states: Tensor,
    pub tokens: Vec<TokenId>,
}

impl HiddenTrajectory {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.state(i).to_vec()).collect()
    }
}

/// Graph handles produced by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// (batch·seq) × vocab.
    pub logits: Var,
    /// (batch·seq) × d_model.
    pub hidden: Var,
    /// Padded length of every sequence block.
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl ForwardVars {
    /// Row offset of sequence `b` inside the packed matrices.
    pub fn offset(&self, b: usize) -> usize {
        b * self.seq
    }
}

pub fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::TooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Batched forward pass on `g`.
pub fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    p: &ParamVars,
    seqs: &[&[TokenId]],
) -> Result<ForwardVars, ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    for s in seqs {
        check_tokens(config, s)?;
    }
    let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let batch = seqs.len();
    let mut ids = Vec::with_capacity(batch * seq);
    let mut positions = Vec::with_capacity(batch * seq);
    for s in seqs {
        ids.extend(s.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(vocab::PAD as usize, seq - s.len()));
        positions.extend(0..seq);
    }

    let tok = g.embed(p.token_embedding, ids)?;
    let pos = g.embed(p.position_embedding, positions)?;
    let mut x = g.add(tok, pos)?;
    for layer in &p.layers {
        let h = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = g.matmul(h, layer.wq)?;
        let k = g.matmul(h, layer.wk)?;
        let v = g.matmul(h, layer.wv)?;
        let a = g.causal_attention(q, k, v, batch, seq, config.n_heads)?;
        let o = g.matmul(a, layer.wo)?;
        x = g.add(x, o)?;

        let h = g.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let u = g.matmul(h, layer.w1)?;
        let u = g.add_row(u, layer.b1)?;
        let u = g.gelu(u)?;
        let u = g.matmul(u, layer.w2)?;
        let u = g.add_row(u, layer.b2)?;
        x = g.add(x, u)?;
    }
    let hidden = g.layer_norm(x, p.final_gain, p.final_bias)?;
    let unembed = match p.unembedding {
        Some(u) => u,
        None => g.transpose(p.token_embedding)?,
    };
    let logits = g.matmul(hidden, unembed)?;
    Ok(ForwardVars {
        logits,
        hidden,
        seq,
        lengths: seqs.iter().map(|s| s.len()).collect(),
    })
}

/// Forward pass on a single sequence without gradient tracking.
pub fn forward(
    params: &ModelParams,
    tokens: &[TokenId],
) -> Result<(Tensor, HiddenTrajectory), ModelError> {
    let mut g = Graph::new();
    let p = params.attach(&mut g, false);
    let out = forward_graph(&mut g, &params.config, &p, &[tokens])?;
    Ok((
        g.value(out.logits).clone(),
        HiddenTrajectory {
            states: g.value(out.hidden).clone(),
            tokens: tokens.to_vec(),
        },
    ))
}

/// Forward over many sequences at once; returns one trajectory per input.
pub fn forward_many(
    params: &ModelParams,
    seqs: &[&[TokenId]],
) -> Result<Vec<HiddenTrajectory>, ModelError> {
    let mut g = Graph::new();
    let p = params.attach(&mut g, false);
    let out = forward_graph(&mut g, &params.config, &p, seqs)?;
    let hidden = g.value(out.hidden);
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, s)| HiddenTrajectory {
            states: hidden.slice_rows(out.offset(b), s.len()),
            tokens: s.to_vec(),
        })
        .collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`, stopping after EOS or `max_new` tokens.
/// Returns prompt ⊕ generated tokens.
pub fn greedy_decode(
    params: &ModelParams,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>, ModelError> {
    decode(params, prompt, max_new, true)
}

/// Greedy continuation of exactly `n` tokens, ignoring EOS.
pub fn free_run(params: &ModelParams, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>, ModelError> {
    decode(params, prompt, n, false)
}

fn decode(
    params: &ModelParams,
    prompt: &[TokenId],
    max_new: usize,
    stop_at_eos: bool,
) -> Result<Vec<TokenId>, ModelError> {
    check_tokens(&params.config, prompt)?;
    if prompt.len() + max_new > params.config.max_seq_len {
        return Err(ModelError::TooLong {
            len: prompt.len() + max_new,
            max: params.config.max_seq_len,
        });
    }
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        let (logits, _) = forward(params, &out)?;
        let next = argmax(logits.row(out.len() - 1)) as TokenId;
        out.push(next);
        if stop_at_eos && next == vocab::EOS {
            break;
        }
    }
    Ok(out)
}

/// [`greedy_decode`] over many prompts, one packed forward per step.
pub fn greedy_decode_many(
    params: &ModelParams,
    prompts: &[&[TokenId]],
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>, ModelError> {
    for p in prompts {
        check_tokens(&params.config, p)?;
        if p.len() + max_new > params.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: p.len() + max_new,
                max: params.config.max_seq_len,
            });
        }
    }
    let mut outs: Vec<Vec<TokenId>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut active: Vec<usize> = (0..outs.len()).collect();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let mut g = Graph::new();
        let p = params.attach(&mut g, false);
        let seqs: Vec<&[TokenId]> = active.iter().map(|&i| outs[i].as_slice()).collect();
        let fw = forward_graph(&mut g, &params.config, &p, &seqs)?;
        let logits = g.value(fw.logits);
        let next: Vec<TokenId> = active
            .iter()
            .enumerate()
            .map(|(b, &i)| argmax(logits.row(fw.offset(b) + outs[i].len() - 1)) as TokenId)
            .collect();
        for (&i, t) in active.iter().zip(next) {
            outs[i].push(t);
        }
        active.retain(|&i| *outs[i].last().unwrap() != vocab::EOS);
    }
    Ok(outs)
}

/// Writes the binary checkpoint: magic, version, seven u32 config fields,
/// then every parameter as little-endian f32 in checkpoint order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let c = &params.config;
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * c.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for field in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq_len,
        c.tie_embeddings as usize,
    ] {
        buf.extend_from_slice(&(field as u32).to_le_bytes());
    }
    for t in params.weights.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(ModelError::Truncated(format!(
            "header needs {HEADER_BYTES} bytes, file has {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let f = |i: usize| word(1 + i) as usize;
    let config = ModelConfig {
        vocab_size: f(0),
        d_model: f(1),
        n_layers: f(2),
        n_heads: f(3),
        d_ff: f(4),
        max_seq_len: f(5),
        tie_embeddings: match f(6) {
            0 => false,
            1 => true,
            other => return Err(ModelError::Format(format!("tie flag {other}"))),
        },
    };
    config
        .validate()
        .map_err(|e| ModelError::Format(e.to_string()))?;
    let blob = &bytes[HEADER_BYTES..];
    let expected = config.num_params() * 4;
    if blob.len() != expected {
        return Err(ModelError::ShapeMismatch(format!(
            "header implies {expected} parameter bytes, blob has {}",
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let flat = config
        .param_shapes()
        .into_iter()
        .map(|[r, c]| Tensor::matrix(r, c, values.by_ref().take(r * c).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    ModelParams::from_flat(config, flat)
}
