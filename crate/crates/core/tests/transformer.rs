use stp_core::data::vocab;
use stp_core::losses::{self, IndexTriple, NtpRows, TrajRef};
use stp_core::tensor::finite_difference_check_many;
use stp_core::transformer::*;
use stp_core::{Graph, Tensor, TensorError};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 10,
        tie_embeddings: false,
    }
}

#[test]
fn init_is_deterministic_and_seeded() {
    let cfg = ModelConfig::default();
    let a = ModelParams::init(&cfg, 82).unwrap();
    let b = ModelParams::init(&cfg, 82).unwrap();
    let c = ModelParams::init(&cfg, 23).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let emb = &a.weights.token_embedding;
    assert!(emb.numel() >= 4096);
    let big = ModelConfig { vocab_size: 200, ..cfg };
    let p = ModelParams::init(&big, 82).unwrap();
    let emb = &p.weights.token_embedding;
    assert!(emb.numel() >= 10_000);
    let mean_abs = emb.data().iter().map(|x| x.abs()).sum::<f64>() / emb.numel() as f64;
    assert!((mean_abs - 0.02 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.002, "{mean_abs}");
    for layer in &p.weights.layers {
        assert!(layer.ln1_gain.data().iter().all(|&g| g == 1.0));
        assert!(layer.b1.data().iter().all(|&b| b == 0.0));
    }
}

#[test]
fn forward_shapes_and_determinism() {
    let p = ModelParams::init(&tiny(), 1).unwrap();
    let (logits, traj) = forward(&p, &[vocab::BOS]).unwrap();
    assert_eq!(logits.shape(), &[1, 12]);
    assert_eq!(traj.states.shape(), &[1, 8]);
    let seq = [1, 5, 6, 7, 4, 9];
    let (l1, t1) = forward(&p, &seq).unwrap();
    let (l2, t2) = forward(&p, &seq).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(t1, t2);
    assert_eq!(t1.len(), seq.len());
    assert!(t1.states.is_finite());
}

#[test]
fn forward_is_causal() {
    let p = ModelParams::init(&tiny(), 2).unwrap();
    let seq = [1, 5, 6, 7, 8, 9, 10, 2];
    let (full, _) = forward(&p, &seq).unwrap();
    for k in 1..seq.len() {
        let (part, _) = forward(&p, &seq[..k]).unwrap();
        for i in 0..k {
            for (a, b) in part.row(i).iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
    let mut perturbed = seq;
    perturbed[5] = 11;
    let (alt, _) = forward(&p, &perturbed).unwrap();
    for i in 0..5 {
        assert_eq!(alt.row(i), full.row(i));
    }
    assert_ne!(alt.row(5), full.row(5));
}

#[test]
fn batched_forward_matches_single() {
    let p = ModelParams::init(&tiny(), 3).unwrap();
    let a: &[TokenId] = &[1, 5, 6, 7, 2];
    let b: &[TokenId] = &[1, 8, 2];
    let many = forward_many(&p, &[a, b]).unwrap();
    for (s, t) in [a, b].iter().zip(&many) {
        let (_, single) = forward(&p, s).unwrap();
        assert!(single.states.max_abs_diff(&t.states) < 1e-12);
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let p = ModelParams::init(&tiny(), 1).unwrap();
    assert!(matches!(forward(&p, &[]), Err(ModelError::EmptySequence)));
    assert!(matches!(forward(&p, &[1; 11]), Err(ModelError::TooLong { len: 11, max: 10 })));
    assert!(matches!(forward(&p, &[1, 12]), Err(ModelError::TokenOutOfRange { id: 12, .. })));
}

#[test]
fn full_model_gradient_check() {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        ..tiny()
    };
    let params = ModelParams::init(&cfg, 11).unwrap();
    let flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let seqs: [&[TokenId]; 2] = [&[1, 5, 6, 7, 4, 8, 9, 2], &[1, 10, 4, 11, 2]];
    let masks: [Vec<bool>; 2] = [
        vec![false, false, false, true, true, true, true, false],
        vec![false, true, true, true, false],
    ];
    let targets: Vec<Vec<TokenId>> = seqs
        .iter()
        .map(|s| s[1..].iter().copied().chain([0]).collect())
        .collect();
    let err = finite_difference_check_many(
        |g: &mut Graph, vars| {
            let pv = Params::from_flat(&cfg, vars.to_vec()).map_err(|e| TensorError::Invalid(e.to_string()))?;
            let out = forward_graph(g, &cfg, &pv, &seqs).map_err(|e| TensorError::Invalid(e.to_string()))?;
            let rows: Vec<NtpRows> = (0..2)
                .map(|b| NtpRows { offset: out.offset(b), targets: &targets[b], mask: &masks[b] })
                .collect();
            let ntp = losses::ntp_loss_var(g, out.logits, &rows).map_err(|e| TensorError::Invalid(e.to_string()))?;
            let traj = TrajRef { hidden: out.hidden, offset: 0, len: 8 };
            let stp = losses::stp_loss_var(g, traj, &IndexTriple::new(1, 3, 7)).map_err(|e| TensorError::Invalid(e.to_string()))?;
            losses::combined_loss_var(g, ntp, Some(stp), 0.5).map_err(|e| TensorError::Invalid(e.to_string()))
        },
        &flat,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn greedy_decode_forced_constant() {
    let cfg = tiny();
    let mut p = ModelParams::init(&cfg, 4).unwrap();
    let c = 7;
    let bias: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.1).collect();
    p.weights.final_gain = Tensor::zeros(&[1, 8]);
    p.weights.final_bias = Tensor::row_vector(bias.clone());
    let mut u = Tensor::zeros(&[8, 12]);
    for (i, b) in bias.iter().enumerate() {
        u.data_mut()[i * 12 + c] = *b;
    }
    p.weights.unembedding = Some(u);
    let out = greedy_decode(&p, &[1, 5], 6).unwrap();
    assert_eq!(out, vec![1, 5, 7, 7, 7, 7, 7, 7]);
    assert_eq!(greedy_decode(&p, &[1, 5], 0).unwrap(), vec![1, 5]);
    assert!(matches!(greedy_decode(&p, &[1, 5], 9), Err(ModelError::TooLong { .. })));
    assert_eq!(free_run(&p, &[1], 3).unwrap(), vec![1, 7, 7, 7]);
}

#[test]
fn greedy_decode_stops_at_eos() {
    let cfg = tiny();
    let mut p = ModelParams::init(&cfg, 4).unwrap();
    p.weights.final_gain = Tensor::zeros(&[1, 8]);
    p.weights.final_bias = Tensor::row_vector(vec![1.0; 8]);
    let mut u = Tensor::zeros(&[8, 12]);
    for i in 0..8 {
        u.data_mut()[i * 12 + vocab::EOS as usize] = 1.0;
    }
    p.weights.unembedding = Some(u);
    assert_eq!(greedy_decode(&p, &[1, 5], 5).unwrap(), vec![1, 5, vocab::EOS]);
    assert_eq!(free_run(&p, &[1, 5], 3).unwrap().len(), 5);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stpc");
    for tie in [false, true] {
        let cfg = ModelConfig { tie_embeddings: tie, ..tiny() };
        let p = ModelParams::init(&cfg, 9).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.config, cfg);
        let max_w = p.tensors().iter().flat_map(|t| t.data()).fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.max_abs_diff(b) <= max_w * 2f64.powi(-20));
        }
    }
}

#[test]
fn checkpoint_errors() {
    let p = ModelParams::init(&tiny(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stpc");
    save_checkpoint(&p, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(ModelError::Format(_))));

    assert!(matches!(decode_checkpoint(&bytes[..20]), Err(ModelError::Truncated(_))));

    let mut wrong_d = bytes.clone();
    wrong_d[12..16].copy_from_slice(&16u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&wrong_d), Err(ModelError::ShapeMismatch(_))));

    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 4]), Err(ModelError::ShapeMismatch(_))));

    let mut version = bytes;
    version[4] = 2;
    assert!(matches!(decode_checkpoint(&version), Err(ModelError::Format(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(ModelError::Io(_))));
}

#[test]
fn batched_greedy_matches_single() {
    let p = ModelParams::init(&tiny(), 21).unwrap();
    let prompts: [&[TokenId]; 3] = [&[1, 5, 4], &[1, 6, 7, 8, 4], &[1, 9]];
    let many = greedy_decode_many(&p, &prompts, 5).unwrap();
    for (prompt, got) in prompts.iter().zip(&many) {
        assert_eq!(got, &greedy_decode(&p, prompt, 5).unwrap());
    }
    assert!(greedy_decode_many(&p, &prompts, 6).is_err());
}
