use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use stp_core::geometry::*;
use stp_core::rng::{self, Stream};
use stp_core::transformer::{ModelConfig, ModelParams};
use stp_core::Tensor;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = rng::stream(seed, Stream::Simulation, 1);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
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
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn gram_singular_values(m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    let k = r.min(c);
    let gram: Vec<Vec<f64>> = if c <= r {
        (0..c).map(|i| (0..c).map(|j| (0..r).map(|l| m.get(l, i) * m.get(l, j)).sum()).collect()).collect()
    } else {
        (0..r).map(|i| (0..r).map(|j| (0..c).map(|l| m.get(i, l) * m.get(j, l)).sum()).collect()).collect()
    };
    symmetric_eigenvalues(gram).into_iter().take(k).map(|e| e.max(0.0).sqrt()).collect()
}

#[test]
fn decompose_examples() {
    let d = decompose(&[0.0, 0.0], &[1.0, 1.0], &[2.0, 0.0]).unwrap();
    assert_eq!(d.parallel, vec![1.0, 0.0]);
    assert_eq!(d.perpendicular, vec![0.0, 1.0]);
    let d = decompose(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[4.0, 8.0, 12.0]).unwrap();
    assert!(d.noise() < 1e-12);
    assert!(matches!(decompose(&[1.0, 1.0], &[2.0, 0.0], &[1.0, 1.0]), Err(GeometryError::DegenerateAxis)));
    assert!(matches!(decompose(&[1.0], &[2.0, 0.0], &[1.0, 1.0]), Err(GeometryError::DimMismatch(..))));
}

#[test]
fn linearity_examples() {
    let line = Tensor::from_rows(&(0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect::<Vec<_>>()).unwrap();
    assert!(linearity_epsilon(&line, 4).unwrap().epsilon_hat < 1e-12);

    let square = Tensor::from_rows(&(0..8).map(|i| vec![i as f64, (i % 2) as f64]).collect::<Vec<_>>()).unwrap();
    let rep = linearity_epsilon(&square, 2).unwrap();
    assert!((rep.epsilon_hat - 1.0).abs() < 1e-12, "{}", rep.epsilon_hat);
    assert_eq!(rep.windows.len(), 6);
    let w = rep.worst().unwrap();
    assert_eq!(w.t - w.s, 2);

    assert!(matches!(linearity_epsilon(&square, 1), Err(GeometryError::InvalidTau(1))));
    assert!(matches!(linearity_epsilon(&Tensor::zeros(&[2, 3]), 2), Err(GeometryError::TooShort(2))));
}

#[test]
fn linearity_matches_brute_force() {
    let h = gaussian(9, 10, 5);
    let tau = 4;
    let mut oracle = 0.0f64;
    for s in 0..10 {
        for r in s + 1..10 {
            for t in r + 1..10 {
                if t - s <= tau {
                    let d = decompose(h.row(s), h.row(r), h.row(t)).unwrap();
                    oracle = oracle.max(d.noise());
                }
            }
        }
    }
    assert_eq!(linearity_epsilon(&h, tau).unwrap().epsilon_hat, oracle);
}

#[test]
fn straightening_examples() {
    let c = straightening_check(&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[0.0, 0.0], &[2.0, 2.0], 0.0).unwrap();
    assert!(c.holds);
    assert!(c.lhs < 1e-12);

    // cos θ = 0.98 between unit segments: deficit 0.02, ‖h_r − h_s‖ = 1.
    let th = 0.98f64.acos();
    let h_r = [1.0, 0.0];
    let h_t = [1.0 + th.cos(), th.sin()];
    let c = straightening_check(&[0.0, 0.0], &h_r, &h_t, &[0.0, 0.0], &h_t, 0.02).unwrap();
    assert!((c.rhs - 0.2 * STRAIGHTENING_SLACK).abs() < 1e-12);
    assert!(c.holds);

    assert!(matches!(
        straightening_check(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0], 0.01),
        Err(GeometryError::Hypothesis(_))
    ));
    assert!(matches!(
        straightening_check(&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[0.1, 0.0], &[2.0, 2.0], 0.01),
        Err(GeometryError::Hypothesis(_))
    ));
}

#[test]
fn svd_examples() {
    let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let sv = svd_spectrum(&d, false).unwrap();
    assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 2.0).abs() < 1e-12);

    let u = [2.0 / 3f64.sqrt(); 3];
    let v = [0.6, 0.8];
    let outer = Tensor::from_rows(&u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect::<Vec<_>>()).unwrap();
    let sv = svd_spectrum(&outer, false).unwrap();
    assert_eq!(sv.len(), 2);
    assert!((sv[0] - 2.0).abs() < 1e-12 && sv[1].abs() < 1e-12, "{sv:?}");

    let rows = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0], vec![0.0, 5.0]]).unwrap();
    let sv = svd_spectrum(&rows, true).unwrap();
    assert!((sv[0] - 1.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);
    assert!(matches!(svd_spectrum(&Tensor::zeros(&[2, 2]), true), Err(GeometryError::Empty)));
}

#[test]
fn svd_matches_gram_oracle() {
    for seed in 0..20 {
        let mut rng = rng::stream(seed, Stream::Simulation, 2);
        let (r, c) = (rng.gen_range(1..=32), rng.gen_range(1..=16));
        let m = gaussian(seed, r, c);
        let got = svd_spectrum(&m, false).unwrap();
        let want = gram_singular_values(&m);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-8, "{r}x{c}: {got:?} vs {want:?}");
        }
    }
    let m = gaussian(77, 6, 4);
    let got = svd_spectrum(&m, false).unwrap();
    let want = gram_singular_values(&m);
    assert_eq!(got.len(), 4);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-8);
    }
}

#[test]
fn power_law_fits() {
    let sqrt: Vec<(f64, f64)> = (1..50).map(|t| (t as f64, (t as f64).sqrt())).collect();
    assert!((fit_power_law(&sqrt).unwrap() - 0.5).abs() < 1e-10);
    let lin: Vec<(f64, f64)> = (1..50).map(|t| (t as f64, t as f64)).collect();
    assert!((fit_power_law(&lin).unwrap() - 1.0).abs() < 1e-10);
    assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    assert!(fit_power_law(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
}

#[test]
fn tube_distance_is_nearest_row() {
    let traj = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
    let reference = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0]]).unwrap();
    assert_eq!(tube_distance(&traj, &reference).unwrap(), vec![1.0, 4.0]);
}

#[test]
fn curvature_profile_zigzag() {
    let zig = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![2.0, 1.0]]).unwrap();
    let prof = curvature_profile(&zig);
    assert_eq!(prof.len(), 2);
    for a in prof {
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}

#[test]
fn rollout_divergence_zero_on_own_continuation() {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 5).unwrap();
    let prompt = [1, 7, 9];
    let own = stp_core::transformer::free_run(&params, &prompt, 6).unwrap();
    let series = rollout_divergence(&params, &prompt, &own[3..]).unwrap();
    assert_eq!(series, vec![0.0; 6]);

    let mut other = own[3..].to_vec();
    other[2] = if other[2] == 5 { 6 } else { 5 };
    let series = rollout_divergence(&params, &prompt, &other).unwrap();
    assert_eq!(&series[..2], &[0.0, 0.0]);
    assert!(series[2] > 0.0);

    assert!(rollout_divergence(&params, &prompt, &[5; 14]).is_err());
}

#[test]
fn diagnostics_csv_format() {
    let rows = vec![
        DiagnosticRow::new("3", "linearity_epsilon", None, 0.25),
        DiagnosticRow::new("3", "curvature", Some(1), 1.5),
    ];
    let mut buf = Vec::new();
    write_diagnostics(&mut buf, &rows).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "sequence_id,metric,position,value\n3,linearity_epsilon,,0.25\n3,curvature,1,1.5\n"
    );
}

fn orthogonal(seed: u64, n: usize) -> Vec<Vec<f64>> {
    // Gram–Schmidt on a Gaussian matrix.
    let g = gaussian(seed, n, n);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = g.row(i).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    q
}

proptest! {
    #[test]
    fn decomposition_invariants(seed in 0u64..10_000) {
        let h = gaussian(seed, 3, 16);
        let d = decompose(h.row(0), h.row(1), h.row(2)).unwrap();
        let v: Vec<f64> = h.row(1).iter().zip(h.row(0)).map(|(a, b)| a - b).collect();
        let axis: Vec<f64> = h.row(2).iter().zip(h.row(0)).map(|(a, b)| a - b).collect();
        for i in 0..16 {
            prop_assert!((d.parallel[i] + d.perpendicular[i] - v[i]).abs() < 1e-10);
        }
        let dotp: f64 = d.perpendicular.iter().zip(&axis).map(|(a, b)| a * b).sum();
        let scale = d.noise() * axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(dotp.abs() < 1e-10 * scale.max(1.0));
        let vv: f64 = v.iter().map(|x| x * x).sum();
        prop_assert!((d.signal().powi(2) + d.noise().powi(2) - vv).abs() < 1e-9);
    }

    #[test]
    fn linearity_monotone_in_tau(seed in 0u64..1000, len in 3usize..12) {
        let h = gaussian(seed, len, 4);
        let mut prev = 0.0;
        for tau in 2..len + 1 {
            let e = linearity_epsilon(&h, tau).unwrap().epsilon_hat;
            prop_assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn svd_invariant_under_permutation_and_rotation(seed in 0u64..1000) {
        let m = gaussian(seed, 7, 5);
        let base = svd_spectrum(&m, false).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..7).map(|i| m.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(0, 3);
        let permuted = svd_spectrum(&Tensor::from_rows(&rows).unwrap(), false).unwrap();
        let q = orthogonal(seed + 1, 5);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| (0..5).map(|j| (0..5).map(|k| r[k] * q[k][j]).sum()).collect())
            .collect();
        let rotated = svd_spectrum(&Tensor::from_rows(&rotated).unwrap(), false).unwrap();
        for i in 0..5 {
            prop_assert!((base[i] - permuted[i]).abs() < 1e-9);
            prop_assert!((base[i] - rotated[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn straightening_holds_on_random_configurations(seed in 0u64..100_000, eps in 1e-6f64..1e-2) {
        let mut rng = rng::stream(seed, Stream::Simulation, 3);
        let h = gaussian(seed, 2, 6);
        let h_s = h.row(0).to_vec();
        let u: Vec<f64> = h.row(1).to_vec();
        // Rotate u by an angle with 1 − cos ≤ eps inside a random plane.
        let theta = rng.gen_range(0.0..=(1.0 - eps).acos());
        let w0: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e1: Vec<f64> = u.iter().map(|x| x / un).collect();
        let d: f64 = w0.iter().zip(&e1).map(|(a, b)| a * b).sum();
        let mut e2: Vec<f64> = w0.iter().zip(&e1).map(|(a, b)| a - d * b).collect();
        let n2 = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
        e2.iter_mut().for_each(|x| *x /= n2);
        let len = rng.gen_range(0.1..10.0);
        let h_r: Vec<f64> = h_s.iter().zip(&u).map(|(a, b)| a + b).collect();
        let h_t: Vec<f64> = (0..6).map(|i| h_r[i] + len * (theta.cos() * e1[i] + theta.sin() * e2[i])).collect();
        let c = straightening_check(&h_s, &h_r, &h_t, &h_s, &h_t, eps).unwrap();
        prop_assert!(c.holds, "{c:?}");
    }
}
