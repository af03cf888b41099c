use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use ssgraph_core::eval::probe::{accuracy, fit_logistic, LinearModel};
use ssgraph_core::eval::{embed_frozen, linear_probe, random_init_baseline, ProbeConfig};
use ssgraph_core::graph::{generate_sbm, random_split, SbmConfig};
use ssgraph_core::nn::{Encoder, EncoderConfig, NormLayer};
use ssgraph_core::params::ParamSet;
use ssgraph_core::{rng, Dataset, Matrix};

fn only(c: f64) -> ProbeConfig {
    ProbeConfig { grid: vec![c], ..ProbeConfig::grid_full() }
}

/// Damped Newton on the same objective, `(1/n) Σ CE + ‖W‖² / (2Cn)`, with an
/// unpenalized intercept. Returns `(W, b)`.
fn newton_oracle(x: &Matrix, y: &[usize], classes: usize, c: f64) -> LinearModel {
    let (n, d) = x.shape();
    let dim = (d + 1) * classes;
    let lambda = 1.0 / (c * n as f64);
    let feat = |i: usize, k: usize| if k < d { x[(i, k)] } else { 1.0 };
    // θ[k * classes + c] multiplies feature k (k = d is the intercept).
    let eval = |theta: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut f = 0.0;
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let logits: Vec<f64> = (0..classes).map(|cl| (0..=d).map(|k| feat(i, k) * theta[k * classes + cl]).sum()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            f += (m + z.ln() - logits[y[i]]) / n as f64;
            for k in 0..=d {
                for a in 0..classes {
                    let r = p[a] - f64::from(a == y[i]);
                    g[k * classes + a] += feat(i, k) * r / n as f64;
                    for l in 0..=d {
                        for b in 0..classes {
                            let s = p[a] * (f64::from(a == b) - p[b]);
                            h[(k * classes + a, l * classes + b)] += feat(i, k) * feat(i, l) * s / n as f64;
                        }
                    }
                }
            }
        }
        for k in 0..d {
            for a in 0..classes {
                let j = k * classes + a;
                f += 0.5 * lambda * theta[j] * theta[j];
                g[j] += lambda * theta[j];
                h[(j, j)] += lambda;
            }
        }
        (f, g, h)
    };
    let mut theta = DVector::zeros(dim);
    for _ in 0..100 {
        let (f, g, h) = eval(&theta);
        if g.norm() < 1e-11 {
            break;
        }
        // The intercept is shift-invariant across classes; a tiny ridge
        // makes the system solvable without changing the descent direction.
        let step = (h + DMatrix::identity(dim, dim) * 1e-12).cholesky().expect("positive definite").solve(&g);
        let mut t = 1.0;
        while eval(&(&theta - &step * t)).0 > f - 1e-4 * t * g.dot(&step) && t > 1e-10 {
            t *= 0.5;
        }
        theta -= step * t;
    }
    let w = Matrix::from_fn(d, classes, |k, a| theta[k * classes + a]);
    LinearModel { w, b: (0..classes).map(|a| theta[d * classes + a]).collect() }
}

fn objective(m: &LinearModel, x: &Matrix, y: &[usize], c: f64) -> f64 {
    let z = m.logits(x);
    let n = x.rows() as f64;
    let ce: f64 = (0..x.rows())
        .map(|i| {
            let row = z.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - row[y[i]]
        })
        .sum();
    ce / n + m.w.as_slice().iter().map(|v| v * v).sum::<f64>() / (2.0 * c * n)
}

fn sbm(signal: f64, p_in: f64, p_out: f64, npb: usize, seed: u64) -> Dataset {
    generate_sbm(&SbmConfig { nodes_per_block: npb, p_in, p_out, signal, feature_dim: 16, seed, ..Default::default() }).unwrap()
}

#[test]
fn full_solver_agrees_with_newton_oracle() {
    let ds = sbm(0.8, 0.1, 0.01, 100, 0);
    let x = ds.features.to_matrix();
    let train = ds.splits.train_indices();
    let y: Vec<usize> = train.iter().map(|&i| ds.labels[i] as usize).collect();
    let xt = x.select_rows(&train);
    for c in [0.25, 1.0, 4.0] {
        let ours = fit_logistic(&xt, &y, 4, c, 1e-6, 20_000);
        let oracle = newton_oracle(&xt, &y, 4, c);
        let (fo, fr) = (objective(&ours, &xt, &y, c), objective(&oracle, &xt, &y, c));
        assert!(fo - fr < 1e-8 && fr <= fo + 1e-12, "C={c}: {fo} vs {fr}");
        let test = ds.splits.test_indices();
        let a = accuracy(&ours, &x, &ds.labels, &test);
        let b = accuracy(&oracle, &x, &ds.labels, &test);
        assert!((a - b).abs() <= 0.02, "C={c}: {a} vs {b}");
        let probed = linear_probe(&x, &ds.labels, &ds.splits, &only(c)).unwrap();
        assert!((probed.test_acc - b).abs() <= 0.02);
    }
}

#[test]
fn one_hot_embeddings_are_perfectly_separable() {
    let ds = sbm(0.5, 0.1, 0.01, 50, 1);
    let onehot = Matrix::from_fn(ds.num_nodes(), 4, |i, j| f64::from(ds.labels[i] as usize == j));
    for cfg in [ProbeConfig::grid_full(), ProbeConfig::gd_fast()] {
        let r = linear_probe(&onehot, &ds.labels, &ds.splits, &cfg).unwrap();
        assert_eq!(r.test_acc, 1.0);
        assert_eq!(r.val_acc, 1.0);
    }
}

#[test]
fn constant_embeddings_score_the_majority_rate() {
    let n = 300;
    let labels: Vec<i64> = (0..n).map(|i| if i % 10 < 6 { 0 } else { 1 + (i % 2) as i64 }).collect();
    let splits = random_split(n, (0.2, 0.2), 3).unwrap();
    let x = Matrix::filled(n, 5, 1.0);
    let test = splits.test_indices();
    let majority = test.iter().filter(|&&i| labels[i] == 0).count() as f64 / test.len() as f64;
    for cfg in [ProbeConfig::grid_full(), ProbeConfig::gd_fast()] {
        let r = linear_probe(&x, &labels, &splits, &cfg).unwrap();
        assert!((r.test_acc - majority).abs() < 1e-12, "{r:?} vs {majority}");
    }
}

fn random_orthogonal(d: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| r.sample(StandardNormal));
    let q = a.qr().q();
    Matrix::from_fn(d, d, |i, j| q[(i, j)])
}

// Only the full solver: its iterates are equivariant under rotation. AdamW's
// per-coordinate step sizes are not, so gd_fast carries no such guarantee.
#[test]
fn full_probe_is_rotation_invariant() {
    for (signal, seed) in [(0.6, 2), (0.8, 3)] {
        let ds = sbm(signal, 0.1, 0.01, 100, seed);
        let x = ds.features.to_matrix();
        let rotated = x.matmul(&random_orthogonal(16, seed + 5));
        let cfg = ProbeConfig::grid_full();
        let a = linear_probe(&x, &ds.labels, &ds.splits, &cfg).unwrap();
        let b = linear_probe(&rotated, &ds.labels, &ds.splits, &cfg).unwrap();
        assert!((a.test_acc - b.test_acc).abs() < 0.005, "{a:?} vs {b:?}");
        assert_eq!(a.regularizer, b.regularizer);
    }
}

fn small_encoder(in_dim: usize) -> Encoder {
    Encoder::new(EncoderConfig { layer_sizes: vec![16, 8], ..Default::default() }, in_dim).unwrap()
}

#[test]
fn frozen_embeddings_are_unit_rows_and_deterministic() {
    let ds = sbm(0.5, 0.1, 0.01, 30, 3);
    let enc = small_encoder(16);
    let p = enc.init_params(4);
    let h = embed_frozen(&enc, &p, &ds).unwrap();
    for i in 0..h.rows() {
        let norm = h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    assert_eq!(h, embed_frozen(&enc, &p, &ds).unwrap());
    assert!(embed_frozen(&small_encoder(8), &small_encoder(8).init_params(0), &ds).is_err());
}

#[test]
fn zero_parameters_leave_zero_rows() {
    let ds = sbm(0.5, 0.1, 0.01, 10, 3);
    let enc = Encoder::new(EncoderConfig { layer_sizes: vec![4], norm: NormLayer::None, ..Default::default() }, 16).unwrap();
    let p: ParamSet = enc
        .init_params(0)
        .iter()
        .map(|(n, q)| {
            let mut q = q.clone();
            q.value.fill(0.0);
            (n.clone(), q)
        })
        .collect();
    let h = embed_frozen(&enc, &p, &ds).unwrap();
    assert!(h.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn random_init_baseline_examples() {
    let ds = sbm(0.5, 0.1, 0.01, 50, 4);
    let cfg = EncoderConfig { layer_sizes: vec![16, 8], ..Default::default() };
    let probe = ProbeConfig::gd_fast();
    let a = random_init_baseline(&cfg, &ds, &probe, 1).unwrap();
    assert_eq!(a, random_init_baseline(&cfg, &ds, &probe, 1).unwrap());
    let b = random_init_baseline(&cfg, &ds, &probe, 2).unwrap();
    assert_ne!(a, b);
}

#[test]
fn no_signal_control_scores_near_majority() {
    // Features carry no label signal and the block structure is erased too
    // (equal in- and out-block probabilities); otherwise neighborhood
    // averaging alone recovers the blocks.
    let ds = sbm(0.0, 0.02, 0.02, 250, 5);
    let test = ds.splits.test_indices();
    let counts = (0..4).map(|c| test.iter().filter(|&&i| ds.labels[i] == c).count()).max().unwrap();
    let majority = counts as f64 / test.len() as f64;
    let cfg = EncoderConfig { layer_sizes: vec![32, 16], ..Default::default() };
    let r = random_init_baseline(&cfg, &ds, &ProbeConfig::grid_full(), 0).unwrap();
    assert!((r.test_acc - majority).abs() <= 0.05, "{} vs {majority}", r.test_acc);
}
