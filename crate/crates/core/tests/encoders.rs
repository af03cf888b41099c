use rand::Rng as _;
use rand_distr::StandardNormal;
use ssgraph_core::autograd::Tape;
use ssgraph_core::eval::{attention_entropy, attention_entropy_at, entropy_from_attention, Histogram};
use ssgraph_core::graph::{generate_sbm, SbmConfig};
use ssgraph_core::nn::{Activation, Encoder, EncoderConfig, EncoderKind, ForwardCtx, Mlp, MlpConfig, Mode, NormLayer};
use ssgraph_core::params::{Param, ParamKind, ParamSet};
use ssgraph_core::{rng, Error, Graph, Matrix, NormKind, NormalizedGraph};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() <= tol)
}

fn forward(enc: &Encoder, params: &ParamSet, g: &Graph, x: &Matrix, mode: Mode) -> Matrix {
    enc.embed(params, &enc.prepare(g), x, mode).unwrap()
}

fn gcn(sizes: Vec<usize>, act: Activation) -> EncoderConfig {
    EncoderConfig { layer_sizes: sizes, activation: act, norm: NormLayer::None, ..Default::default() }
}

fn gat(sizes: Vec<usize>, heads: Vec<usize>) -> EncoderConfig {
    EncoderConfig {
        kind: EncoderKind::Gat,
        layer_sizes: sizes,
        gat_heads: heads,
        activation: Activation::Elu,
        norm: NormLayer::None,
        ..Default::default()
    }
}

fn meanpool(h: usize, out: usize, norm: NormLayer) -> EncoderConfig {
    EncoderConfig {
        kind: EncoderKind::MeanpoolSkip,
        layer_sizes: vec![h, h, out],
        activation: Activation::Prelu,
        norm,
        ..Default::default()
    }
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

#[test]
fn gcn_isolated_node_with_identity_weights() {
    let enc = Encoder::new(gcn(vec![2], Activation::Relu), 2).unwrap();
    let mut p = enc.init_params(0);
    p.set_value("enc.l0.w", Matrix::identity(2)).unwrap();
    let out = forward(&enc, &p, &Graph::empty(1), &Matrix::from_rows(&[&[1.0, -1.0]]), Mode::Eval);
    assert_eq!(out, Matrix::from_rows(&[&[1.0, 0.0]]));
}

#[test]
fn gcn_two_nodes_average() {
    let enc = Encoder::new(gcn(vec![2], Activation::Linear), 2).unwrap();
    let mut p = enc.init_params(0);
    p.set_value("enc.l0.w", Matrix::identity(2)).unwrap();
    let g = Graph::from_edges(2, [(0, 1)]).unwrap();
    let out = forward(&enc, &p, &g, &Matrix::identity(2), Mode::Eval);
    assert!(close(&out, &Matrix::filled(2, 2, 0.5), 1e-15));
}

#[test]
fn gcn_default_widths_shape() {
    let enc = Encoder::new(EncoderConfig::default(), 300).unwrap();
    let g = Graph::from_edges(40, (0..39).map(|i| (i, i + 1))).unwrap();
    let out = forward(&enc, &enc.init_params(1), &g, &gaussian(40, 300, 2), Mode::Train);
    assert_eq!(out.shape(), (40, 256));
}

#[test]
fn gcn_rejects_wrong_width_and_normalization() {
    let enc = Encoder::new(gcn(vec![2], Activation::Relu), 3).unwrap();
    let p = enc.init_params(0);
    assert!(matches!(enc.embed(&p, &enc.prepare(&Graph::empty(2)), &Matrix::zeros(2, 4), Mode::Eval), Err(Error::Shape(_))));
    let row = NormalizedGraph::new(&Graph::empty(2), NormKind::Row);
    assert!(enc.embed(&p, &row, &Matrix::zeros(2, 3), Mode::Eval).is_err());
}

#[test]
fn meanpool_zero_input_gives_zero_output() {
    let enc = Encoder::new(meanpool(4, 3, NormLayer::None), 5).unwrap();
    let g = Graph::from_edges(6, [(0, 1), (1, 2), (3, 4)]).unwrap();
    let out = forward(&enc, &enc.init_params(3), &g, &Matrix::zeros(6, 5), Mode::Eval);
    assert!(out.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn meanpool_single_node_matches_dense_composition() {
    let enc = Encoder::new(meanpool(4, 3, NormLayer::None), 5).unwrap();
    let mut p = enc.init_params(4);
    for l in 0..3 {
        p.set_value(&format!("enc.l{l}.b"), gaussian(1, if l == 2 { 3 } else { 4 }, 10 + l as u64)).unwrap();
    }
    let x = gaussian(1, 5, 5);
    let out = forward(&enc, &p, &Graph::empty(1), &x, Mode::Eval);
    let v = |n: &str| p.value(n).unwrap().clone();
    let prelu = |m: Matrix, a: f64| m.map(|t| if t >= 0.0 { t } else { a * t });
    let add_b = |m: Matrix, b: Matrix| m.zip_map(&b, |s, t| s + t);
    let mp = |inp: &Matrix, l: usize| {
        let z = add_b(inp.matmul(&v(&format!("enc.l{l}.w"))), v(&format!("enc.l{l}.b")));
        prelu(z, v(&format!("enc.l{l}.act.slope")).item())
    };
    let h1 = mp(&x, 0);
    let xs = x.matmul(&v("enc.skip.w"));
    let h2 = mp(&h1.zip_map(&xs, |a, b| a + b), 1);
    let xs2 = x.matmul(&v("enc.skip2.w"));
    let h3 = mp(&h2.zip_map(&h1, |a, b| a + b).zip_map(&xs2, |a, b| a + b), 2);
    assert!(close(&out, &h3, 1e-12));
}

#[test]
fn meanpool_needs_three_layers() {
    let cfg = EncoderConfig { kind: EncoderKind::MeanpoolSkip, layer_sizes: vec![4, 4], ..Default::default() };
    assert!(matches!(Encoder::new(cfg, 3), Err(Error::Config(_))));
}

#[test]
fn gat_self_loop_only_node() {
    let enc = Encoder::new(gat(vec![3], vec![1]), 2).unwrap();
    let p = enc.init_params(0);
    let x = gaussian(1, 2, 1);
    let out = forward(&enc, &p, &Graph::empty(1), &x, Mode::Eval);
    let expected = x.matmul(p.value("enc.l0.w").unwrap()).map(elu);
    assert!(close(&out, &expected, 1e-15));
}

fn attention_of(enc: &Encoder, p: &ParamSet, adj: &NormalizedGraph, x: &Matrix) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::frozen(p, Mode::Eval);
    let xv = tape.constant(x.clone());
    let out = enc.forward(&mut tape, &mut ctx, adj, xv).unwrap();
    out.attention.iter().map(|&a| tape.value(a).clone()).collect()
}

#[test]
fn gat_identical_neighbors_attend_uniformly() {
    let enc = Encoder::new(gat(vec![3], vec![2]), 2).unwrap();
    let p = enc.init_params(5);
    let g = Graph::from_edges(5, [(0, 1), (0, 2), (0, 3), (3, 4)]).unwrap();
    let adj = enc.prepare(&g);
    let alpha = &attention_of(&enc, &p, &adj, &Matrix::filled(5, 2, 0.7))[0];
    let off = adj.row_offsets();
    for i in 0..5 {
        let d = adj.degree_hat(i) as f64;
        for e in off[i]..off[i + 1] {
            for h in 0..2 {
                assert!((alpha[(e, h)] - 1.0 / d).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn gat_path_matches_dense_attention_oracle() {
    let enc = Encoder::new(gat(vec![2], vec![1]), 3).unwrap();
    let mut p = enc.init_params(7);
    p.set_value("enc.l0.b", gaussian(1, 2, 8)).unwrap();
    let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
    let x = gaussian(3, 3, 9);
    let out = forward(&enc, &p, &g, &x, Mode::Eval);

    let wh = x.matmul(p.value("enc.l0.w").unwrap());
    let (a_src, a_dst) = (p.value("enc.l0.att_src").unwrap(), p.value("enc.l0.att_dst").unwrap());
    let b = p.value("enc.l0.b").unwrap();
    let dense = g.to_dense_with_self_loops();
    let mut expected = Matrix::zeros(3, 2);
    for i in 0..3 {
        let score = |j: usize| {
            let e = (0..2).map(|k| a_dst[(0, k)] * wh[(i, k)] + a_src[(0, k)] * wh[(j, k)]).sum::<f64>();
            if e > 0.0 {
                e
            } else {
                0.2 * e
            }
        };
        let nbrs: Vec<usize> = (0..3).filter(|&j| dense[(i, j)] != 0.0).collect();
        let z: f64 = nbrs.iter().map(|&j| score(j).exp()).sum();
        for k in 0..2 {
            let agg: f64 = nbrs.iter().map(|&j| score(j).exp() / z * wh[(j, k)]).sum();
            expected[(i, k)] = elu(agg + b[(0, k)]);
        }
    }
    assert!(close(&out, &expected, 1e-6));
}

trait DenseLoops {
    fn to_dense_with_self_loops(&self) -> Matrix;
}

impl DenseLoops for Graph {
    fn to_dense_with_self_loops(&self) -> Matrix {
        Matrix::from_fn(self.num_nodes(), self.num_nodes(), |i, j| f64::from(i == j || self.has_arc(i, j)))
    }
}

#[test]
fn gat_attention_rows_sum_to_one() {
    let enc = Encoder::new(gat(vec![4, 3], vec![3, 2]), 5).unwrap();
    let ds = generate_sbm(&SbmConfig { nodes_per_block: 10, feature_dim: 5, p_in: 0.3, ..Default::default() }).unwrap();
    let adj = enc.prepare(&ds.graph);
    let alphas = attention_of(&enc, &enc.init_params(2), &adj, &ds.features.to_matrix());
    assert_eq!(alphas.len(), 2);
    let off = adj.row_offsets();
    for alpha in &alphas {
        for i in 0..adj.num_nodes() {
            for h in 0..alpha.cols() {
                let s: f64 = (off[i]..off[i + 1]).map(|e| alpha[(e, h)]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn encoders_are_permutation_equivariant() {
    let ds = generate_sbm(&SbmConfig { nodes_per_block: 6, feature_dim: 4, p_in: 0.5, p_out: 0.1, ..Default::default() }).unwrap();
    let n = ds.num_nodes();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let g2 = ds.graph.permute(&perm).unwrap();
    let x = ds.features.to_matrix();
    // perm[i] is the new label of node i.
    let mut x2 = Matrix::zeros(n, 4);
    for i in 0..n {
        x2.row_mut(perm[i]).copy_from_slice(x.row(i));
    }
    let configs = [
        EncoderConfig { layer_sizes: vec![6, 5], norm: NormLayer::Batch, ..Default::default() },
        meanpool(5, 4, NormLayer::Layer),
        EncoderConfig { norm: NormLayer::Batch, ..gat(vec![3, 4], vec![2, 2]) },
    ];
    for cfg in configs {
        let enc = Encoder::new(cfg, 4).unwrap();
        let p = enc.init_params(1);
        for mode in [Mode::Train, Mode::Eval] {
            let a = forward(&enc, &p, &ds.graph, &x, mode);
            let b = forward(&enc, &p, &g2, &x2, mode);
            for i in 0..n {
                for (u, v) in a.row(i).iter().zip(b.row(perm[i])) {
                    assert!((u - v).abs() < 1e-6, "{:?}", enc.kind());
                }
            }
        }
    }
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let ds = generate_sbm(&SbmConfig { nodes_per_block: 5, feature_dim: 4, ..Default::default() }).unwrap();
    let enc = Encoder::new(gat(vec![3, 2], vec![2, 1]), 4).unwrap();
    assert_eq!(enc.init_params(9), enc.init_params(9));
    let x = ds.features.to_matrix();
    let a = forward(&enc, &enc.init_params(9), &ds.graph, &x, Mode::Train);
    let b = forward(&enc, &enc.init_params(9), &ds.graph, &x, Mode::Train);
    assert_eq!(a.as_slice(), b.as_slice());
}

#[test]
fn predictor_examples() {
    let mlp = Mlp::new(MlpConfig { hidden: 512, ..Default::default() }, 256, 256, "pred");
    let p = mlp.init_params(0);
    assert_eq!(p.value("pred.l0.w").unwrap().shape(), (256, 512));
    assert_eq!(p.value("pred.l1.w").unwrap().shape(), (512, 256));

    let small = Mlp::new(MlpConfig { hidden: 5, activation: Activation::Prelu, batch_norm: false }, 3, 3, "pred");
    let mut p = small.init_params(1);
    p.set_value("pred.l0.b", gaussian(1, 5, 2)).unwrap();
    p.set_value("pred.l1.b", gaussian(1, 3, 3)).unwrap();
    let x = gaussian(4, 3, 4);
    let run = |p: &ParamSet| {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::frozen(p, Mode::Eval);
        let xv = tape.constant(x.clone());
        let out = small.forward(&mut tape, &mut ctx, xv).unwrap();
        tape.value(out).clone()
    };
    let v = |n: &str| p.value(n).unwrap().clone();
    let bias = |m: Matrix, b: Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] + b[(0, j)]);
    let slope = v("pred.l0.act.slope").item();
    let hidden = bias(x.matmul(&v("pred.l0.w")), v("pred.l0.b")).map(|t| if t >= 0.0 { t } else { slope * t });
    let expected = bias(hidden.matmul(&v("pred.l1.w")), v("pred.l1.b"));
    assert!(close(&run(&p), &expected, 1e-12));

    let zeroed: ParamSet = p
        .iter()
        .map(|(n, q)| {
            let value = if q.kind == ParamKind::Slope { q.value.clone() } else { Matrix::zeros(q.value.rows(), q.value.cols()) };
            (n.clone(), Param::new(value, q.kind))
        })
        .collect();
    assert!(run(&zeroed).as_slice().iter().all(|&t| t == 0.0));
}

#[test]
fn scalar_linear_gradient() {
    let mut p = ParamSet::new();
    p.insert("w", Matrix::from_rows(&[&[0.3], &[-2.0]]), ParamKind::Weight);
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_rows(&[&[1.5, -4.0]]));
    let w = tape.param(&p, "w").unwrap();
    let y = tape.matmul(x, w).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("w").unwrap(), &Matrix::from_rows(&[&[1.5], &[-4.0]]));
}

#[test]
fn frozen_branch_receives_no_gradient() {
    let enc = Encoder::new(gcn(vec![3], Activation::Prelu), 2).unwrap();
    let online = enc.init_params(0);
    let target = enc.init_params(1);
    let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
    let adj = enc.prepare(&g);
    let mut tape = Tape::new();
    let x = tape.constant(gaussian(3, 2, 3));
    let mut tctx = ForwardCtx::frozen(&target, Mode::Train);
    let t = enc.forward(&mut tape, &mut tctx, &adj, x).unwrap().out;
    let s = tape.sum(t);
    assert!(tape.backward(s).unwrap().is_empty());

    let mut tape = Tape::new();
    let x = tape.constant(gaussian(3, 2, 3));
    let t = enc.forward(&mut tape, &mut ForwardCtx::frozen(&target, Mode::Train), &adj, x).unwrap().out;
    let o = enc.forward(&mut tape, &mut ForwardCtx::new(&online, Mode::Train), &adj, x).unwrap().out;
    let prod = tape.mul(t, o).unwrap();
    let s = tape.sum(prod);
    let grads = tape.backward(s).unwrap();
    let names: Vec<&String> = grads.iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["enc.l0.act.slope", "enc.l0.b", "enc.l0.w"]);
    // Gradient through the online branch only: d/dθ Σ t⊙o with t held fixed.
    let fd = {
        let mut q = online.clone();
        let h = 1e-6;
        q.get_mut("enc.l0.b").unwrap().value[(0, 0)] += h;
        let up = enc.embed(&q, &adj, &gaussian(3, 2, 3), Mode::Train).unwrap();
        let base = enc.embed(&online, &adj, &gaussian(3, 2, 3), Mode::Train).unwrap();
        let tv = enc.embed(&target, &adj, &gaussian(3, 2, 3), Mode::Train).unwrap();
        (0..3).map(|i| tv[(i, 0)] * (up[(i, 0)] - base[(i, 0)]) / h).sum::<f64>()
    };
    assert!((grads.get("enc.l0.b").unwrap()[(0, 0)] - fd).abs() < 1e-5);
}

#[test]
fn entropy_landmarks() {
    let g = Graph::from_edges(5, [(0, 1), (0, 2), (0, 3), (3, 4)]).unwrap();
    let adj = NormalizedGraph::new(&g, NormKind::Row);
    let arcs = adj.num_arcs();
    let off = adj.row_offsets().to_vec();
    let uniform = Matrix::from_fn(arcs, 2, |e, _| {
        let i = (0..5).find(|&i| off[i] <= e && e < off[i + 1]).unwrap();
        1.0 / adj.degree_hat(i) as f64
    });
    let vals = entropy_from_attention(&adj, &[uniform.clone(), uniform], &[0, 1, 2, 3, 4]).unwrap();
    assert!(vals.iter().all(|v| v.abs() < 1e-15));

    // Node 0 has d̂ = 4; put all of its attention on one arc.
    let onehot = Matrix::from_fn(arcs, 1, |e, _| f64::from(e == off[0]));
    let v = entropy_from_attention(&adj, &[onehot], &[0]).unwrap();
    assert_eq!(adj.degree_hat(0), 4);
    assert!((v[0] + 4f64.ln()).abs() < 1e-15);
    assert!((v[0] + 1.386).abs() < 1e-3);
}

#[test]
fn entropy_of_random_gat_matches_dense_oracle() {
    let ds = generate_sbm(&SbmConfig { nodes_per_block: 4, feature_dim: 4, p_in: 0.6, p_out: 0.1, ..Default::default() }).unwrap();
    let enc = Encoder::new(gat(vec![2, 2], vec![2, 3]), 4).unwrap();
    let p = enc.init_params(4);
    let x = ds.features.to_matrix();
    let nodes: Vec<usize> = (0..ds.num_nodes()).collect();
    let got = attention_entropy_at(&enc, &p, &ds.graph, &x, &nodes).unwrap();
    assert!(got.iter().all(|&v| v <= 1e-12));

    // Dense oracle from the per-layer attention tables: full N×N matrices
    // with zeros off the neighborhood.
    let adj = enc.prepare(&ds.graph);
    let alphas = attention_of(&enc, &p, &adj, &x);
    let n = ds.num_nodes();
    let off = adj.row_offsets();
    let cols = adj.col_indices();
    for &i in &nodes {
        let mut total = 0.0;
        let mut count = 0.0;
        for alpha in &alphas {
            for h in 0..alpha.cols() {
                let mut row = vec![0.0; n];
                for e in off[i]..off[i + 1] {
                    row[cols[e]] = alpha[(e, h)];
                }
                total -= row.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>();
                count += 1.0;
            }
        }
        let deg = (0..n).filter(|&j| j == i || ds.graph.has_arc(i, j)).count() as f64;
        assert!((got[i] - (total / count - deg.ln())).abs() < 1e-9);
    }

    let train = attention_entropy(&enc, &p, &ds).unwrap();
    assert_eq!(train.len(), ds.splits.train_indices().len());
    let hist = Histogram::new(&got, -2.0, 0.0, 10);
    assert_eq!(hist.counts.iter().sum::<u64>(), n as u64);
}

#[test]
fn entropy_needs_gat() {
    let ds = generate_sbm(&SbmConfig { nodes_per_block: 3, feature_dim: 4, ..Default::default() }).unwrap();
    let enc = Encoder::new(gcn(vec![2], Activation::Relu), 4).unwrap();
    assert!(matches!(attention_entropy(&enc, &enc.init_params(0), &ds), Err(Error::Kind(_))));
}
