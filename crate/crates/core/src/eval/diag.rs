use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, NormalizedGraph};
use crate::nn::{Encoder, EncoderKind, ForwardCtx, Mode};
use crate::params::ParamSet;
use crate::tensor::{norm2, Matrix};

/// Mean of the row ℓ2 norms.
pub fn mean_embedding_norm(h: &Matrix) -> f64 {
    if h.rows() == 0 {
        return 0.0;
    }
    (0..h.rows()).map(|i| norm2(h.row(i))).sum::<f64>() / h.rows() as f64
}

/// ℓ2 norm of the per-dimension standard deviation across rows, divided by
/// the mean row norm. Zero for constant rows; defined as zero (with a
/// warning) when every row is zero.
pub fn embedding_spread(h: &Matrix) -> f64 {
    if h.rows() < 2 {
        return 0.0;
    }
    let mean_norm = mean_embedding_norm(h);
    if mean_norm == 0.0 {
        log::warn!("embedding spread of an all-zero matrix is defined as 0");
        return 0.0;
    }
    let means = h.col_means();
    let std_norm = libm::sqrt(h.col_vars(&means).iter().sum::<f64>());
    std_norm / mean_norm
}

/// Per-node attention entropy relative to uniform over the training nodes
/// of `dataset`; see [`attention_entropy_at`].
pub fn attention_entropy(encoder: &Encoder, params: &ParamSet, dataset: &Dataset) -> Result<Vec<f64>> {
    let nodes = dataset.splits.train_indices();
    attention_entropy_at(encoder, params, &dataset.graph, &dataset.features.to_matrix(), &nodes)
}

/// Runs the GAT encoder in eval mode and scores each node in `nodes` by the
/// mean over layers and heads of `H(α_i·)`, minus `ln d̂_i`. Always at most
/// zero.
pub fn attention_entropy_at(
    encoder: &Encoder,
    params: &ParamSet,
    graph: &Graph,
    features: &Matrix,
    nodes: &[usize],
) -> Result<Vec<f64>> {
    if encoder.kind() != EncoderKind::Gat {
        return Err(Error::Kind("attention entropy needs a GAT encoder".into()));
    }
    let adj = encoder.prepare(graph);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::frozen(params, Mode::Eval);
    let x = tape.constant(features.clone());
    let out = encoder.forward(&mut tape, &mut ctx, &adj, x)?;
    let alphas: Vec<Matrix> = out.attention.iter().map(|&a| tape.value(a).clone()).collect();
    entropy_from_attention(&adj, &alphas, nodes)
}

/// Scores nodes from per-layer arc attention tables (`arcs × heads`, laid
/// out along the arcs of `adj`).
pub fn entropy_from_attention(adj: &NormalizedGraph, alphas: &[Matrix], nodes: &[usize]) -> Result<Vec<f64>> {
    if let Some(a) = alphas.iter().find(|a| a.rows() != adj.num_arcs()) {
        return Err(Error::Shape(format!("{} attention rows for {} arcs", a.rows(), adj.num_arcs())));
    }
    let offsets = adj.row_offsets();
    let mut values = Vec::with_capacity(nodes.len());
    for &i in nodes {
        if i >= adj.num_nodes() {
            return Err(Error::Index { index: i, num_nodes: adj.num_nodes() });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for alpha in alphas {
            for h in 0..alpha.cols() {
                total += (offsets[i]..offsets[i + 1])
                    .map(|e| alpha[(e, h)])
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * libm::log(p))
                    .sum::<f64>();
                count += 1;
            }
        }
        let uniform = libm::log(adj.degree_hat(i) as f64);
        values.push(total / count.max(1) as f64 - uniform);
    }
    Ok(values)
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { libm::floor((v - lo) / width) } else { 0.0 };
            let b = (b.max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins).map(|k| self.lo + (self.hi - self.lo) * k as f64 / bins as f64).collect()
    }
}
