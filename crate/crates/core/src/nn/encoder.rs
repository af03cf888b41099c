use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{
    activation_forward, init_activation, init_norm, linear, norm_forward, EncoderConfig, EncoderKind, ForwardCtx,
    GAT_LEAKY_SLOPE,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormKind, NormalizedGraph};
use crate::params::{join, ParamKind, ParamSet};
use crate::rng;
use crate::tensor::Matrix;

/// Graph encoder: GCN, three-layer mean pooling with skips, or GAT.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub in_dim: usize,
    pub prefix: String,
}

/// Encoder result. `attention` holds one `arcs×heads` softmax per GAT layer.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, in_dim: usize) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 {
            return Err(Error::config("encoder input width must be positive"));
        }
        Ok(Self { config, in_dim, prefix: "enc".into() })
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind
    }

    pub fn out_dim(&self) -> usize {
        *self.config.layer_sizes.last().expect("validated nonempty")
    }

    /// Normalization of `Â` this encoder propagates over. GAT only uses the
    /// self-looped structure.
    pub fn norm_kind(&self) -> NormKind {
        match self.config.kind {
            EncoderKind::Gcn => NormKind::Symmetric,
            EncoderKind::MeanpoolSkip | EncoderKind::Gat => NormKind::Row,
        }
    }

    pub fn prepare(&self, graph: &Graph) -> NormalizedGraph {
        NormalizedGraph::new(graph, self.norm_kind())
    }

    fn layer(&self, l: usize) -> String {
        format!("{}.l{l}", self.prefix)
    }

    fn num_layers(&self) -> usize {
        self.config.layer_sizes.len()
    }

    /// Glorot-initialized parameters; biases zero, PReLU slopes 0.25.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut r = rng::seeded(seed);
        let mut p = ParamSet::new();
        let cfg = &self.config;
        let mut width = self.in_dim;
        for l in 0..self.num_layers() {
            let name = self.layer(l);
            let size = cfg.layer_sizes[l];
            let last = l + 1 == self.num_layers();
            let (in_w, out_w) = match cfg.kind {
                EncoderKind::Gcn => (width, size),
                EncoderKind::MeanpoolSkip => (if l == 0 { self.in_dim } else { cfg.layer_sizes[0] }, size),
                EncoderKind::Gat => (width, cfg.gat_heads[l] * size),
            };
            p.insert_glorot(join(&name, "w"), in_w, out_w, ParamKind::Weight, &mut r);
            let after = match cfg.kind {
                EncoderKind::Gat if last => size,
                _ => out_w,
            };
            p.insert(join(&name, "b"), Matrix::zeros(1, after), ParamKind::Bias);
            if cfg.kind == EncoderKind::Gat {
                let heads = cfg.gat_heads[l];
                for att in ["att_src", "att_dst"] {
                    p.insert_glorot(join(&name, att), heads, size, ParamKind::Attention, &mut r);
                }
                if !last {
                    p.insert_glorot(join(&name, "res"), width, out_w, ParamKind::Weight, &mut r);
                }
            }
            init_norm(&mut p, &join(&name, "norm"), cfg.norm, after);
            init_activation(&mut p, &join(&name, "act"), cfg.activation);
            width = after;
        }
        if cfg.kind == EncoderKind::MeanpoolSkip {
            let h = cfg.layer_sizes[0];
            p.insert_glorot(join(&self.prefix, "skip.w"), self.in_dim, h, ParamKind::Weight, &mut r);
            p.insert_glorot(join(&self.prefix, "skip2.w"), self.in_dim, h, ParamKind::Weight, &mut r);
        }
        p
    }

    /// Runs the encoder on `x` (`N×in_dim`) over the prepared graph `adj`.
    pub fn forward<'g>(
        &self,
        tape: &mut Tape<'g>,
        ctx: &mut ForwardCtx<'_>,
        adj: &'g NormalizedGraph,
        x: Var,
    ) -> Result<EncoderOutput> {
        let (n, f) = tape.shape(x);
        if f != self.in_dim {
            return Err(Error::Shape(format!("encoder expects {} input features, got {f}", self.in_dim)));
        }
        if n != adj.num_nodes() {
            return Err(Error::Shape(format!("{n} feature rows for {} nodes", adj.num_nodes())));
        }
        match self.config.kind {
            EncoderKind::Gcn => {
                if adj.kind() != NormKind::Symmetric {
                    return Err(Error::config("GCN needs the symmetric normalization"));
                }
                let mut h = x;
                for l in 0..self.num_layers() {
                    let agg = tape.spmm(adj, h)?;
                    h = self.finish_layer(tape, ctx, l, agg)?;
                }
                Ok(EncoderOutput { out: h, attention: Vec::new() })
            }
            EncoderKind::MeanpoolSkip => {
                if adj.kind() != NormKind::Row {
                    return Err(Error::config("mean pooling needs the row normalization"));
                }
                let h1 = self.mean_pool(tape, ctx, adj, 0, x)?;
                let skip = ctx.param(tape, &join(&self.prefix, "skip.w"))?;
                let xs = tape.matmul(x, skip)?;
                let in2 = tape.add(h1, xs)?;
                let h2 = self.mean_pool(tape, ctx, adj, 1, in2)?;
                let skip2 = ctx.param(tape, &join(&self.prefix, "skip2.w"))?;
                let xs2 = tape.matmul(x, skip2)?;
                let in3 = tape.add(h2, h1)?;
                let in3 = tape.add(in3, xs2)?;
                let out = self.mean_pool(tape, ctx, adj, 2, in3)?;
                Ok(EncoderOutput { out, attention: Vec::new() })
            }
            EncoderKind::Gat => self.gat(tape, ctx, adj, x),
        }
    }

    /// `σ(norm(D̂⁻¹ÂXW + b))`.
    fn mean_pool<'g>(
        &self,
        tape: &mut Tape<'g>,
        ctx: &mut ForwardCtx<'_>,
        adj: &'g NormalizedGraph,
        l: usize,
        x: Var,
    ) -> Result<Var> {
        let agg = tape.spmm(adj, x)?;
        self.finish_layer(tape, ctx, l, agg)
    }

    /// Linear map, then norm, then activation.
    fn finish_layer(&self, tape: &mut Tape<'_>, ctx: &mut ForwardCtx<'_>, l: usize, x: Var) -> Result<Var> {
        let name = self.layer(l);
        let y = linear(tape, ctx, &name, x, self.config.weight_standardization)?;
        let y = norm_forward(tape, ctx, &join(&name, "norm"), self.config.norm, y)?;
        activation_forward(tape, ctx, &join(&name, "act"), self.config.activation, y)
    }

    fn gat<'g>(
        &self,
        tape: &mut Tape<'g>,
        ctx: &mut ForwardCtx<'_>,
        adj: &'g NormalizedGraph,
        x: Var,
    ) -> Result<EncoderOutput> {
        let mut h = x;
        let mut attention = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let name = self.layer(l);
            let last = l + 1 == self.num_layers();
            let heads = self.config.gat_heads[l];
            let mut w = ctx.param(tape, &join(&name, "w"))?;
            if self.config.weight_standardization {
                w = tape.standardize_cols(w, super::NORM_EPS);
            }
            let wh = tape.matmul(h, w)?;
            let a_src = ctx.param(tape, &join(&name, "att_src"))?;
            let a_dst = ctx.param(tape, &join(&name, "att_dst"))?;
            let s_src = tape.head_scores(wh, a_src)?;
            let s_dst = tape.head_scores(wh, a_dst)?;
            let logits = tape.edge_logits(adj, s_dst, s_src)?;
            let logits = tape.leaky_relu(logits, GAT_LEAKY_SLOPE);
            let alpha = tape.edge_softmax(adj, logits)?;
            attention.push(alpha);
            let mut y = tape.edge_aggregate(adj, alpha, wh)?;
            if last {
                y = tape.head_mean(y, heads)?;
            } else {
                let res = ctx.param(tape, &join(&name, "res"))?;
                let skip = tape.matmul(h, res)?;
                y = tape.add(y, skip)?;
            }
            let b = ctx.param(tape, &join(&name, "b"))?;
            y = tape.add_row(y, b)?;
            y = norm_forward(tape, ctx, &join(&name, "norm"), self.config.norm, y)?;
            h = activation_forward(tape, ctx, &join(&name, "act"), self.config.activation, y)?;
        }
        Ok(EncoderOutput { out: h, attention })
    }

    /// Convenience: full forward on constant features, returning the values.
    pub fn embed(&self, params: &ParamSet, adj: &NormalizedGraph, x: &Matrix, mode: super::Mode) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::frozen(params, mode);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &mut ctx, adj, xv)?;
        Ok(tape.value(out.out).clone())
    }
}
