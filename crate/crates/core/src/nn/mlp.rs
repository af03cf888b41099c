use alloc::string::String;

use super::{activation_forward, init_activation, init_norm, linear, norm_forward, Activation, ForwardCtx, NormLayer};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{join, ParamKind, ParamSet};
use crate::rng;
use crate::tensor::Matrix;

/// Single-hidden-layer MLP used as the predictor and the projector.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MlpConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 512, activation: Activation::Prelu, batch_norm: true }
    }
}

/// `in → hidden (norm, activation) → out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub in_dim: usize,
    pub out_dim: usize,
    pub prefix: String,
}

impl Mlp {
    pub fn new(config: MlpConfig, in_dim: usize, out_dim: usize, prefix: impl Into<String>) -> Self {
        Self { config, in_dim, out_dim, prefix: prefix.into() }
    }

    fn norm(&self) -> NormLayer {
        if self.config.batch_norm {
            NormLayer::Batch
        } else {
            NormLayer::None
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut r = rng::seeded(seed);
        let mut p = ParamSet::new();
        let h = self.config.hidden;
        let l0 = join(&self.prefix, "l0");
        let l1 = join(&self.prefix, "l1");
        p.insert_glorot(join(&l0, "w"), self.in_dim, h, ParamKind::Weight, &mut r);
        p.insert(join(&l0, "b"), Matrix::zeros(1, h), ParamKind::Bias);
        init_norm(&mut p, &join(&l0, "norm"), self.norm(), h);
        init_activation(&mut p, &join(&l0, "act"), self.config.activation);
        p.insert_glorot(join(&l1, "w"), h, self.out_dim, ParamKind::Weight, &mut r);
        p.insert(join(&l1, "b"), Matrix::zeros(1, self.out_dim), ParamKind::Bias);
        p
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let l0 = join(&self.prefix, "l0");
        let h = linear(tape, ctx, &l0, x, false)?;
        let h = norm_forward(tape, ctx, &join(&l0, "norm"), self.norm(), h)?;
        let h = activation_forward(tape, ctx, &join(&l0, "act"), self.config.activation, h)?;
        linear(tape, ctx, &join(&self.prefix, "l1"), h, false)
    }
}
