//! Encoder layers, MLP heads, normalization and activations on top of the
//! gradient engine.

mod encoder;
mod mlp;

pub use encoder::{Encoder, EncoderOutput};
pub use mlp::{Mlp, MlpConfig};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, ParamKind, ParamSet};
use crate::tensor::Matrix;

/// Epsilon used inside batch, layer and weight standardization.
pub const NORM_EPS: f64 = 1e-5;
/// Default decay of batch-norm running statistics.
pub const NORM_DECAY: f64 = 0.99;
/// Negative slope of the LeakyReLU in GAT attention logits.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EncoderKind {
    Gcn,
    MeanpoolSkip,
    Gat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Prelu,
    Elu,
    Relu,
    /// Identity; only useful for tests and probes.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NormLayer {
    None,
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output width of each layer. For GAT this is the per-head width.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub norm: NormLayer,
    pub norm_decay: f64,
    pub gat_heads: Vec<usize>,
    pub weight_standardization: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Gcn,
            layer_sizes: vec![512, 256],
            activation: Activation::Prelu,
            norm: NormLayer::Batch,
            norm_decay: NORM_DECAY,
            gat_heads: Vec::new(),
            weight_standardization: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(Error::config("encoder.layer_sizes must be nonempty and positive"));
        }
        if !(0.0..=1.0).contains(&self.norm_decay) {
            return Err(Error::config("encoder.norm_decay must lie in [0, 1]"));
        }
        match self.kind {
            EncoderKind::Gat if self.gat_heads.len() != self.layer_sizes.len() || self.gat_heads.contains(&0) => {
                Err(Error::config("encoder.gat_heads needs one positive head count per layer"))
            }
            EncoderKind::MeanpoolSkip if self.layer_sizes.len() != 3 => {
                Err(Error::config("mean-pooling skip encoder needs exactly 3 layers"))
            }
            EncoderKind::MeanpoolSkip if self.layer_sizes[0] != self.layer_sizes[1] => {
                Err(Error::config("mean-pooling skip encoder needs equal widths in layers 1 and 2"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-forward state: which parameters to read, whether they train, and the
/// batch statistics collected along the way.
pub struct ForwardCtx<'p> {
    pub params: &'p ParamSet,
    pub mode: Mode,
    trainable: bool,
    pub stats: Vec<StatUpdate>,
}

impl<'p> ForwardCtx<'p> {
    pub fn new(params: &'p ParamSet, mode: Mode) -> Self {
        Self { params, mode, trainable: true, stats: Vec::new() }
    }

    /// Parameters enter the tape as constants: no gradient reaches them.
    pub fn frozen(params: &'p ParamSet, mode: Mode) -> Self {
        Self { params, mode, trainable: false, stats: Vec::new() }
    }

    pub fn param(&self, tape: &mut Tape<'_>, name: &str) -> Result<Var> {
        if self.trainable {
            tape.param(self.params, name)
        } else {
            tape.frozen_param(self.params, name)
        }
    }

    /// Folds the collected batch statistics into the running buffers.
    pub fn apply_stats(&self, params: &mut ParamSet, decay: f64) -> Result<()> {
        apply_stats(&self.stats, params, decay)
    }
}

pub fn apply_stats(stats: &[StatUpdate], params: &mut ParamSet, decay: f64) -> Result<()> {
    for s in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let name = join(&s.prefix, suffix);
            let p = params.get_mut(&name).ok_or_else(|| Error::Structure(alloc::format!("missing buffer {name}")))?;
            for (r, b) in p.value.as_mut_slice().iter_mut().zip(batch) {
                *r = decay * *r + (1.0 - decay) * b;
            }
        }
    }
    Ok(())
}

pub(crate) fn init_norm(params: &mut ParamSet, prefix: &str, norm: NormLayer, width: usize) {
    if norm == NormLayer::None {
        return;
    }
    params.insert(join(prefix, "scale"), Matrix::filled(1, width, 1.0), ParamKind::NormScale);
    params.insert(join(prefix, "shift"), Matrix::zeros(1, width), ParamKind::NormShift);
    if norm == NormLayer::Batch {
        params.insert(join(prefix, "mean"), Matrix::zeros(1, width), ParamKind::Buffer);
        params.insert(join(prefix, "var"), Matrix::filled(1, width, 1.0), ParamKind::Buffer);
    }
}

pub(crate) fn init_activation(params: &mut ParamSet, prefix: &str, act: Activation) {
    if act == Activation::Prelu {
        params.insert(join(prefix, "slope"), Matrix::scalar(PRELU_INIT), ParamKind::Slope);
    }
}

/// Batch or layer normalization with learned scale and shift.
///
/// Batch norm standardizes each feature over the rows in the batch (in
/// training mode) or with the running statistics (in eval mode); layer norm
/// standardizes each row over its features. Variances are epsilon-guarded.
pub fn norm_forward(tape: &mut Tape<'_>, ctx: &mut ForwardCtx<'_>, prefix: &str, norm: NormLayer, x: Var) -> Result<Var> {
    let standardized = match norm {
        NormLayer::None => return Ok(x),
        NormLayer::Layer => tape.standardize_rows(x, NORM_EPS),
        NormLayer::Batch => match ctx.mode {
            Mode::Train => {
                let xv = tape.value(x);
                let mean = xv.col_means();
                let var = xv.col_vars(&mean);
                ctx.stats.push(StatUpdate { prefix: prefix.into(), mean, var });
                tape.standardize_cols(x, NORM_EPS)
            }
            Mode::Eval => {
                let mean = ctx.params.value(&join(prefix, "mean"))?;
                let var = ctx.params.value(&join(prefix, "var"))?;
                let inv = var.map(|v| 1.0 / libm::sqrt(v + NORM_EPS));
                let offset = mean.zip_map(&inv, |m, s| -m * s);
                let inv = tape.constant(inv);
                let offset = tape.constant(offset);
                let scaled = tape.mul_row(x, inv)?;
                tape.add_row(scaled, offset)?
            }
        },
    };
    let scale = ctx.param(tape, &join(prefix, "scale"))?;
    let shift = ctx.param(tape, &join(prefix, "shift"))?;
    let y = tape.mul_row(standardized, scale)?;
    tape.add_row(y, shift)
}

pub fn activation_forward(tape: &mut Tape<'_>, ctx: &ForwardCtx<'_>, prefix: &str, act: Activation, x: Var) -> Result<Var> {
    Ok(match act {
        Activation::Prelu => {
            let slope = ctx.param(tape, &join(prefix, "slope"))?;
            tape.prelu(x, slope)?
        }
        Activation::Elu => tape.elu(x),
        Activation::Relu => tape.relu(x),
        Activation::Linear => x,
    })
}

/// Dense layer `x·W + b`, optionally standardizing `W` per output unit first.
pub fn linear(tape: &mut Tape<'_>, ctx: &ForwardCtx<'_>, prefix: &str, x: Var, standardize: bool) -> Result<Var> {
    let mut w = ctx.param(tape, &join(prefix, "w"))?;
    if standardize {
        w = tape.standardize_cols(w, NORM_EPS);
    }
    let y = tape.matmul(x, w)?;
    let b = join(prefix, "b");
    if ctx.params.contains(&b) {
        let b = ctx.param(tape, &b)?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}
