//! Contrastive baseline: InfoNCE between the two views' projected node
//! embeddings, with every other node or `k` sampled nodes as negatives.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;

use crate::augment::{make_views, AugmentationConfig};
use crate::autograd::{MemCounter, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::diag::{embedding_spread, mean_embedding_norm};
use crate::graph::Dataset;
use crate::metrics::MetricsRecord;
use crate::nn::{apply_stats, Activation, Encoder, EncoderConfig, ForwardCtx, Mlp, MlpConfig, Mode};
use crate::optim::{learning_rate_at, AdamWState, ScheduleConfig};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream, stream_rng, Rng};
use crate::tensor::Matrix;

pub const NORMALIZE_EPS: f64 = 1e-8;
pub const DEFAULT_FULL_CAP: usize = 20_000;

/// Negatives per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negatives {
    /// Every other node, in both views.
    All,
    /// `k` nodes drawn per node per step.
    K(usize),
}

impl Negatives {
    /// Per-node count on a graph of `n` nodes, clamped to `n - 1`.
    pub fn effective(self, n: usize) -> usize {
        let max = n.saturating_sub(1);
        match self {
            Negatives::All => max,
            Negatives::K(k) => {
                if k > max {
                    log::warn!("k = {k} negatives exceeds N - 1 = {max}; clamping");
                }
                k.min(max)
            }
        }
    }
}

impl fmt::Display for Negatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Negatives::All => f.write_str("all"),
            Negatives::K(k) => write!(f, "{k}"),
        }
    }
}

impl core::str::FromStr for Negatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Negatives::All);
        }
        s.parse::<usize>()
            .map(Negatives::K)
            .map_err(|_| Error::config(format!("negatives must be an integer or \"all\", got {s:?}")))
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Negatives {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            Negatives::All => s.serialize_str("all"),
            Negatives::K(k) => s.serialize_u64(*k as u64),
        }
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Negatives {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Negatives;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a nonnegative integer or \"all\"")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> core::result::Result<Negatives, E> {
                Ok(Negatives::K(v as usize))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> core::result::Result<Negatives, E> {
                usize::try_from(v).map(Negatives::K).map_err(|_| E::custom("negative k"))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> core::result::Result<Negatives, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GraceConfig {
    #[cfg_attr(feature = "serde", serde(rename = "k"))]
    pub negatives: Negatives,
    pub temperature: f64,
    pub projector_hidden: usize,
    /// Largest graph on which the all-pairs objective is attempted.
    pub full_cap: usize,
}

impl Default for GraceConfig {
    fn default() -> Self {
        Self { negatives: Negatives::All, temperature: 0.5, projector_hidden: 128, full_cap: DEFAULT_FULL_CAP }
    }
}

impl GraceConfig {
    pub fn validate(&self) -> Result<()> {
        if let Negatives::K(k) = self.negatives {
            if k < 2 {
                return Err(Error::config(format!("grace.k = {k}; need at least 2")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("grace.temperature = {} must be positive", self.temperature)));
        }
        if self.projector_hidden == 0 {
            return Err(Error::config("grace.projector_hidden must be positive"));
        }
        Ok(())
    }

    fn projector(&self) -> MlpConfig {
        MlpConfig { hidden: self.projector_hidden, activation: Activation::Elu, batch_norm: false }
    }
}

/// Draws, for every node `i < n`, `k` distinct nodes other than `i`.
/// Returned row-major as an `n×k` table.
pub fn sample_negatives(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let k = k.min(n.saturating_sub(1));
    let mut table = Vec::with_capacity(n * k);
    for i in 0..n {
        table.extend(index::sample(rng, n - 1, k).into_iter().map(|j| j + usize::from(j >= i)));
    }
    table
}

/// One direction of the objective, anchored on `a`: for each node the
/// positive is `b_i`, the negatives are `b_j` and `a_j` for every sampled
/// `j` (or all `j ≠ i`). Inputs must already be unit rows.
fn directional(tape: &mut Tape<'_>, a: Var, b: Var, table: Option<&[usize]>, k: usize, t: f64) -> Result<Var> {
    let n = tape.shape(a).0;
    match table {
        None => {
            let inter = tape.matmul_nt(a, b)?;
            let intra = tape.matmul_nt(a, a)?;
            let logits = tape.concat_cols(&[inter, intra])?;
            let logits = tape.scale(logits, 1.0 / t);
            let mut valid = alloc::vec![true; n * 2 * n];
            for i in 0..n {
                valid[i * 2 * n + n + i] = false;
            }
            let targets: Vec<usize> = (0..n).collect();
            tape.cross_entropy(logits, &targets, Some(&valid))
        }
        Some(idx) => {
            let own: Vec<usize> = (0..n).collect();
            let pos = tape.gather_dot(a, b, &own, 1)?;
            let inter = tape.gather_dot(a, b, idx, k)?;
            let intra = tape.gather_dot(a, a, idx, k)?;
            let logits = tape.concat_cols(&[pos, inter, intra])?;
            let logits = tape.scale(logits, 1.0 / t);
            tape.cross_entropy(logits, &alloc::vec![0; n], None)
        }
    }
}

/// Symmetrized InfoNCE on the tape. One negative table (when subsampling)
/// serves both view orders.
pub fn grace_loss_var(
    tape: &mut Tape<'_>,
    u: Var,
    v: Var,
    negatives: Negatives,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let (su, sv) = (tape.shape(u), tape.shape(v));
    if su != sv {
        return Err(Error::Shape(format!("views {su:?} vs {sv:?}")));
    }
    let n = su.0;
    let k = negatives.effective(n);
    let table = match negatives {
        Negatives::All => None,
        Negatives::K(_) => Some(sample_negatives(n, k, rng)),
    };
    let un = tape.l2_normalize_rows(u, NORMALIZE_EPS);
    let vn = tape.l2_normalize_rows(v, NORMALIZE_EPS);
    let l1 = directional(tape, un, vn, table.as_deref(), k, temperature)?;
    let l2 = directional(tape, vn, un, table.as_deref(), k, temperature)?;
    let sum = tape.add(l1, l2)?;
    Ok(tape.scale(sum, 0.5))
}

/// Value of the symmetrized objective on plain matrices.
pub fn grace_loss(u: &Matrix, v: &Matrix, cfg: &GraceConfig, rng: &mut Rng) -> Result<f64> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(u.clone()), tape.constant(v.clone()));
    let l = grace_loss_var(&mut tape, a, b, cfg.negatives, cfg.temperature, rng)?;
    Ok(tape.value(l).item())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GraceTrainConfig {
    pub encoder: EncoderConfig,
    pub grace: GraceConfig,
    pub augment: AugmentationConfig,
    pub schedule: ScheduleConfig,
    pub metrics_every: u64,
}

impl Default for GraceTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            grace: GraceConfig::default(),
            augment: AugmentationConfig::default(),
            schedule: ScheduleConfig::default(),
            metrics_every: 50,
        }
    }
}

impl GraceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.grace.validate()?;
        self.augment.validate()?;
        self.schedule.validate()
    }
}

/// A single shared encoder followed by the projector.
#[derive(Debug, Clone)]
pub struct GraceState {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub grace: GraceConfig,
    pub augment: AugmentationConfig,
    pub params: ParamSet,
    pub optimizer: AdamWState,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub seed: u64,
}

impl GraceState {
    pub fn new(cfg: &GraceTrainConfig, in_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), in_dim)?;
        let d = encoder.out_dim();
        let projector = Mlp::new(cfg.grace.projector(), d, d, crate::bgrl::PROJECTOR_PREFIX);
        let mut params = encoder.init_params(derive_seed(seed, 0, stream::INIT_ONLINE));
        params.extend(projector.init_params(derive_seed(seed, 1, stream::INIT_ONLINE)));
        Ok(Self {
            encoder,
            projector,
            grace: cfg.grace,
            augment: cfg.augment,
            params,
            optimizer: AdamWState::new(),
            schedule: cfg.schedule,
            step: 0,
            seed,
        })
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.subset(&format!("{}.", self.encoder.prefix))
    }

    /// Refuses the all-pairs objective above the configured size.
    pub fn check_size(&self, n: usize) -> Result<()> {
        if self.grace.negatives == Negatives::All && n > self.grace.full_cap {
            return Err(Error::Refused(format!(
                "all-pairs contrastive loss on {n} nodes exceeds the cap of {}; use a finite k",
                self.grace.full_cap
            )));
        }
        Ok(())
    }

    pub fn update_step(&mut self, dataset: &Dataset) -> Result<MetricsRecord> {
        let counter = MemCounter::new();
        let mut rec = self.update_step_counted(dataset, &counter)?;
        rec.peak_bytes = counter.peak() as u64;
        Ok(rec)
    }

    pub fn update_step_counted(&mut self, dataset: &Dataset, counter: &MemCounter) -> Result<MetricsRecord> {
        self.check_size(dataset.num_nodes())?;
        if self.step >= self.schedule.n_total {
            return Err(Error::config(format!("step {} is past n_total {}", self.step, self.schedule.n_total)));
        }
        let (v1, v2) = make_views(&dataset.graph, &dataset.features, &self.augment, self.seed, self.step);
        let adj1 = self.encoder.prepare(&v1.graph);
        let adj2 = self.encoder.prepare(&v2.graph);
        let mut neg_rng = stream_rng(self.seed, self.step, stream::NEGATIVES);

        let (loss, h1_value, stats) = {
            let mut tape = Tape::with_counter(counter);
            let x1 = tape.constant(v1.features.to_matrix());
            let x2 = tape.constant(v2.features.to_matrix());
            let mut ctx = ForwardCtx::new(&self.params, Mode::Train);
            let h1 = self.encoder.forward(&mut tape, &mut ctx, &adj1, x1)?.out;
            let h2 = self.encoder.forward(&mut tape, &mut ctx, &adj2, x2)?.out;
            let u = self.projector.forward(&mut tape, &mut ctx, h1)?;
            let v = self.projector.forward(&mut tape, &mut ctx, h2)?;
            let total = grace_loss_var(&mut tape, u, v, self.grace.negatives, self.grace.temperature, &mut neg_rng)?;
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", self.step)));
            }
            let grads = tape.backward(total)?;
            let stats = ctx.stats;
            grads.accumulate_into(&mut self.params)?;
            (loss, tape.value(h1).clone(), stats)
        };

        let lr = learning_rate_at(self.step, &self.schedule);
        self.optimizer.step(&mut self.params, lr, self.schedule.weight_decay)?;
        apply_stats(&stats, &mut self.params, self.encoder.config.norm_decay)?;
        let rec = MetricsRecord {
            step: self.step,
            loss,
            loss_shifted: loss,
            lr,
            tau: 0.0,
            spread: embedding_spread(&h1_value),
            norm: mean_embedding_norm(&h1_value),
            peak_bytes: 0,
            val_acc: None,
        };
        self.step += 1;
        Ok(rec)
    }
}

pub fn train_grace(
    dataset: &Dataset,
    cfg: &GraceTrainConfig,
    seed: u64,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<(GraceState, Vec<MetricsRecord>)> {
    let mut state = GraceState::new(cfg, dataset.feature_dim(), seed)?;
    state.check_size(dataset.num_nodes())?;
    let every = cfg.metrics_every.max(1);
    let mut log = Vec::new();
    while state.step < cfg.schedule.n_total {
        let rec = state.update_step(dataset)?;
        if rec.step % every == 0 || rec.step + 1 == cfg.schedule.n_total {
            sink(&rec);
            log.push(rec);
        }
    }
    Ok((state, log))
}
