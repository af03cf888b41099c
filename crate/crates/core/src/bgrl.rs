//! Bootstrapped latent training: an online encoder plus predictor learns to
//! predict, per node, the target encoder's embedding of the other view. The
//! target never receives gradients; it tracks the online weights by EMA.

use alloc::format;
use alloc::vec::Vec;

use crate::augment::{make_views, AugmentationConfig};
use crate::autograd::{MemCounter, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::diag::{embedding_spread, mean_embedding_norm};
use crate::graph::Dataset;
use crate::metrics::MetricsRecord;
use crate::nn::{apply_stats, Encoder, EncoderConfig, ForwardCtx, Mlp, MlpConfig, Mode};
use crate::optim::{learning_rate_at, tau_at, AdamWState, ScheduleConfig};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream};
use crate::tensor::{dot, Matrix};

/// Guard on cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

pub const PREDICTOR_PREFIX: &str = "pred";
pub const PROJECTOR_PREFIX: &str = "proj";

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BgrlConfig {
    pub encoder: EncoderConfig,
    pub predictor: MlpConfig,
    /// Optional projector after both encoders; off by default.
    pub projector: Option<MlpConfig>,
    pub augment: AugmentationConfig,
    pub schedule: ScheduleConfig,
    pub metrics_every: u64,
}

impl Default for BgrlConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            predictor: MlpConfig::default(),
            projector: None,
            augment: AugmentationConfig::default(),
            schedule: ScheduleConfig::default(),
            metrics_every: 50,
        }
    }
}

impl BgrlConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        if self.predictor.hidden == 0 || self.projector.is_some_and(|p| p.hidden == 0) {
            return Err(Error::config("predictor/projector hidden width must be positive"));
        }
        Ok(())
    }
}

/// `-(2/N) Σ_i cos(z_i, h_i)` on plain matrices.
pub fn bgrl_loss(z: &Matrix, h: &Matrix) -> Result<f64> {
    if z.shape() != h.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", z.shape(), h.shape())));
    }
    let n = z.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (z.row(i), h.row(i));
            let na = libm::sqrt(dot(a, a)).max(COSINE_EPS);
            let nb = libm::sqrt(dot(b, b)).max(COSINE_EPS);
            dot(a, b) / (na * nb)
        })
        .sum();
    Ok(-2.0 * total / n as f64)
}

/// Recorded version of [`bgrl_loss`]. `h` should be a constant on the tape.
pub fn bgrl_loss_var(tape: &mut Tape<'_>, z: Var, h: Var) -> Result<Var> {
    let cos = tape.row_cosine(z, h, COSINE_EPS)?;
    let mean = tape.mean(cos);
    Ok(tape.scale(mean, -2.0))
}

/// `φ ← τφ + (1-τ)θ` for every entry of `phi`, running statistics included.
pub fn ema_update(phi: &mut ParamSet, theta: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config(format!("EMA decay {tau} outside [0, 1]")));
    }
    for (name, p) in phi.iter() {
        let q = theta.get(name).ok_or_else(|| Error::Structure(format!("online parameters lack {name}")))?;
        if q.value.shape() != p.value.shape() {
            return Err(Error::Structure(format!("{name}: {:?} vs {:?}", p.value.shape(), q.value.shape())));
        }
    }
    for (name, p) in phi.iter_mut() {
        let q = &theta.get(name).expect("checked above").value;
        for (a, &b) in p.value.as_mut_slice().iter_mut().zip(q.as_slice()) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
    Ok(())
}

/// Everything a bootstrapped training run carries between steps.
#[derive(Debug, Clone)]
pub struct BgrlState {
    pub encoder: Encoder,
    pub predictor: Mlp,
    pub projector: Option<Mlp>,
    pub augment: AugmentationConfig,
    /// Encoder, predictor and (optional) projector weights.
    pub online: ParamSet,
    /// Encoder (and projector) weights only; never trained directly.
    pub target: ParamSet,
    pub optimizer: AdamWState,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub seed: u64,
}

impl BgrlState {
    /// Online and target weights are independent draws from the same
    /// initializer.
    pub fn new(cfg: &BgrlConfig, in_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), in_dim)?;
        let d = encoder.out_dim();
        let projector = cfg.projector.map(|p| Mlp::new(p, d, d, PROJECTOR_PREFIX));
        let predictor = Mlp::new(cfg.predictor, d, d, PREDICTOR_PREFIX);
        let mut online = encoder.init_params(derive_seed(seed, 0, stream::INIT_ONLINE));
        let mut target = encoder.init_params(derive_seed(seed, 0, stream::INIT_TARGET));
        if let Some(proj) = &projector {
            online.extend(proj.init_params(derive_seed(seed, 1, stream::INIT_ONLINE)));
            target.extend(proj.init_params(derive_seed(seed, 1, stream::INIT_TARGET)));
        }
        online.extend(predictor.init_params(derive_seed(seed, 2, stream::INIT_ONLINE)));
        Ok(Self {
            encoder,
            predictor,
            projector,
            augment: cfg.augment,
            online,
            target,
            optimizer: AdamWState::new(),
            schedule: cfg.schedule,
            step: 0,
            seed,
        })
    }

    /// Online encoder weights: the representation used downstream.
    pub fn encoder_params(&self) -> ParamSet {
        self.online.subset(&format!("{}.", self.encoder.prefix))
    }

    /// Replaces the target weights with a copy of the online ones.
    pub fn sync_target(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, 0.0)
    }

    pub(crate) fn represent<'g>(
        &self,
        tape: &mut Tape<'g>,
        ctx: &mut ForwardCtx<'_>,
        adj: &'g crate::graph::NormalizedGraph,
        x: Var,
    ) -> Result<(Var, Var)> {
        let h = self.encoder.forward(tape, ctx, adj, x)?.out;
        let r = match &self.projector {
            Some(p) => p.forward(tape, ctx, h)?,
            None => h,
        };
        Ok((h, r))
    }

    /// One update step with a fresh counter; `peak_bytes` is filled in.
    pub fn update_step(&mut self, dataset: &Dataset) -> Result<MetricsRecord> {
        let counter = MemCounter::new();
        let mut rec = self.update_step_counted(dataset, &counter)?;
        rec.peak_bytes = counter.peak() as u64;
        Ok(rec)
    }

    /// Two views; online prediction of each view's target embedding of the
    /// other view; symmetrized loss; AdamW on the online weights; EMA of the
    /// target.
    pub fn update_step_counted(&mut self, dataset: &Dataset, counter: &MemCounter) -> Result<MetricsRecord> {
        if self.step >= self.schedule.n_total {
            return Err(Error::config(format!("step {} is past n_total {}", self.step, self.schedule.n_total)));
        }
        let (v1, v2) = make_views(&dataset.graph, &dataset.features, &self.augment, self.seed, self.step);
        let adj1 = self.encoder.prepare(&v1.graph);
        let adj2 = self.encoder.prepare(&v2.graph);

        let (loss, h1_value, stats) = {
            let mut tape = Tape::with_counter(counter);
            let x1 = tape.constant(v1.features.to_matrix());
            let x2 = tape.constant(v2.features.to_matrix());

            let mut target_ctx = ForwardCtx::frozen(&self.target, Mode::Eval);
            let (_, t1) = self.represent(&mut tape, &mut target_ctx, &adj1, x1)?;
            let (_, t2) = self.represent(&mut tape, &mut target_ctx, &adj2, x2)?;

            let mut online_ctx = ForwardCtx::new(&self.online, Mode::Train);
            let (h1, r1) = self.represent(&mut tape, &mut online_ctx, &adj1, x1)?;
            let (_, r2) = self.represent(&mut tape, &mut online_ctx, &adj2, x2)?;
            let z1 = self.predictor.forward(&mut tape, &mut online_ctx, r1)?;
            let z2 = self.predictor.forward(&mut tape, &mut online_ctx, r2)?;

            let a = bgrl_loss_var(&mut tape, z1, t2)?;
            let b = bgrl_loss_var(&mut tape, z2, t1)?;
            let sum = tape.add(a, b)?;
            let total = tape.scale(sum, 0.5);
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", self.step)));
            }
            let grads = tape.backward(total)?;
            let stats = online_ctx.stats;
            grads.accumulate_into(&mut self.online)?;
            (loss, tape.value(h1).clone(), stats)
        };

        let lr = learning_rate_at(self.step, &self.schedule);
        let tau = tau_at(self.step, &self.schedule);
        self.optimizer.step(&mut self.online, lr, self.schedule.weight_decay)?;
        apply_stats(&stats, &mut self.online, self.encoder.config.norm_decay)?;
        ema_update(&mut self.target, &self.online, tau)?;

        let rec = MetricsRecord {
            step: self.step,
            loss,
            loss_shifted: 2.0 + loss,
            lr,
            tau,
            spread: embedding_spread(&h1_value),
            norm: mean_embedding_norm(&h1_value),
            peak_bytes: 0,
            val_acc: None,
        };
        self.step += 1;
        Ok(rec)
    }
}

/// Full-graph training for `n_total` steps. Records every `metrics_every`
/// steps (and the last step) are passed to `sink` and returned.
pub fn train_bgrl(
    dataset: &Dataset,
    cfg: &BgrlConfig,
    seed: u64,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<(BgrlState, Vec<MetricsRecord>)> {
    let mut state = BgrlState::new(cfg, dataset.feature_dim(), seed)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmConfig};
    use crate::nn::{Activation, NormLayer};

    #[test]
    fn loss_landmarks() {
        let z = Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        assert!((bgrl_loss(&z, &z).unwrap() + 2.0).abs() < 1e-12);
        let o = Matrix::from_rows(&[&[-2.0, 1.0], &[0.5, 3.0]]);
        assert!(bgrl_loss(&z, &o).unwrap().abs() < 1e-12);
        // Hand computation: each row has cosine 1/√2.
        let h = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let e = Matrix::identity(2);
        assert!((bgrl_loss(&e, &h).unwrap() + core::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(bgrl_loss(&e, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn ema_extremes() {
        let mut phi = ParamSet::new();
        phi.insert("w", Matrix::scalar(1.0), crate::params::ParamKind::Weight);
        let mut theta = ParamSet::new();
        theta.insert("w", Matrix::scalar(0.0), crate::params::ParamKind::Weight);
        theta.insert("extra", Matrix::scalar(5.0), crate::params::ParamKind::Weight);
        let mut a = phi.clone();
        ema_update(&mut a, &theta, 0.99).unwrap();
        assert!((a.value("w").unwrap().item() - 0.99).abs() < 1e-15);
        let mut b = phi.clone();
        ema_update(&mut b, &theta, 1.0).unwrap();
        assert_eq!(b, phi);
        let mut c = phi.clone();
        ema_update(&mut c, &theta, 0.0).unwrap();
        assert_eq!(c.value("w").unwrap().item(), 0.0);
        let mut d = theta.clone();
        assert!(matches!(ema_update(&mut d, &phi, 0.5), Err(Error::Structure(_))));
    }

    fn small() -> (Dataset, BgrlConfig) {
        let ds = generate_sbm(&SbmConfig { nodes_per_block: 8, feature_dim: 8, ..Default::default() }).unwrap();
        let cfg = BgrlConfig {
            encoder: EncoderConfig { layer_sizes: alloc::vec![16, 8], ..Default::default() },
            predictor: MlpConfig { hidden: 16, ..Default::default() },
            schedule: ScheduleConfig { eta_base: 0.01, n_total: 20, n_warmup: 2, ..Default::default() },
            metrics_every: 5,
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn identical_views_and_networks_give_minus_two() {
        let (ds, mut cfg) = small();
        cfg.augment = AugmentationConfig::NONE;
        cfg.encoder.norm = NormLayer::None;
        cfg.predictor = MlpConfig { hidden: 8, activation: Activation::Linear, batch_norm: false };
        let mut s = BgrlState::new(&cfg, ds.feature_dim(), 3).unwrap();
        s.sync_target().unwrap();
        // Predictor as the identity map.
        s.online.set_value("pred.l0.w", Matrix::identity(8)).unwrap();
        s.online.set_value("pred.l1.w", Matrix::identity(8)).unwrap();
        let rec = s.update_step(&ds).unwrap();
        assert!((rec.loss + 2.0).abs() < 1e-12, "{}", rec.loss);
    }

    #[test]
    fn unit_tau_freezes_target() {
        let (ds, mut cfg) = small();
        cfg.schedule.tau_base = 1.0;
        let mut s = BgrlState::new(&cfg, ds.feature_dim(), 1).unwrap();
        let before = s.target.clone();
        for _ in 0..5 {
            s.update_step(&ds).unwrap();
        }
        assert_eq!(s.target, before);
        assert_ne!(s.encoder_params(), BgrlState::new(&cfg, ds.feature_dim(), 1).unwrap().encoder_params());
    }

    #[test]
    fn training_is_deterministic_and_logs_on_cadence() {
        let (ds, cfg) = small();
        let (a, log) = train_bgrl(&ds, &cfg, 7, |_| {}).unwrap();
        let (b, _) = train_bgrl(&ds, &cfg, 7, |_| {}).unwrap();
        assert_eq!(a.online, b.online);
        assert_eq!(a.target, b.target);
        let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
        assert_eq!(steps, alloc::vec![0, 5, 10, 15, 19]);
        assert!(log.iter().all(|r| (-2.0..=2.0).contains(&r.loss)));
        assert!((log.last().unwrap().tau - tau_at(19, &cfg.schedule)).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (ds, mut cfg) = small();
        cfg.schedule.n_total = 0;
        cfg.schedule.n_warmup = 0;
        let (s, log) = train_bgrl(&ds, &cfg, 2, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(s.online, BgrlState::new(&cfg, ds.feature_dim(), 2).unwrap().online);
    }

    #[test]
    fn projector_variant_trains() {
        let (ds, mut cfg) = small();
        cfg.projector = Some(MlpConfig { hidden: 8, ..Default::default() });
        let (s, log) = train_bgrl(&ds, &cfg, 0, |_| {}).unwrap();
        assert!(s.target.contains("proj.l0.w"));
        assert!(!s.encoder_params().contains("proj.l0.w"));
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }
}
