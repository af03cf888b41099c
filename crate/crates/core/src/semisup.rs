//! Semi-supervised minibatch training: cross-entropy on labeled central
//! nodes plus, optionally, the bootstrapped objective on every central node
//! of two augmented copies of the sampled subgraph.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;

use crate::augment::{make_views, AugmentationConfig, View};
use crate::autograd::{MemCounter, Tape};
use crate::bgrl::{bgrl_loss_var, ema_update, BgrlConfig, BgrlState};
use crate::error::{Error, Result};
use crate::eval::diag::{embedding_spread, mean_embedding_norm};
use crate::graph::{Dataset, NormalizedGraph};
use crate::metrics::MetricsRecord;
use crate::nn::{apply_stats, ForwardCtx, Mode};
use crate::optim::{learning_rate_at, tau_at};
use crate::params::{glorot_uniform, ParamKind};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::sampling::{sample_neighborhood, FanoutSpec, Subgraph};
use crate::tensor::Matrix;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BatchSpec {
    /// Labeled central nodes per batch.
    pub labeled: usize,
    /// Unlabeled centrals per labeled one.
    pub ratio: f64,
    /// Weight of the bootstrapped term.
    pub aux_weight: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { labeled: 256, ratio: 2.0, aux_weight: 1.0 }
    }
}

impl BatchSpec {
    /// Labeled-only cross-entropy.
    pub fn supervised(labeled: usize) -> Self {
        Self { labeled, ratio: 0.0, aux_weight: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled == 0 {
            return Err(Error::config("batch.labeled must be at least 1"));
        }
        if !(self.ratio >= 0.0) || !self.ratio.is_finite() {
            return Err(Error::config(format!("batch.ratio = {} must be nonnegative", self.ratio)));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::config(format!("batch.aux_weight = {} must be nonnegative", self.aux_weight)));
        }
        Ok(())
    }

    pub fn unlabeled(&self) -> usize {
        libm::round(self.ratio * self.labeled as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SemisupConfig {
    pub bgrl: BgrlConfig,
    pub batch: BatchSpec,
    pub fanout: FanoutSpec,
}

impl Default for SemisupConfig {
    fn default() -> Self {
        Self { bgrl: BgrlConfig::default(), batch: BatchSpec::default(), fanout: FanoutSpec::default() }
    }
}

impl SemisupConfig {
    pub fn validate(&self) -> Result<()> {
        self.bgrl.validate()?;
        self.batch.validate()?;
        self.fanout.validate()
    }
}

/// Everything one step consumes that does not depend on the weights. It is
/// a pure function of `(seed, step)`, so it can be built ahead of time on
/// another thread.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub step: u64,
    /// Labeled centrals occupy local ids `0..targets.len()`.
    pub targets: Vec<usize>,
    pub subgraph: Subgraph,
    /// Present only when the bootstrapped term is on.
    pub views: Option<(View, View)>,
}

/// Draws centrals (labeled ones from the training split, unlabeled ones
/// from the remaining nodes), samples their neighborhood and, if needed,
/// the two augmented views of it.
pub fn prepare_batch(
    dataset: &Dataset,
    batch: &BatchSpec,
    fanout: &FanoutSpec,
    augment: &AugmentationConfig,
    seed: u64,
    step: u64,
) -> Result<PreparedBatch> {
    batch.validate()?;
    let mut rng = stream_rng(seed, step, stream::BATCH);
    let labeled: Vec<usize> = dataset.splits.train_indices().into_iter().filter(|&i| dataset.labels[i] >= 0).collect();
    if labeled.is_empty() {
        return Err(Error::config("no labeled training nodes"));
    }
    let mut seeds: Vec<usize> = index::sample(&mut rng, labeled.len(), batch.labeled.min(labeled.len()))
        .into_iter()
        .map(|k| labeled[k])
        .collect();
    let targets: Vec<usize> = seeds.iter().map(|&i| dataset.labels[i] as usize).collect();
    let want = batch.unlabeled();
    if want > 0 {
        let pool: Vec<usize> = (0..dataset.num_nodes()).filter(|&i| !dataset.splits.train[i]).collect();
        seeds.extend(index::sample(&mut rng, pool.len(), want.min(pool.len())).into_iter().map(|k| pool[k]));
    }
    let mut nrng = stream_rng(seed, step, stream::NEIGHBORS);
    let subgraph = sample_neighborhood(&dataset.graph, &dataset.features, &seeds, fanout, &mut nrng)?;
    let views = (batch.aux_weight > 0.0).then(|| make_views(&subgraph.graph, &subgraph.features, augment, seed, step));
    Ok(PreparedBatch { step, targets, subgraph, views })
}

/// Bootstrapped state plus a linear classifier head in the online set.
#[derive(Debug, Clone)]
pub struct SemisupState {
    pub bgrl: BgrlState,
    pub batch: BatchSpec,
    pub fanout: FanoutSpec,
    pub num_classes: usize,
}

impl SemisupState {
    pub fn new(cfg: &SemisupConfig, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Degenerate(format!("{num_classes} classes")));
        }
        let mut bgrl = BgrlState::new(&cfg.bgrl, in_dim, seed)?;
        let d = bgrl.encoder.out_dim();
        let mut r = crate::rng::seeded(derive_seed(seed, 0, stream::INIT_HEAD));
        bgrl.online.insert(HEAD_W, glorot_uniform(d, num_classes, &mut r), ParamKind::Weight);
        bgrl.online.insert(HEAD_B, Matrix::zeros(1, num_classes), ParamKind::Bias);
        Ok(Self { bgrl, batch: cfg.batch, fanout: cfg.fanout.clone(), num_classes })
    }

    pub fn step(&self) -> u64 {
        self.bgrl.step
    }

    pub fn prepare(&self, dataset: &Dataset) -> Result<PreparedBatch> {
        prepare_batch(dataset, &self.batch, &self.fanout, &self.bgrl.augment, self.bgrl.seed, self.bgrl.step)
    }

    /// One combined step with this state's batch settings.
    pub fn semisup_step(&mut self, dataset: &Dataset) -> Result<MetricsRecord> {
        let prepared = self.prepare(dataset)?;
        self.step_prepared(&prepared, &MemCounter::new())
    }

    /// Cross-entropy only, on a labeled-only batch of the same size.
    pub fn supervised_step(&mut self, dataset: &Dataset) -> Result<MetricsRecord> {
        let batch = BatchSpec::supervised(self.batch.labeled);
        let prepared = prepare_batch(dataset, &batch, &self.fanout, &self.bgrl.augment, self.bgrl.seed, self.bgrl.step)?;
        self.step_prepared(&prepared, &MemCounter::new())
    }

    pub fn step_prepared(&mut self, batch: &PreparedBatch, counter: &MemCounter) -> Result<MetricsRecord> {
        let s = &mut self.bgrl;
        if batch.step != s.step {
            return Err(Error::config(format!("batch prepared for step {} applied at step {}", batch.step, s.step)));
        }
        if s.step >= s.schedule.n_total {
            return Err(Error::config(format!("step {} is past n_total {}", s.step, s.schedule.n_total)));
        }
        if batch.targets.iter().any(|&c| c >= self.num_classes) {
            return Err(Error::config("label outside the classifier range"));
        }
        let sub = &batch.subgraph;
        let adj = s.encoder.prepare(&sub.graph);
        let view_adj: Option<(NormalizedGraph, NormalizedGraph)> =
            batch.views.as_ref().map(|(a, b)| (s.encoder.prepare(&a.graph), s.encoder.prepare(&b.graph)));
        let lambda = if batch.views.is_some() { self.batch.aux_weight } else { 0.0 };

        let (loss, h_value, stats) = {
            let mut tape = Tape::with_counter(counter);
            let mut ctx = ForwardCtx::new(&s.online, Mode::Train);
            let x = tape.constant(sub.features.to_matrix());
            let h = s.encoder.forward(&mut tape, &mut ctx, &adj, x)?.out;
            let labeled: Vec<usize> = (0..batch.targets.len()).collect();
            let hl = tape.select_rows(h, &labeled)?;
            let w = ctx.param(&mut tape, HEAD_W)?;
            let b = ctx.param(&mut tape, HEAD_B)?;
            let logits = tape.matmul(hl, w)?;
            let logits = tape.add_row(logits, b)?;
            let mut total = tape.cross_entropy(logits, &batch.targets, None)?;

            if let (Some((v1, v2)), Some((adj1, adj2))) = (&batch.views, &view_adj) {
                let central: Vec<usize> = (0..sub.num_central).collect();
                let x1 = tape.constant(v1.features.to_matrix());
                let x2 = tape.constant(v2.features.to_matrix());
                let mut target_ctx = ForwardCtx::frozen(&s.target, Mode::Eval);
                let (_, t1) = s.represent(&mut tape, &mut target_ctx, adj1, x1)?;
                let (_, t2) = s.represent(&mut tape, &mut target_ctx, adj2, x2)?;
                let (_, r1) = s.represent(&mut tape, &mut ctx, adj1, x1)?;
                let (_, r2) = s.represent(&mut tape, &mut ctx, adj2, x2)?;
                let z1 = s.predictor.forward(&mut tape, &mut ctx, r1)?;
                let z2 = s.predictor.forward(&mut tape, &mut ctx, r2)?;
                let [z1, z2, t1, t2] = [z1, z2, t1, t2].map(|v| tape.select_rows(v, &central));
                let a = bgrl_loss_var(&mut tape, z1?, t2?)?;
                let c = bgrl_loss_var(&mut tape, z2?, t1?)?;
                let aux = tape.add(a, c)?;
                let aux = tape.scale(aux, 0.5 * lambda);
                total = tape.add(total, aux)?;
            }
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", s.step)));
            }
            let grads = tape.backward(total)?;
            let stats = ctx.stats;
            grads.accumulate_into(&mut s.online)?;
            (loss, tape.value(h).clone(), stats)
        };

        let lr = learning_rate_at(s.step, &s.schedule);
        let tau = tau_at(s.step, &s.schedule);
        s.optimizer.step(&mut s.online, lr, s.schedule.weight_decay)?;
        apply_stats(&stats, &mut s.online, s.encoder.config.norm_decay)?;
        ema_update(&mut s.target, &s.online, tau)?;
        let rec = MetricsRecord {
            step: s.step,
            loss,
            loss_shifted: loss,
            lr,
            tau,
            spread: embedding_spread(&h_value),
            norm: mean_embedding_norm(&h_value),
            peak_bytes: counter.peak() as u64,
            val_acc: None,
        };
        s.step += 1;
        Ok(rec)
    }

    /// Full-graph class scores from the online encoder in eval mode.
    pub fn logits(&self, dataset: &Dataset) -> Result<Matrix> {
        let s = &self.bgrl;
        let adj = s.encoder.prepare(&dataset.graph);
        let h = s.encoder.embed(&s.online, &adj, &dataset.features.to_matrix(), Mode::Eval)?;
        let mut z = h.matmul(s.online.value(HEAD_W)?);
        let b = s.online.value(HEAD_B)?;
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(b.row(0)).for_each(|(v, c)| *v += c);
        }
        Ok(z)
    }

    /// Accuracy over the labeled members of `nodes`; zero if there are none.
    pub fn accuracy(&self, dataset: &Dataset, nodes: &[usize]) -> Result<f64> {
        let z = self.logits(dataset)?;
        let scored: Vec<usize> = nodes.iter().copied().filter(|&i| dataset.labels[i] >= 0).collect();
        if scored.is_empty() {
            return Ok(0.0);
        }
        let hits = scored
            .iter()
            .filter(|&&i| {
                let row = z.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best as i64 == dataset.labels[i]
            })
            .count();
        Ok(hits as f64 / scored.len() as f64)
    }
}

/// Runs `n_total` combined steps, evaluating validation accuracy on the
/// metrics cadence and at the last step.
pub fn train_semisup(
    dataset: &Dataset,
    cfg: &SemisupConfig,
    seed: u64,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<(SemisupState, Vec<MetricsRecord>)> {
    let mut state = SemisupState::new(cfg, dataset.feature_dim(), dataset.num_classes(), seed)?;
    let val = dataset.splits.val_indices();
    let every = cfg.bgrl.metrics_every.max(1);
    let mut log = Vec::new();
    while state.step() < cfg.bgrl.schedule.n_total {
        let mut rec = state.semisup_step(dataset)?;
        if rec.step % every == 0 || rec.step + 1 == cfg.bgrl.schedule.n_total {
            rec.val_acc = Some(state.accuracy(dataset, &val)?);
            sink(&rec);
            log.push(rec);
        }
    }
    Ok((state, log))
}
