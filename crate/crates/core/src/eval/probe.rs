//! Linear evaluation of frozen embeddings: multinomial logistic regression
//! on the training nodes, regularizer chosen by validation accuracy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Dataset, SplitMask};
use crate::nn::{Encoder, EncoderConfig, Mode};
use crate::optim::{ADAM_EPS, BETA1, BETA2};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream};
use crate::tensor::{norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProbeMode {
    /// Inverse-regularization grid `C ∈ {2⁻¹⁰, 2⁻⁹, …, 2¹⁰}`, each fit to
    /// convergence.
    GridFull,
    /// Weight-decay grid `{2⁻¹⁰, 2⁻⁸, …, 2¹⁰}`, each fit with a fixed budget
    /// of AdamW steps.
    GdFast,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    /// Regularizer grid; `C` for the full mode, weight decay for the fast one.
    pub grid: Vec<f64>,
    /// Gradient-norm stopping tolerance of the full solver.
    pub tolerance: f64,
    pub max_iters: usize,
    pub gd_steps: usize,
    pub gd_lr: f64,
}

fn pow2_grid(step: usize) -> Vec<f64> {
    (-10i32..=10).step_by(step).map(|e| libm::pow(2.0, e as f64)).collect()
}

impl ProbeConfig {
    pub fn grid_full() -> Self {
        Self { mode: ProbeMode::GridFull, grid: pow2_grid(1), tolerance: 1e-6, max_iters: 5000, gd_steps: 100, gd_lr: 0.01 }
    }

    pub fn gd_fast() -> Self {
        Self { mode: ProbeMode::GdFast, grid: pow2_grid(2), ..Self::grid_full() }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::grid_full()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeResult {
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Selected grid value.
    pub regularizer: f64,
}

/// Multinomial logistic model with an unregularized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearModel {
    fn zeros(d: usize, c: usize) -> Self {
        Self { w: Matrix::zeros(d, c), b: vec![0.0; c] }
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&self.w);
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
        }
        z
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let z = self.logits(x);
        (0..z.rows()).map(|i| argmax(z.row(i))).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best }).0
}

/// Mean cross-entropy and its gradient w.r.t. (W, b).
fn data_loss(model: &LinearModel, x: &Matrix, y: &[usize]) -> (f64, Matrix, Vec<f64>) {
    let n = x.rows() as f64;
    let mut g = model.logits(x);
    let mut loss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let row = g.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            z += *v;
        }
        loss += libm::log(z) - libm::log(row[yi]);
        for v in row.iter_mut() {
            *v /= z * n;
        }
        row[yi] -= 1.0 / n;
    }
    let gw = x.matmul_tn(&g);
    let gb = (0..g.cols()).map(|j| (0..g.rows()).map(|i| g[(i, j)]).sum()).collect();
    (loss / n, gw, gb)
}

/// Minimizes `(1/n) Σ CE + ‖W‖² / (2Cn)` by accelerated gradient descent
/// with adaptive restart. The objective is smooth and strongly convex in
/// W, so the iterates converge to the unique minimizer.
pub fn fit_logistic(x: &Matrix, y: &[usize], classes: usize, c: f64, tol: f64, max_iters: usize) -> LinearModel {
    let (n, d) = x.shape();
    let lambda = 1.0 / (c * n as f64);
    let mean_sq = (0..n).map(|i| { let r = norm2(x.row(i)); r * r + 1.0 }).sum::<f64>() / n as f64;
    let step = 1.0 / (0.5 * mean_sq + lambda);
    let objective = |m: &LinearModel| -> (f64, Matrix, Vec<f64>) {
        let (l, mut gw, gb) = data_loss(m, x, y);
        gw.axpy(lambda, &m.w);
        (l + 0.5 * lambda * m.w.as_slice().iter().map(|v| v * v).sum::<f64>(), gw, gb)
    };
    let mut current = LinearModel::zeros(d, classes);
    let mut look = current.clone();
    let mut t = 1.0f64;
    let mut last = f64::INFINITY;
    for _ in 0..max_iters {
        let (_, gw, gb) = objective(&look);
        let gnorm = libm::sqrt(gw.as_slice().iter().chain(&gb).map(|v| v * v).sum::<f64>());
        if gnorm < tol {
            return look;
        }
        let mut next = look.clone();
        next.w.axpy(-step, &gw);
        next.b.iter_mut().zip(&gb).for_each(|(v, g)| *v -= step * g);
        let (f_next, _, _) = objective(&next);
        if f_next > last {
            // Momentum overshot: restart from the last accepted point.
            t = 1.0;
            look = current.clone();
            last = f64::INFINITY;
            continue;
        }
        last = f_next;
        let t_next = 0.5 * (1.0 + libm::sqrt(1.0 + 4.0 * t * t));
        let beta = (t - 1.0) / t_next;
        look = next.clone();
        look.w.axpy(beta, &next.w.zip_map(&current.w, |a, b| a - b));
        look.b.iter_mut().zip(next.b.iter().zip(&current.b)).for_each(|(v, (a, b))| *v += beta * (a - b));
        current = next;
        t = t_next;
    }
    current
}

/// `steps` AdamW updates on the mean cross-entropy with decoupled decay
/// `wd` on every parameter, from zero.
pub fn fit_logistic_gd(x: &Matrix, y: &[usize], classes: usize, wd: f64, steps: usize, lr: f64) -> LinearModel {
    let d = x.cols();
    let mut m = LinearModel::zeros(d, classes);
    let (mut mw, mut vw) = (Matrix::zeros(d, classes), Matrix::zeros(d, classes));
    let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
    for t in 1..=steps {
        let (_, gw, gb) = data_loss(&m, x, y);
        let c1 = 1.0 - libm::pow(BETA1, t as f64);
        let c2 = 1.0 - libm::pow(BETA2, t as f64);
        let update = |p: &mut f64, g: f64, m1: &mut f64, m2: &mut f64| {
            *m1 = BETA1 * *m1 + (1.0 - BETA1) * g;
            *m2 = BETA2 * *m2 + (1.0 - BETA2) * g * g;
            *p -= lr * (wd * *p + (*m1 / c1) / (libm::sqrt(*m2 / c2) + ADAM_EPS));
        };
        for k in 0..gw.len() {
            update(&mut m.w.as_mut_slice()[k], gw.as_slice()[k], &mut mw.as_mut_slice()[k], &mut vw.as_mut_slice()[k]);
        }
        for k in 0..classes {
            update(&mut m.b[k], gb[k], &mut mb[k], &mut vb[k]);
        }
    }
    m
}

/// Fraction of `nodes` whose prediction matches a nonnegative label.
/// Unlabeled nodes are skipped; an empty set scores 0.
pub fn accuracy(model: &LinearModel, x: &Matrix, labels: &[i64], nodes: &[usize]) -> f64 {
    let nodes: Vec<usize> = nodes.iter().copied().filter(|&i| labels[i] >= 0).collect();
    if nodes.is_empty() {
        return 0.0;
    }
    let pred = model.predict(&x.select_rows(&nodes));
    let hits = nodes.iter().zip(&pred).filter(|(&i, &p)| labels[i] as usize == p).count();
    hits as f64 / nodes.len() as f64
}

/// Fits one probe per grid value on the training nodes and keeps the one
/// with the best validation accuracy (earliest on ties; training accuracy
/// when there is no validation set).
pub fn linear_probe(embeddings: &Matrix, labels: &[i64], splits: &SplitMask, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = embeddings.rows();
    if labels.len() != n || splits.len() != n {
        return Err(Error::Shape(format!("{n} embeddings, {} labels, {} split entries", labels.len(), splits.len())));
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("probe input embeddings".into()));
    }
    if cfg.grid.is_empty() || cfg.grid.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::config("probe grid needs positive finite values"));
    }
    let train: Vec<usize> = splits.train_indices().into_iter().filter(|&i| labels[i] >= 0).collect();
    let classes = labels.iter().copied().max().unwrap_or(-1) + 1;
    let mut present: Vec<i64> = train.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Degenerate(format!("training split has {} distinct labels", present.len())));
    }
    let classes = classes as usize;
    let x = embeddings.select_rows(&train);
    let y: Vec<usize> = train.iter().map(|&i| labels[i] as usize).collect();
    let val = splits.val_indices();
    let test = splits.test_indices();
    let has_val = val.iter().any(|&i| labels[i] >= 0);

    let mut best: Option<(f64, f64, LinearModel)> = None;
    for &reg in &cfg.grid {
        let model = match cfg.mode {
            ProbeMode::GridFull => fit_logistic(&x, &y, classes, reg, cfg.tolerance, cfg.max_iters),
            ProbeMode::GdFast => fit_logistic_gd(&x, &y, classes, reg, cfg.gd_steps, cfg.gd_lr),
        };
        let score = if has_val { accuracy(&model, embeddings, labels, &val) } else { accuracy(&model, embeddings, labels, &train) };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, reg, model));
        }
    }
    let (_, regularizer, model) = best.expect("grid is non-empty");
    Ok(ProbeResult {
        train_acc: accuracy(&model, embeddings, labels, &train),
        val_acc: accuracy(&model, embeddings, labels, &val),
        test_acc: accuracy(&model, embeddings, labels, &test),
        regularizer,
    })
}

/// Eval-mode encoder output on the unaugmented graph, rows scaled to unit
/// norm. All-zero rows stay zero.
pub fn embed_frozen(encoder: &Encoder, params: &ParamSet, dataset: &Dataset) -> Result<Matrix> {
    let adj = encoder.prepare(&dataset.graph);
    let h = encoder.embed(params, &adj, &dataset.features.to_matrix(), Mode::Eval)?;
    let zero_rows = (0..h.rows()).filter(|&i| h.row(i).iter().all(|&v| v == 0.0)).count();
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero embedding rows left unnormalized");
    }
    Ok(h.l2_normalize_rows())
}

/// The same probe applied to an untrained encoder.
pub fn random_init_baseline(cfg: &EncoderConfig, dataset: &Dataset, probe: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    let encoder = Encoder::new(cfg.clone(), dataset.feature_dim())?;
    let params = encoder.init_params(derive_seed(seed, 0, stream::INIT_ONLINE));
    let h = embed_frozen(&encoder, &params, dataset)?;
    linear_probe(&h, &dataset.labels, &dataset.splits, probe)
}
