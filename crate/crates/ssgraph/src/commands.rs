//! The experiment commands behind the CLI. Each takes plain arguments and
//! writes its artifacts, so tests can drive them without a process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ssgraph_core::autograd::MemCounter;
use ssgraph_core::bgrl::{train_bgrl, BgrlConfig, BgrlState};
use ssgraph_core::eval::{
    attention_entropy, embed_frozen, embedding_spread, linear_probe, mean_embedding_norm, predict_cost, CostModel,
    Histogram, Method as CostMethod, ProbeConfig, ProbeMode, ProbeResult,
};
use ssgraph_core::grace::{GraceState, GraceTrainConfig, Negatives};
use ssgraph_core::graph::{generate_sbm, random_split_sizes, SbmConfig};
use ssgraph_core::metrics::MetricsRecord;
use ssgraph_core::nn::{Encoder, EncoderKind, Mode};
use ssgraph_core::optim::{learning_rate_at, tau_at, ScheduleConfig};
use ssgraph_core::rng::{derive_seed, stream};
use ssgraph_core::semisup::{prepare_batch, PreparedBatch, SemisupConfig, SemisupState};
use ssgraph_core::{Dataset, ParamSet};

use crate::checkpoint;
use crate::config::{DataSource, Method, RunConfig};
use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROBE_FILE: &str = "probe.json";
pub const DIAG_FILE: &str = "diag.json";

/// Batches prepared ahead of the training thread.
const PREFETCH: usize = 2;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Mean and sample standard deviation; zero spread for fewer than two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DataSummary {
    pub nodes: usize,
    pub arcs: usize,
    pub classes: usize,
}

impl DataSummary {
    pub fn of(ds: &Dataset) -> Self {
        Self { nodes: ds.num_nodes(), arcs: ds.graph.num_arcs(), classes: ds.num_classes() }
    }
}

pub fn gen_data(sbm: &SbmConfig, out: &Path) -> Result<DataSummary> {
    let ds = generate_sbm(sbm)?;
    io::save_dataset_dir(out, &ds)?;
    Ok(DataSummary::of(&ds))
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub nodes: usize,
    pub arcs: usize,
    pub steps: u64,
    pub final_record: Option<MetricsRecord>,
    pub peak_bytes: u64,
    /// Classifier accuracies for the supervised and semi-supervised methods.
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Trains according to `cfg` and writes the checkpoint, the configuration,
/// per-step metrics and a run summary into `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let ds = cfg.load_data()?;
    let progress = |r: &MetricsRecord| log::info!("step {:>6}  loss {:+.6}  lr {:.3e}  tau {:.6}", r.step, r.loss, r.lr, r.tau);
    let mut summary = RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        nodes: ds.num_nodes(),
        arcs: ds.graph.num_arcs(),
        steps: 0,
        final_record: None,
        peak_bytes: 0,
        val_acc: None,
        test_acc: None,
    };
    let (params, log) = match cfg.method {
        Method::Bgrl => {
            let (state, log) = train_bgrl(&ds, &cfg.bgrl_config(), cfg.seed, progress)?;
            summary.steps = state.step;
            (state.encoder_params(), log)
        }
        Method::Grace => {
            let (state, log) = ssgraph_core::grace::train_grace(&ds, &cfg.grace_config(), cfg.seed, progress)?;
            summary.steps = state.step;
            (state.encoder_params(), log)
        }
        Method::RandomInit => {
            let encoder = Encoder::new(cfg.encoder.clone(), ds.feature_dim())?;
            (encoder.init_params(derive_seed(cfg.seed, 0, stream::INIT_ONLINE)), Vec::new())
        }
        Method::Supervised | Method::Semisup => {
            let (state, log) = train_minibatch(&ds, &cfg.semisup_config(), cfg.seed, progress)?;
            summary.steps = state.step();
            summary.val_acc = Some(state.accuracy(&ds, &ds.splits.val_indices())?);
            summary.test_acc = Some(state.accuracy(&ds, &ds.splits.test_indices())?);
            let mut p = state.bgrl.encoder_params();
            p.extend(state.bgrl.online.subset("head."));
            (p, log)
        }
    };
    summary.final_record = log.last().copied();
    summary.peak_bytes = log.iter().map(|r| r.peak_bytes).max().unwrap_or(0);

    create_dir(&cfg.out)?;
    checkpoint::save(&cfg.out.join(CHECKPOINT_FILE), &params)?;
    cfg.save(&cfg.out.join(CONFIG_FILE))?;
    let mut lines = String::new();
    for r in &log {
        lines += &serde_json::to_string(r)?;
        lines.push('\n');
    }
    write_file(&cfg.out.join(METRICS_FILE), lines)?;
    write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Neighborhood-sampled training. Batches are drawn on a helper thread one
/// or two steps ahead; they depend only on `(seed, step)`, so the result is
/// the same as drawing them inline.
pub fn train_minibatch(
    ds: &Dataset,
    cfg: &SemisupConfig,
    seed: u64,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<(SemisupState, Vec<MetricsRecord>)> {
    let mut state = SemisupState::new(cfg, ds.feature_dim(), ds.num_classes(), seed)?;
    let n_total = cfg.bgrl.schedule.n_total;
    let every = cfg.bgrl.metrics_every.max(1);
    let val = ds.splits.val_indices();
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<ssgraph_core::Result<PreparedBatch>>(PREFETCH);
        scope.spawn(move || {
            for step in 0..n_total {
                let batch = prepare_batch(ds, &cfg.batch, &cfg.fanout, &cfg.bgrl.augment, seed, step);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        let mut log = Vec::new();
        for batch in rx {
            let counter = MemCounter::new();
            let mut rec = state.step_prepared(&batch?, &counter)?;
            rec.peak_bytes = counter.peak() as u64;
            if rec.step % every == 0 || rec.step + 1 == n_total {
                rec.val_acc = Some(state.accuracy(ds, &val)?);
                sink(&rec);
                log.push(rec);
            }
        }
        Ok((state, log))
    })
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    /// Dataset directory; defaults to the data source the run was trained on.
    pub data: Option<PathBuf>,
    /// Probe protocol; defaults to the one in the run configuration.
    pub probe: Option<ProbeMode>,
    pub seeds: usize,
    /// Evaluate the dataset's own split once instead of resampling.
    pub stored_split: bool,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(flatten)]
    pub result: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub per_seed: Vec<SeedResult>,
    pub mean_test: f64,
    pub std_test: f64,
    pub mean_val: f64,
    pub std_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub nodes: usize,
    pub spread: f64,
    pub mean_norm: f64,
    pub norm_histogram: Histogram,
    /// GAT encoders only.
    pub attention_entropy: Option<EntropyReport>,
}

/// Per-node attention entropy relative to uniform attention (`≤ 0`) over
/// the training nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mean: f64,
    pub histogram: Histogram,
}

/// Loads a checkpoint together with the `config.json` beside it.
pub fn load_run(ckpt: &Path) -> Result<(RunConfig, ParamSet)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    Ok((cfg, checkpoint::load(ckpt)?))
}

/// Train/validation/test masks with the same sizes as `ds`'s, reshuffled.
fn resplit(ds: &Dataset, seed: u64) -> Result<ssgraph_core::SplitMask> {
    let s = &ds.splits;
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    Ok(random_split_sizes(ds.num_nodes(), count(&s.train), count(&s.val), seed)?)
}

/// Frozen linear evaluation over `seeds` resampled splits (or the stored
/// split), plus embedding diagnostics. Writes `probe.json` and `diag.json`.
pub fn eval(args: &EvalArgs) -> Result<(ProbeReport, DiagReport)> {
    let (mut cfg, params) = load_run(&args.ckpt)?;
    if let Some(dir) = &args.data {
        cfg.data = DataSource::Files(dir.clone());
    }
    let ds = cfg.load_data()?;
    let encoder = Encoder::new(cfg.encoder.clone(), ds.feature_dim())?;
    let probe = match args.probe {
        Some(ProbeMode::GridFull) => ProbeConfig::grid_full(),
        Some(ProbeMode::GdFast) => ProbeConfig::gd_fast(),
        None => cfg.probe.clone(),
    };
    let h = embed_frozen(&encoder, &params, &ds)?;
    let seeds: Vec<u64> = if args.stored_split { vec![cfg.seed] } else { (0..args.seeds as u64).map(|s| cfg.seed + s).collect() };
    if seeds.is_empty() {
        return Err(Error::config("eval needs at least one seed"));
    }
    let per_seed = pool(args.workers)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let splits = if args.stored_split { ds.splits.clone() } else { resplit(&ds, seed)? };
                Ok(SeedResult { seed, result: linear_probe(&h, &ds.labels, &splits, &probe)? })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let test: Vec<f64> = per_seed.iter().map(|r| r.result.test_acc).collect();
    let val: Vec<f64> = per_seed.iter().map(|r| r.result.val_acc).collect();
    let ((mean_test, std_test), (mean_val, std_val)) = (mean_std(&test), mean_std(&val));
    let report = ProbeReport { mode: probe.mode, per_seed, mean_test, std_test, mean_val, std_val };

    let raw = encoder.embed(&params, &encoder.prepare(&ds.graph), &ds.features.to_matrix(), Mode::Eval)?;
    let norms: Vec<f64> = (0..raw.rows()).map(|i| raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let hi = norms.iter().copied().fold(0.0, f64::max);
    let diag = DiagReport {
        nodes: ds.num_nodes(),
        spread: embedding_spread(&raw),
        mean_norm: mean_embedding_norm(&raw),
        norm_histogram: Histogram::new(&norms, 0.0, if hi > 0.0 { hi } else { 1.0 }, 20),
        attention_entropy: match encoder.kind() {
            EncoderKind::Gat => {
                let e = attention_entropy(&encoder, &params, &ds)?;
                let lo = e.iter().copied().fold(0.0, f64::min);
                let mean = e.iter().sum::<f64>() / e.len().max(1) as f64;
                Some(EntropyReport { mean, histogram: Histogram::new(&e, lo.min(-1e-12), 0.0, 20) })
            }
            _ => None,
        },
    };
    let out = args.out.clone().unwrap_or_else(|| args.ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&out)?;
    write_json(&out.join(PROBE_FILE), &report)?;
    write_json(&out.join(DIAG_FILE), &diag)?;
    Ok((report, diag))
}

// ---------------------------------------------------------------- ablate-k

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateRow {
    pub method: &'static str,
    /// `None` for the bootstrapped comparison row.
    pub k: Option<Negatives>,
    pub seeds: Vec<u64>,
    pub test_acc: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub peak_bytes: u64,
}

/// Probe test accuracy and peak step memory for one training run.
fn ablate_job(ds: &Dataset, base: &RunConfig, k: Option<Negatives>, seed: u64) -> Result<(f64, u64)> {
    let n_total = base.optim.n_total;
    let (encoder, params, peak) = match k {
        Some(k) => {
            let mut g = base.grace.unwrap_or_default();
            g.negatives = k;
            let cfg = GraceTrainConfig { grace: g, ..base.grace_config() };
            let mut state = GraceState::new(&cfg, ds.feature_dim(), seed)?;
            state.check_size(ds.num_nodes())?;
            let mut peak = 0;
            while state.step < n_total {
                peak = peak.max(state.update_step(ds)?.peak_bytes);
            }
            let p = state.encoder_params();
            (state.encoder, p, peak)
        }
        None => {
            let cfg = BgrlConfig { projector: None, ..base.bgrl_config() };
            let mut state = BgrlState::new(&cfg, ds.feature_dim(), seed)?;
            let mut peak = 0;
            while state.step < n_total {
                peak = peak.max(state.update_step(ds)?.peak_bytes);
            }
            let p = state.encoder_params();
            (state.encoder, p, peak)
        }
    };
    let h = embed_frozen(&encoder, &params, ds)?;
    Ok((linear_probe(&h, &ds.labels, &ds.splits, &base.probe)?.test_acc, peak))
}

/// Trains the contrastive baseline for each `k` and the bootstrapped method,
/// each over `seeds` training seeds on the same data, and probes them.
pub fn ablate_k(base: &RunConfig, ks: &[Negatives], seeds: usize, workers: usize) -> Result<Vec<AblateRow>> {
    if ks.is_empty() {
        return Err(Error::config("ablate-k needs a k list"));
    }
    let ds = base.load_data()?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| base.seed + s).collect();
    let rows: Vec<Option<Negatives>> = ks.iter().copied().map(Some).chain([None]).collect();
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seed_list.iter().map(move |&s| (r, s))).collect();
    let results = pool(workers)?.install(|| {
        jobs.par_iter().map(|&(r, s)| ablate_job(&ds, base, rows[r], s)).collect::<Result<Vec<_>>>()
    })?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(r, &k)| {
            let mine = &results[r * seeds..(r + 1) * seeds];
            let acc: Vec<f64> = mine.iter().map(|x| x.0).collect();
            let (mean_acc, std_acc) = mean_std(&acc);
            AblateRow {
                method: if k.is_some() { "grace" } else { "bgrl" },
                k,
                seeds: seed_list.clone(),
                test_acc: acc,
                mean_acc,
                std_acc,
                peak_bytes: mine.iter().map(|x| x.1).max().unwrap_or(0),
            }
        })
        .collect())
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("method,k,mean_acc,std_acc,peak_bytes\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        s += &format!("{},{k},{},{},{}\n", r.method, r.mean_acc, r.std_acc, r.peak_bytes);
    }
    s
}

/// Per-seed accuracies, one line per run.
pub fn ablate_seeds_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("method,k,seed,test_acc\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        for (seed, acc) in r.seeds.iter().zip(&r.test_acc) {
            s += &format!("{},{k},{seed},{acc}\n", r.method);
        }
    }
    s
}

// ----------------------------------------------------------- schedule-dump

pub fn schedule_table(cfg: &ScheduleConfig) -> Vec<(u64, f64, f64)> {
    (0..=cfg.n_total).map(|i| (i, learning_rate_at(i, cfg), tau_at(i, cfg))).collect()
}

pub fn schedule_csv(cfg: &ScheduleConfig) -> Result<String> {
    cfg.validate()?;
    let mut s = String::from("i,eta,tau\n");
    for (i, eta, tau) in schedule_table(cfg) {
        s += &format!("{i},{eta},{tau}\n");
    }
    Ok(s)
}

// ------------------------------------------------------------ bench-memory

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub sizes: Vec<usize>,
    /// Expected degree, held fixed so that the edge count grows like N.
    pub avg_degree: f64,
    pub feature_dim: usize,
    pub negatives: Negatives,
    /// Model and augmentation settings; data source and method are ignored.
    pub base: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: CostMethod,
    pub nodes: usize,
    pub arcs: usize,
    pub peak_bytes: u64,
    pub predicted_cost: f64,
}

/// Four-block SBM with `n` nodes and the given expected degree, a fifth of
/// it across blocks.
pub fn bench_graph(n: usize, avg_degree: f64, feature_dim: usize, seed: u64) -> Result<Dataset> {
    let npb = n / 4;
    if npb < 2 {
        return Err(Error::config(format!("bench size {n} is too small")));
    }
    let p_in = (0.8 * avg_degree / (npb - 1) as f64).min(1.0);
    let p_out = (0.2 * avg_degree / (n - npb) as f64).min(1.0);
    Ok(generate_sbm(&SbmConfig { blocks: 4, nodes_per_block: npb, p_in, p_out, feature_dim, seed, ..Default::default() })?)
}

/// One training step per method and size, measuring the activation peak and
/// pairing it with the analytic cost.
pub fn bench_memory(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let seed = args.base.seed;
    for &n in &args.sizes {
        let ds = bench_graph(n, args.avg_degree, args.feature_dim, seed)?;
        let (nodes, arcs) = (ds.num_nodes(), ds.graph.num_arcs());
        let optim = ScheduleConfig { n_total: 1, n_warmup: 0, ..args.base.optim };
        let bgrl = BgrlConfig { schedule: optim, projector: None, ..args.base.bgrl_config() };
        let mut b = BgrlState::new(&bgrl, ds.feature_dim(), seed)?;
        let peak = b.update_step(&ds)?.peak_bytes;
        rows.push(BenchRow {
            method: CostMethod::Bgrl,
            nodes,
            arcs,
            peak_bytes: peak,
            predicted_cost: predict_cost(CostMethod::Bgrl, nodes as u64, arcs as u64, &CostModel::UNIT),
        });

        let mut g = args.base.grace.unwrap_or_default();
        g.negatives = args.negatives;
        let grace = GraceTrainConfig { grace: g, schedule: optim, ..args.base.grace_config() };
        let mut s = GraceState::new(&grace, ds.feature_dim(), seed)?;
        s.check_size(nodes)?;
        let peak = s.update_step(&ds)?.peak_bytes;
        rows.push(BenchRow {
            method: CostMethod::Grace,
            nodes,
            arcs,
            peak_bytes: peak,
            predicted_cost: predict_cost(CostMethod::Grace, nodes as u64, arcs as u64, &CostModel::UNIT),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("method,n,m,peak_bytes,predicted_cost\n");
    for r in rows {
        let m = match r.method {
            CostMethod::Bgrl => "bgrl",
            CostMethod::Grace => "grace",
        };
        s += &format!("{m},{},{},{},{}\n", r.nodes, r.arcs, r.peak_bytes, r.predicted_cost);
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Slope of measured peak memory against N for one method.
pub fn memory_slope(rows: &[BenchRow], method: CostMethod) -> f64 {
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.method == method).map(|r| (r.nodes as f64, r.peak_bytes as f64)).collect();
    loglog_slope(&pts)
}

pub fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_file(p, text)
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}
