use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ssgraph_core::eval::ProbeMode;
use ssgraph_core::grace::Negatives;
use ssgraph_core::graph::SbmConfig;
use ssgraph_core::optim::ScheduleConfig;

use crate::commands::{self, BenchArgs, EvalArgs};
use crate::config::{DataSource, Method, RunConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "ssgraph", version, about = "Self-supervised graph representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a stochastic-block-model dataset in the on-disk formats.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, config and metrics.
    Train(TrainArgs),
    /// Linear-probe a checkpoint and compute embedding diagnostics.
    Eval(EvalCliArgs),
    /// Sweep the number of contrastive negatives against the bootstrapped method.
    AblateK(AblateArgs),
    /// Print the learning-rate and EMA-decay schedules.
    ScheduleDump(ScheduleArgs),
    /// Measure peak activation memory over graph sizes.
    BenchMemory(BenchCliArgs),
}

fn parse_blocks(s: &str) -> std::result::Result<(usize, usize), String> {
    let (b, n) = s.split_once('x').ok_or("expected BLOCKSxNODES, e.g. 4x100")?;
    Ok((b.parse().map_err(|_| "bad block count")?, n.parse().map_err(|_| "bad block size")?))
}

fn parse_probe(s: &str) -> std::result::Result<ProbeMode, String> {
    match s {
        "grid_full" => Ok(ProbeMode::GridFull),
        "gd_fast" => Ok(ProbeMode::GdFast),
        _ => Err(format!("unknown probe {s:?}; expected grid_full or gd_fast")),
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Blocks × nodes per block.
    #[arg(long, value_parser = parse_blocks, default_value = "4x100")]
    pub sbm: (usize, usize),
    #[arg(long, default_value_t = 0.1)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.1)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, env = "SSGRAPH_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenDataArgs {
    pub fn sbm_config(&self) -> SbmConfig {
        SbmConfig {
            blocks: self.sbm.0,
            nodes_per_block: self.sbm.1,
            p_in: self.p_in,
            p_out: self.p_out,
            feature_dim: self.feature_dim,
            signal: self.signal,
            seed: self.seed,
            train_fraction: self.train_frac,
            val_fraction: self.val_frac,
        }
    }
}

/// Options shared by every command that builds a [`RunConfig`]. Layers, in
/// order: config file (or defaults), preset, explicit flags, `--set`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Dataset directory.
    #[arg(long, conflicts_with = "sbm")]
    pub data: Option<PathBuf>,
    /// Generated dataset, BLOCKSxNODES; other generator fields via `--set data.sbm.*`.
    #[arg(long, value_parser = parse_blocks)]
    pub sbm: Option<(usize, usize)>,
    #[arg(long, env = "SSGRAPH_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Number of contrastive negatives: an integer or `all`.
    #[arg(long = "grace.k")]
    pub grace_k: Option<Negatives>,
    /// Dotted-path override, e.g. `encoder.layer_sizes=[64,32]`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(d) = &self.data {
            cfg.data = DataSource::Files(d.clone());
        }
        if let Some((blocks, nodes_per_block)) = self.sbm {
            let base = match &cfg.data {
                DataSource::Sbm(s) => s.clone(),
                DataSource::Files(_) => SbmConfig::default(),
            };
            cfg.data = DataSource::Sbm(SbmConfig { blocks, nodes_per_block, ..base });
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(n) = self.steps {
            cfg.optim.n_total = n;
            cfg.optim.n_warmup = cfg.optim.n_warmup.min(n);
        }
        if let Some(k) = self.grace_k {
            let mut g = cfg.grace.unwrap_or_default();
            g.negatives = k;
            cfg.grace = Some(g);
        }
        let cfg = cfg.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalCliArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_probe)]
    pub probe: Option<ProbeMode>,
    /// Number of resampled splits.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Probe the dataset's own split once instead.
    #[arg(long)]
    pub stored_split: bool,
    /// Output directory; defaults to the checkpoint's.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel jobs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long = "k", value_delimiter = ',', default_value = "2,8,32")]
    pub ks: Vec<Negatives>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// CSV path; a `*_seeds.csv` with per-seed accuracies is written beside it.
    #[arg(long = "csv")]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 5e-4)]
    pub eta_base: f64,
    #[arg(long, default_value_t = 10_000)]
    pub n_total: u64,
    #[arg(long, default_value_t = 1_000)]
    pub n_warmup: u64,
    #[arg(long, default_value_t = 0.99)]
    pub tau_base: f64,
    /// CSV path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchCliArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 8.0)]
    pub avg_degree: f64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    /// Contrastive negatives for the comparison.
    #[arg(long = "negatives", default_value = "all")]
    pub negatives: Negatives,
    /// CSV path; standard output when absent.
    #[arg(long = "csv")]
    pub csv: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let s = commands::gen_data(&a.sbm_config(), &a.out)?;
            println!("N={} M={} C={}", s.nodes, s.arcs, s.classes);
        }
        Command::Train(a) => {
            let cfg = a.config.build()?;
            let s = commands::train(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Eval(a) => {
            let (p, _) = commands::eval(&EvalArgs {
                ckpt: a.ckpt,
                data: a.data,
                probe: a.probe,
                seeds: a.seeds,
                stored_split: a.stored_split,
                out: a.out,
                workers: a.workers,
            })?;
            println!("test {:.4} ± {:.4}  val {:.4} ± {:.4}", p.mean_test, p.std_test, p.mean_val, p.std_val);
        }
        Command::AblateK(mut a) => {
            a.config.method.get_or_insert(Method::Grace);
            let cfg = a.config.build()?;
            let rows = commands::ablate_k(&cfg, &a.ks, a.seeds, a.workers)?;
            commands::write_output(Some(&a.csv), &commands::ablate_csv(&rows))?;
            let stem = a.csv.file_stem().and_then(|s| s.to_str()).unwrap_or("ablate");
            commands::write_output(Some(&a.csv.with_file_name(format!("{stem}_seeds.csv"))), &commands::ablate_seeds_csv(&rows))?;
            print!("{}", commands::ablate_csv(&rows));
        }
        Command::ScheduleDump(a) => {
            let cfg = ScheduleConfig {
                eta_base: a.eta_base,
                n_total: a.n_total,
                n_warmup: a.n_warmup,
                tau_base: a.tau_base,
                ..Default::default()
            };
            commands::write_output(a.out.as_deref(), &commands::schedule_csv(&cfg)?)?;
        }
        Command::BenchMemory(a) => {
            let base = a.config.build()?;
            let rows = commands::bench_memory(&BenchArgs {
                sizes: a.sizes,
                avg_degree: a.avg_degree,
                feature_dim: a.feature_dim,
                negatives: a.negatives,
                base,
            })?;
            commands::write_output(a.csv.as_deref(), &commands::bench_csv(&rows))?;
        }
    }
    Ok(())
}
