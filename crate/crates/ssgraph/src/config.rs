//! Run configuration: one JSON document, optionally seeded from a preset and
//! edited with dotted-path overrides such as `grace.k=all`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ssgraph_core::augment::AugmentationConfig;
use ssgraph_core::bgrl::BgrlConfig;
use ssgraph_core::eval::ProbeConfig;
use ssgraph_core::grace::{GraceConfig, GraceTrainConfig};
use ssgraph_core::graph::{generate_sbm, SbmConfig};
use ssgraph_core::nn::{Activation, EncoderConfig, EncoderKind, MlpConfig, NormLayer};
use ssgraph_core::optim::ScheduleConfig;
use ssgraph_core::sampling::FanoutSpec;
use ssgraph_core::semisup::{BatchSpec, SemisupConfig};
use ssgraph_core::Dataset;

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Bgrl,
    Grace,
    RandomInit,
    Supervised,
    Semisup,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Bgrl, Method::Grace, Method::RandomInit, Method::Supervised, Method::Semisup];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bgrl => "bgrl",
            Method::Grace => "grace",
            Method::RandomInit => "random-init",
            Method::Supervised => "supervised",
            Method::Semisup => "semisup",
        }
    }

    fn uses_minibatch(self) -> bool {
        matches!(self, Method::Supervised | Method::Semisup)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Where the graph comes from: a dataset directory or a generated SBM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files(PathBuf),
    Sbm(SbmConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Sbm(SbmConfig::default())
    }
}

/// Neighborhood-sampled training settings (supervised and semisup only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MinibatchBlock {
    pub batch: BatchSpec,
    pub fanout: FanoutSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub method: Method,
    pub encoder: EncoderConfig,
    pub predictor: MlpConfig,
    pub projector: Option<MlpConfig>,
    pub augment: AugmentationConfig,
    pub optim: ScheduleConfig,
    pub grace: Option<GraceConfig>,
    pub minibatch: Option<MinibatchBlock>,
    pub probe: ProbeConfig,
    pub metrics_every: u64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BgrlConfig::default();
        Self {
            data: DataSource::default(),
            method: Method::Bgrl,
            encoder: b.encoder,
            predictor: b.predictor,
            projector: b.projector,
            augment: b.augment,
            optim: b.schedule,
            grace: None,
            minibatch: None,
            probe: ProbeConfig::default(),
            metrics_every: b.metrics_every,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies `path=value` overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise, so `grace.k=all` and
    /// `encoder.layer_sizes=[64,32]` both work.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::config(format!("override {o:?} is not path=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut doc, path, value)?;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Checks the method against the method-specific blocks, then each block.
    pub fn validate(&self) -> Result<()> {
        if self.grace.is_some() && self.method != Method::Grace {
            return Err(Error::config(format!("grace block given for method {}", self.method)));
        }
        if self.minibatch.is_some() && !self.method.uses_minibatch() {
            return Err(Error::config(format!("minibatch block given for method {}", self.method)));
        }
        if self.projector.is_some() && !matches!(self.method, Method::Bgrl | Method::Semisup) {
            return Err(Error::config(format!("projector block given for method {}", self.method)));
        }
        if self.method == Method::Supervised {
            let b = self.minibatch_block().batch;
            if b.ratio != 0.0 || b.aux_weight != 0.0 {
                return Err(Error::config("supervised runs take no unlabeled ratio or auxiliary weight"));
            }
        }
        if let DataSource::Sbm(s) = &self.data {
            if s.feature_dim < s.blocks {
                return Err(Error::config("data.sbm.feature_dim must be at least data.sbm.blocks"));
            }
        }
        if self.probe.grid.is_empty() {
            return Err(Error::config("probe.grid is empty"));
        }
        match self.method {
            Method::Bgrl => self.bgrl_config().validate()?,
            Method::Grace => self.grace_config().validate()?,
            Method::RandomInit => self.encoder.validate()?,
            Method::Supervised | Method::Semisup => self.semisup_config().validate()?,
        }
        Ok(())
    }

    pub fn bgrl_config(&self) -> BgrlConfig {
        BgrlConfig {
            encoder: self.encoder.clone(),
            predictor: self.predictor,
            projector: self.projector,
            augment: self.augment,
            schedule: self.optim,
            metrics_every: self.metrics_every,
        }
    }

    pub fn grace_config(&self) -> GraceTrainConfig {
        GraceTrainConfig {
            encoder: self.encoder.clone(),
            grace: self.grace.unwrap_or_default(),
            augment: self.augment,
            schedule: self.optim,
            metrics_every: self.metrics_every,
        }
    }

    fn minibatch_block(&self) -> MinibatchBlock {
        self.minibatch.clone().unwrap_or_else(|| {
            let batch = if self.method == Method::Supervised {
                BatchSpec::supervised(BatchSpec::default().labeled)
            } else {
                BatchSpec::default()
            };
            MinibatchBlock { batch, fanout: FanoutSpec::default() }
        })
    }

    pub fn semisup_config(&self) -> SemisupConfig {
        let block = self.minibatch_block();
        SemisupConfig { bgrl: self.bgrl_config(), batch: block.batch, fanout: block.fanout }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Files(dir) => io::load_dataset_dir(dir, self.seed),
            DataSource::Sbm(cfg) => Ok(generate_sbm(cfg)?),
        }
    }

    /// Overwrites the model, augmentation, optimization and probe settings
    /// with a named preset.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let p = preset(name)?;
        self.encoder = p.encoder;
        self.predictor = p.predictor;
        self.augment = p.augment;
        self.optim = p.optim;
        self.probe = p.probe;
        Ok(())
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override path {path:?}")));
    }
    for (i, key) in keys.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry(*key).or_insert(Value::Null);
    }
    unreachable!()
}

pub const PRESETS: [&str; 7] = ["wikics", "am-photos", "am-computers", "co-cs", "co-phy", "arxiv", "ppi"];

/// Settings shipped for the standard benchmark datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub encoder: EncoderConfig,
    pub predictor: MlpConfig,
    pub augment: AugmentationConfig,
    pub optim: ScheduleConfig,
    pub probe: ProbeConfig,
}

pub fn preset(name: &str) -> Result<Preset> {
    // (p_f1, p_f2, p_e1, p_e2), eta, encoder widths, predictor hidden, norm, weight std.
    let (p, eta, sizes, hidden, norm, ws): ([f64; 4], f64, &[usize], usize, NormLayer, bool) = match name {
        "wikics" => ([0.2, 0.1, 0.2, 0.3], 5e-4, &[512, 256], 512, NormLayer::Batch, false),
        "am-computers" => ([0.2, 0.1, 0.5, 0.4], 5e-4, &[256, 128], 512, NormLayer::Batch, false),
        "am-photos" => ([0.1, 0.2, 0.4, 0.1], 1e-4, &[512, 256], 512, NormLayer::Batch, false),
        "co-cs" => ([0.3, 0.4, 0.3, 0.2], 1e-5, &[512, 256], 512, NormLayer::Batch, false),
        "co-phy" => ([0.1, 0.4, 0.4, 0.1], 1e-5, &[256, 128], 512, NormLayer::Batch, false),
        "arxiv" => ([0.0, 0.0, 0.6, 0.6], 1e-2, &[256, 256, 256], 256, NormLayer::Layer, true),
        "ppi" => ([0.25, 0.0, 0.3, 0.25], 5e-3, &[512, 512, 512], 512, NormLayer::Layer, false),
        _ => return Err(Error::config(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))),
    };
    let large = matches!(name, "arxiv" | "ppi");
    let (n_total, n_warmup) = if name == "ppi" { (20_000, 2_000) } else { (10_000, 1_000) };
    Ok(Preset {
        encoder: EncoderConfig {
            kind: if name == "ppi" { EncoderKind::MeanpoolSkip } else { EncoderKind::Gcn },
            layer_sizes: sizes.to_vec(),
            activation: Activation::Prelu,
            norm,
            weight_standardization: ws,
            ..Default::default()
        },
        predictor: MlpConfig { hidden, activation: Activation::Prelu, batch_norm: true },
        augment: AugmentationConfig { p_f1: p[0], p_f2: p[1], p_e1: p[2], p_e2: p[3] },
        optim: ScheduleConfig { eta_base: eta, n_total, n_warmup, tau_base: 0.99, weight_decay: 1e-5 },
        probe: if large { ProbeConfig::gd_fast() } else { ProbeConfig::grid_full() },
    })
}
