//! Experiment configuration: one TOML file with sections named after the
//! pipeline modules. Every field has a default, so `{}` is a valid config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qosdata::ColdStartSpec;
use crate::rng::fnv1a;
use crate::sharpnet::ModelConfig;
use crate::trainloop::{Balancing, TrainConfig};

/// Where the QoS matrices come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Exactly low-rank, fully observed synthetic tasks.
    Lowrank,
    /// Synthetic two-task set shaped like the public benchmark.
    WsdreamLike,
    /// A normalized archive directory (`meta.json`, `values_*.csv`, `context.tsv`).
    Archive,
    /// Raw whitespace matrices `<task>.txt` plus `context.tsv`.
    Raw,
    /// An unpacked WS-DREAM #1 directory (`path`, or the environment variable).
    Wsdream,
    /// Real WS-DREAM when the environment variable is set, else the surrogate.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    /// Directory for `archive`, `raw` and `wsdream`; relative to the config file.
    pub path: Option<PathBuf>,
    /// Task names for `raw`.
    pub tasks: Vec<String>,
    /// Size of the synthetic sets, or of the subsample of a loaded set.
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub num_tasks: usize,
    /// Seed of the synthetic generator / subsample (defaults to the run seed).
    pub data_seed: Option<u64>,
    /// Subsample loaded data to `n × m` users × services.
    pub subsample: bool,
    pub train_density: f64,
    pub val_fraction: f64,
    /// `KIND:PCT`, e.g. `CB:10`.
    pub cold_start: Option<String>,
    /// Percentage of test entries removed as outliers.
    pub outlier_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: SourceKind::Lowrank,
            path: None,
            tasks: vec!["rt".into(), "tp".into()],
            n: 30,
            m: 20,
            rank: 2,
            num_tasks: 2,
            data_seed: None,
            subsample: false,
            train_density: 10.0,
            val_fraction: 0.05,
            cold_start: None,
            outlier_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatSection {
    pub nmf_iters: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
}

impl Default for FeatSection {
    fn default() -> Self {
        FeatSection { nmf_iters: 200, ae_epochs: 300, ae_lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Number of groups for the confidence intervals.
    pub groups: usize,
    pub levels: Vec<u32>,
    /// Shuffle the errors (seeded by the run seed) before grouping.
    pub shuffle: bool,
    pub output_dir: PathBuf,
    pub strict_determinism: bool,
    /// Dump every normalized graph as `edges_<name>.csv`.
    pub write_edges: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            groups: 50,
            levels: vec![90, 95, 99],
            shuffle: true,
            output_dir: PathBuf::from("out"),
            strict_determinism: false,
            write_edges: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub qosdata: DataSection,
    pub featinit: FeatSection,
    pub sharpnet: ModelConfig,
    pub trainloop: TrainConfig,
    pub evalcli: EvalSection,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub td: Option<f64>,
    pub balancing: Option<Balancing>,
    pub cold_start: Option<String>,
    pub outlier_frac: Option<f64>,
    pub strict_determinism: bool,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(base)) = (&cfg.qosdata.path, path.parent()) {
            if p.is_relative() {
                cfg.qosdata.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(td) = o.td {
            self.qosdata.train_density = td;
        }
        if let Some(b) = o.balancing {
            self.trainloop.balancing = b;
        }
        if let Some(c) = &o.cold_start {
            self.qosdata.cold_start = Some(c.clone());
        }
        if let Some(f) = o.outlier_frac {
            self.qosdata.outlier_frac = f;
        }
        if o.strict_determinism {
            self.evalcli.strict_determinism = true;
        }
        if let Some(d) = &o.output_dir {
            self.evalcli.output_dir = d.clone();
        }
    }

    /// Parsed cold-start spec, seeded by the run seed.
    pub fn cold_start(&self) -> Result<Option<ColdStartSpec>> {
        self.qosdata
            .cold_start
            .as_deref()
            .map(|s| s.parse::<ColdStartSpec>().map(|c| ColdStartSpec { seed: self.seed, ..c }))
            .transpose()
    }

    pub fn data_seed(&self) -> u64 {
        self.qosdata.data_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.sharpnet.validate()?;
        self.trainloop.validate()?;
        self.cold_start()?;
        let q = &self.qosdata;
        if !(0.0..100.0).contains(&q.outlier_frac) {
            return Err(Error::Config(format!("outlier fraction {} outside [0, 100)", q.outlier_frac)));
        }
        if matches!(q.source, SourceKind::Lowrank | SourceKind::WsdreamLike | SourceKind::Auto)
            && (q.n == 0 || q.m == 0)
        {
            return Err(Error::Config("synthetic data needs n, m > 0".into()));
        }
        if matches!(q.source, SourceKind::Archive | SourceKind::Raw) && q.path.is_none() {
            return Err(Error::Config(format!("source {:?} needs a path", q.source)));
        }
        if self.evalcli.groups < 2 {
            return Err(Error::Config("evalcli.groups must be at least 2".into()));
        }
        for &l in &self.evalcli.levels {
            super::metrics::z_value(l)?;
        }
        Ok(())
    }

    /// Fingerprint of everything that affects results (the output directory
    /// and the determinism switch are excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.evalcli.output_dir = PathBuf::new();
        c.evalcli.strict_determinism = false;
        c.trainloop.log_every = 0;
        format!("{:016x}", fnv1a(&c.to_toml().unwrap_or_default()))
    }
}
