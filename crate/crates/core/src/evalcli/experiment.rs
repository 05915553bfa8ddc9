//! Experiment orchestration: preprocess → features → graphs → train →
//! evaluate, with every artifact written flat into one output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SourceKind};
use super::metrics::{confidence_intervals, errors, improvement, mae_rmse, service_mean_baseline};
use super::report::{Comparison, EvalReport, RunMeta, Status, TaskReport, Timing};
use crate::error::{Error, Result};
use crate::featinit::{build_features, read_cache, write_cache, FeatureBank, FeatureConfig};
use crate::graphs::GraphSet;
use crate::hyperball::{softplus, CURVATURE_EPS};
use crate::par;
use crate::qosdata::{
    self, filter_outliers, make_cold_start, select_cold_entities, split, synth, wsdream, QosDataset, SplitSpec, Splits,
};
use crate::rng::fnv1a;
use crate::sharpnet::{load_checkpoint, save_checkpoint, write_gates_csv, GraphOps, ParamStore, SharpNet};
use crate::trainloop::{train, write_history_csv, StopReason, TrainData, TrainResult};

/// Pipeline stages, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Features,
    Graphs,
    Train,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Features => "features",
            Stage::Graphs => "graphs",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// The dataset with its (possibly filtered / cold-started) splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ds: QosDataset,
    pub source: String,
    pub splits: Splits,
    /// Cold users and services, when a scenario is active.
    pub cold: Option<(Vec<usize>, Vec<usize>)>,
}

/// Load or generate the dataset named by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(QosDataset, String)> {
    let q = &cfg.qosdata;
    let seed = cfg.data_seed();
    let env_dir = std::env::var_os(wsdream::ENV_DIR).map(PathBuf::from);
    let path = || q.path.clone().ok_or_else(|| Error::Config(format!("source {:?} needs a path", q.source)));
    let maybe_sub = |ds: QosDataset, force: bool| {
        if force || q.subsample {
            wsdream::subsample(&ds, q.n, q.m, seed)
        } else {
            Ok(ds)
        }
    };
    match q.source {
        SourceKind::Lowrank => Ok((synth::low_rank(q.n, q.m, q.rank, q.num_tasks, seed), "lowrank".into())),
        SourceKind::WsdreamLike => Ok((synth::wsdream_like(q.n, q.m, seed), "wsdream_like".into())),
        SourceKind::Archive => Ok((maybe_sub(qosdata::read_archive(&path()?)?, false)?, "archive".into())),
        SourceKind::Raw => {
            let dir = path()?;
            let files: Vec<PathBuf> = q.tasks.iter().map(|t| dir.join(format!("{t}.txt"))).collect();
            let ds = qosdata::load_dataset(&files, &dir.join("context.tsv"), &q.tasks)?;
            Ok((maybe_sub(ds, false)?, "raw".into()))
        }
        SourceKind::Wsdream => {
            let dir = q.path.clone().or(env_dir).ok_or_else(|| {
                Error::Config(format!("source wsdream needs a path or {}", wsdream::ENV_DIR))
            })?;
            Ok((maybe_sub(wsdream::load_dir(&dir)?, false)?, "wsdream".into()))
        }
        SourceKind::Auto => match env_dir {
            Some(dir) => Ok((maybe_sub(wsdream::load_dir(&dir)?, true)?, "wsdream".into())),
            None => Ok((synth::wsdream_like(q.n, q.m, seed), "wsdream_like".into())),
        },
    }
}

/// Split, drop test outliers, then apply the cold-start scenario to the
/// training and validation sides.
pub fn prepare_splits(cfg: &ExperimentConfig, ds: QosDataset, source: String) -> Result<Prepared> {
    let q = &cfg.qosdata;
    let spec = SplitSpec { train_density: q.train_density, seed: cfg.seed, val_fraction: q.val_fraction };
    let mut splits = split(&ds, &spec)?;
    if q.outlier_frac > 0.0 {
        splits.test = filter_outliers(&ds, &splits.test, q.outlier_frac, cfg.seed)?;
    }
    let mut cold = None;
    if let Some(cs) = cfg.cold_start()? {
        splits.train = make_cold_start(&ds, &splits.train, &cs)?;
        splits.val = make_cold_start(&ds, &splits.val, &cs)?;
        cold = Some(select_cold_entities(ds.n, ds.m, &cs)?);
    }
    Ok(Prepared { ds, source, splits, cold })
}

pub fn feature_config(cfg: &ExperimentConfig) -> FeatureConfig {
    FeatureConfig {
        d: cfg.sharpnet.d,
        nmf_iters: cfg.featinit.nmf_iters,
        ae_epochs: cfg.featinit.ae_epochs,
        ae_lr: cfg.featinit.ae_lr,
        seed: cfg.seed,
    }
}

/// Everything the features depend on.
fn feature_key(cfg: &ExperimentConfig, source: &str) -> String {
    let key = format!("{source}|{:?}|{:?}|{}|{}", cfg.qosdata, feature_config(cfg), cfg.seed, cfg.data_seed());
    format!("{:016x}", fnv1a(&key))
}

/// What the train stage leaves behind for a later `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One experiment bound to an output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub timing: Timing,
    pub run: RunMeta,
    started: Instant,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        if cfg.evalcli.strict_determinism {
            par::set_sequential(true);
        }
        let run = RunMeta {
            seed: cfg.seed,
            data_seed: cfg.data_seed(),
            config_hash: cfg.hash(),
            train_density: cfg.qosdata.train_density,
            balancing: cfg.trainloop.balancing.to_string(),
            cold_start: cfg.qosdata.cold_start.clone(),
            outlier_frac: cfg.qosdata.outlier_frac,
            strict_determinism: cfg.evalcli.strict_determinism,
            ..Default::default()
        };
        let path = out.join("config.toml");
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(Pipeline { cfg, out: out.to_path_buf(), timing: Timing::default(), run, started: Instant::now() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn preprocess(&mut self) -> Result<Prepared> {
        let t = Instant::now();
        let (ds, source) = load_data(&self.cfg)?;
        let prep = prepare_splits(&self.cfg, ds, source)?;
        qosdata::write_archive(&self.path("dataset"), &prep.ds, Some(self.cfg.data_seed()), &prep.source)?;
        self.run.source = prep.source.clone();
        self.run.n = prep.ds.n;
        self.run.m = prep.ds.m;
        for (p, name) in prep.ds.task_names.iter().enumerate() {
            log::info!(
                "{name}: {} train / {} val / {} test entries",
                prep.splits.train[p].count(),
                prep.splits.val[p].count(),
                prep.splits.test[p].count()
            );
        }
        self.timing.preprocess = t.elapsed().as_secs_f64();
        Ok(prep)
    }

    /// Build the features, or reuse `features_*.bin` when they were made
    /// from the same data, split and settings.
    pub fn features(&mut self, prep: &Prepared) -> Result<FeatureBank> {
        let t = Instant::now();
        let key = feature_key(&self.cfg, &prep.source);
        let meta_path = self.path("features_meta.json");
        let cached = read_json::<serde_json::Value>(&meta_path)
            .ok()
            .filter(|m| m["cache_key"].as_str() == Some(key.as_str()))
            .and_then(|_| read_cache(&self.out).ok());
        let bank = match cached {
            Some((bank, _)) => {
                log::info!("reusing cached features ({key})");
                bank
            }
            None => {
                let fc = feature_config(&self.cfg);
                let bank = build_features(&prep.ds, &prep.splits.train, &fc)?;
                write_cache(&self.out, &bank, &prep.ds.task_names, &fc)?;
                let mut meta: serde_json::Value = read_json(&meta_path)?;
                meta["cache_key"] = serde_json::Value::String(key);
                write_json(&meta_path, &meta)?;
                bank
            }
        };
        self.timing.features = t.elapsed().as_secs_f64();
        Ok(bank)
    }

    pub fn graphs(&mut self, prep: &Prepared) -> Result<GraphSet> {
        let t = Instant::now();
        let gs = GraphSet::build(&prep.ds, &prep.splits.train)?;
        if self.cfg.evalcli.write_edges {
            gs.write_edges(&self.out, &prep.ds.task_names)?;
        }
        self.timing.graphs = t.elapsed().as_secs_f64();
        Ok(gs)
    }

    /// Train and write `model.ckpt`, `history.csv`, `gates_<task>.csv`
    /// and `train_summary.json`.
    pub fn train(&mut self, prep: &Prepared, feats: &FeatureBank, gs: &GraphSet) -> Result<(SharpNet, TrainResult)> {
        let t = Instant::now();
        let net = SharpNet::new(self.cfg.sharpnet.clone(), prep.ds.n, prep.ds.m, prep.ds.tasks())?;
        let init = net.init_params(self.cfg.seed);
        let data = TrainData::from_splits(&prep.ds, &prep.splits)?;
        let tcfg = crate::trainloop::TrainConfig { seed: self.cfg.seed, ..self.cfg.trainloop.clone() };
        let result = train(&net, init, feats, &GraphOps::new(gs), &data, &tcfg)?;
        save_checkpoint(&self.path("model.ckpt"), &net, &result.params, self.cfg.seed, result.state.best_epoch)?;
        write_history_csv(&self.path("history.csv"), &prep.ds.task_names, &result.history)?;
        for (p, name) in prep.ds.task_names.iter().enumerate() {
            write_gates_csv(&self.path(&format!("gates_{name}.csv")), &net, &result.params, p)?;
        }
        let summary = TrainSummary {
            config_hash: self.run.config_hash.clone(),
            epochs_run: result.history.len(),
            best_epoch: result.state.best_epoch,
            best_val_loss: result.state.best_loss,
            stop: result.stop.clone(),
            seconds: result.seconds,
        };
        write_json(&self.path("train_summary.json"), &summary)?;
        self.note_training(&summary);
        self.timing.train = t.elapsed().as_secs_f64();
        Ok((net, result))
    }

    fn note_training(&mut self, s: &TrainSummary) {
        self.run.epochs_run = s.epochs_run;
        self.run.best_epoch = s.best_epoch;
        self.run.stop = Some(s.stop.clone());
    }

    /// Load `model.ckpt` (and `train_summary.json` if present).
    pub fn load_model(&mut self, prep: &Prepared) -> Result<(SharpNet, ParamStore)> {
        let (net, ckpt) = load_checkpoint(&self.path("model.ckpt"))?;
        if (net.n, net.m, net.tasks) != (prep.ds.n, prep.ds.m, prep.ds.tasks()) {
            return Err(Error::Shape(format!(
                "checkpoint is for {}×{} with {} tasks, data is {}×{} with {}",
                net.n,
                net.m,
                net.tasks,
                prep.ds.n,
                prep.ds.m,
                prep.ds.tasks()
            )));
        }
        if let Ok(s) = read_json::<TrainSummary>(&self.path("train_summary.json")) {
            if s.config_hash != self.run.config_hash {
                log::warn!("model.ckpt was trained with a different config ({})", s.config_hash);
            }
            self.note_training(&s);
        }
        Ok((net, ckpt.params))
    }

    /// Score the test entries and build the report (not written).
    pub fn evaluate(
        &mut self,
        prep: &Prepared,
        net: &SharpNet,
        store: &ParamStore,
        feats: &FeatureBank,
        gs: &GraphSet,
    ) -> Result<EvalReport> {
        let t = Instant::now();
        let ops = GraphOps::new(gs);
        let out = net.infer(store, feats, &ops)?;
        let ev = &self.cfg.evalcli;
        let mut tasks = Vec::new();
        let mut comparisons = Vec::new();
        for (p, name) in prep.ds.task_names.iter().enumerate() {
            let test = prep.ds.entries(p, &prep.splits.test[p]);
            let train_e = prep.ds.entries(p, &prep.splits.train[p]);
            let err = errors(&out.preds[p], &test);
            let (mae, rmse) = mae_rmse(&err).map_err(|e| Error::EmptyMask(format!("task {name}: {e}")))?;
            let base = service_mean_baseline(prep.ds.n, prep.ds.m, &train_e)?;
            let (baseline_mae, baseline_rmse) = mae_rmse(&errors(&base, &test))?;
            let (cold_n_test, cold_mae) = match &prep.cold {
                Some((users, services)) => {
                    let cold_err: Vec<f64> = test
                        .iter()
                        .zip(&err)
                        .filter(|((i, j, _), _)| users.binary_search(i).is_ok() || services.binary_search(j).is_ok())
                        .map(|(_, &e)| e)
                        .collect();
                    (Some(cold_err.len()), mae_rmse(&cold_err).ok().map(|r| r.0))
                }
                None => (None, None),
            };
            let intervals = if err.len() >= ev.groups {
                confidence_intervals(&err, ev.groups, &ev.levels, ev.shuffle.then_some(self.cfg.seed))?
            } else {
                log::warn!("task {name}: {} test errors < {} groups; no confidence intervals", err.len(), ev.groups);
                Vec::new()
            };
            for (metric, model, reference) in [("MAE", mae, baseline_mae), ("RMSE", rmse, baseline_rmse)] {
                comparisons.push(Comparison {
                    task: name.clone(),
                    metric: metric.into(),
                    reference: "service_mean".into(),
                    model,
                    reference_value: reference,
                    improvement: improvement(model, reference)?,
                });
            }
            tasks.push(TaskReport {
                name: name.clone(),
                n_train: prep.splits.train[p].count(),
                n_val: prep.splits.val[p].count(),
                n_test: test.len(),
                mae,
                rmse,
                baseline_mae,
                baseline_rmse,
                cold_n_test,
                cold_mae,
                intervals,
            });
        }
        self.run.parameters = store.numel();
        self.run.macs = net.macs(store, feats, &ops)?;
        self.run.active_gates = net.active_gates(store);
        self.run.total_gates = net.tasks * (net.cfg.k1 + if net.tasks >= 2 { net.cfg.k2 } else { 0 });
        self.run.curvatures = store
            .specs
            .iter()
            .zip(&store.values)
            .filter(|(s, _)| s.name.ends_with("/curvature"))
            .map(|(_, v)| softplus(v.data[0]) + CURVATURE_EPS)
            .collect();
        self.timing.evaluate = t.elapsed().as_secs_f64();
        Ok(EvalReport {
            status: Status::Complete,
            failed_stage: None,
            error: None,
            tasks,
            comparisons,
            run: self.run.clone(),
            timing: None,
        })
    }

    /// Write `report.json`, `summary.md` and `timing.json`. Timing stays
    /// out of the report in strict mode.
    pub fn write_report(&mut self, report: &mut EvalReport) -> Result<()> {
        self.timing.total = self.started.elapsed().as_secs_f64();
        write_json(&self.path("timing.json"), &self.timing)?;
        report.timing = (!self.cfg.evalcli.strict_determinism).then(|| self.timing.clone());
        report.write(&self.path("report.json"))?;
        let md = self.path("summary.md");
        fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))
    }

    fn fail(&mut self, stage: Stage, err: Error) -> Error {
        let msg = err.to_string();
        log::error!("stage {} failed: {msg}", stage.name());
        let mut report = EvalReport::incomplete(self.run.clone(), stage.name(), &msg);
        if let Err(e) = self.write_report(&mut report) {
            log::error!("could not write the incomplete report: {e}");
        }
        err.in_stage(stage.name())
    }

    /// Run stages up to and including `last`. `Evaluate` without `Train`
    /// in between (the `eval` command) loads `model.ckpt`.
    pub fn run_until(&mut self, last: Stage, train: bool) -> Result<Option<EvalReport>> {
        let prep = self.preprocess().map_err(|e| self.fail(Stage::Preprocess, e))?;
        if last == Stage::Preprocess {
            return Ok(None);
        }
        let feats = self.features(&prep).map_err(|e| self.fail(Stage::Features, e))?;
        if last == Stage::Features {
            return Ok(None);
        }
        let gs = self.graphs(&prep).map_err(|e| self.fail(Stage::Graphs, e))?;
        if last == Stage::Graphs {
            return Ok(None);
        }
        let (net, store) = if train {
            let (net, res) = self.train(&prep, &feats, &gs).map_err(|e| self.fail(Stage::Train, e))?;
            (net, res.params)
        } else {
            self.load_model(&prep).map_err(|e| self.fail(Stage::Evaluate, e))?
        };
        if last == Stage::Train {
            return Ok(None);
        }
        let mut report =
            self.evaluate(&prep, &net, &store, &feats, &gs).map_err(|e| self.fail(Stage::Evaluate, e))?;
        self.write_report(&mut report).map_err(|e| self.fail(Stage::Evaluate, e))?;
        Ok(Some(report))
    }
}

/// Full pipeline into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let mut pipe = Pipeline::new(cfg.clone(), out)?;
    let report = pipe.run_until(Stage::Evaluate, true)?;
    Ok(report.expect("evaluate stage yields a report"))
}

fn write_sweep(out: &Path, name: &str, title: &str, runs: &[(String, EvalReport)]) -> Result<()> {
    let md = out.join(format!("{name}.md"));
    fs::write(&md, super::report::sweep_markdown(title, runs)).map_err(|e| Error::io(&md, e))?;
    let rows: Vec<serde_json::Value> = runs
        .iter()
        .map(|(label, r)| serde_json::json!({ "variant": label, "tasks": r.tasks }))
        .collect();
    write_json(&out.join(format!("{name}.json")), &rows)
}

/// Base run plus one run per cold-start scenario, each in its own
/// subdirectory (`base`, `CB_10`, ...).
pub fn cold_start_sweep(cfg: &ExperimentConfig, out: &Path, scenarios: &[String]) -> Result<Vec<(String, EvalReport)>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut runs = Vec::new();
    let mut base = cfg.clone();
    base.qosdata.cold_start = None;
    runs.push(("base".to_string(), run_experiment(&base, &out.join("base"))?));
    for s in scenarios {
        let mut c = cfg.clone();
        c.qosdata.cold_start = Some(s.clone());
        c.validate()?;
        let label = s.replace(':', "_");
        runs.push((s.clone(), run_experiment(&c, &out.join(&label))?));
    }
    write_sweep(out, "coldstart", "Cold-start sweep", &runs)?;
    Ok(runs)
}

/// Train once, then evaluate with each outlier fraction removed from the
/// test entries (outlier removal never touches the training side).
pub fn outlier_sweep(cfg: &ExperimentConfig, out: &Path, fractions: &[f64]) -> Result<Vec<(String, EvalReport)>> {
    let mut base = cfg.clone();
    base.qosdata.outlier_frac = 0.0;
    let mut pipe = Pipeline::new(base.clone(), out)?;
    let prep = pipe.preprocess()?;
    let feats = pipe.features(&prep)?;
    let gs = pipe.graphs(&prep)?;
    let (net, res) = pipe.train(&prep, &feats, &gs)?;
    let mut runs = Vec::new();
    for &f in fractions {
        let mut c = base.clone();
        c.qosdata.outlier_frac = f;
        let label = format!("outliers_{f}");
        let mut sub = Pipeline::new(c.clone(), &out.join(&label))?;
        let (ds, source) = load_data(&c)?;
        let p = prepare_splits(&c, ds, source)?;
        debug_assert_eq!(p.splits.train, prep.splits.train);
        sub.run.source = p.source.clone();
        sub.run.n = p.ds.n;
        sub.run.m = p.ds.m;
        sub.run.epochs_run = pipe.run.epochs_run;
        sub.run.best_epoch = pipe.run.best_epoch;
        sub.run.stop = pipe.run.stop.clone();
        let mut r = sub.evaluate(&p, &net, &res.params, &feats, &gs)?;
        sub.write_report(&mut r)?;
        runs.push((format!("{f}%"), r));
    }
    write_sweep(out, "outliers", "Outlier sweep", &runs)?;
    Ok(runs)
}
