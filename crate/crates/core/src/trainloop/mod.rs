//! Full-batch joint training: masked MAE per task, loss balancing,
//! expected-L0 sparsity penalty, AdamW and early stopping.

pub mod balance;

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featinit::FeatureBank;
use crate::linalg::Mat;
use crate::optim::{AdamW, AdamWConfig};
use crate::qosdata::{Mask, QosDataset, Splits};
use crate::rng::rng_for;
use crate::sharpnet::{GateNoise, GraphOps, Mode, ParamStore, SharpNet};
use crate::tape::{Tape, Var};

pub use balance::{dwa_weights, ema_weights, huw_loss, Balancer, Balancing, EmaState, EMA_EPS};

const NOISE_STREAM: u64 = 0x6A7E_0001;

/// Observed `(row, col, value)` triples per task.
pub type Entries = Arc<Vec<(usize, usize, f64)>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sparsity coefficient on the expected-L0 terms.
    pub lambda: f64,
    pub ema_beta: f64,
    pub balancing: Balancing,
    pub dwa_temperature: f64,
    pub seed: u64,
    /// Progress log interval in epochs (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            patience: 400,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1e-5,
            ema_beta: 0.99,
            balancing: Balancing::Ema,
            dwa_temperature: 2.0,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return bad("lr, weight_decay and lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_beta) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("ema_beta, beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.dwa_temperature > 0.0) {
            return bad("dwa_temperature must be positive");
        }
        Ok(())
    }
}

/// Train/validation entries for every task.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Entries>,
    pub val: Vec<Entries>,
}

impl TrainData {
    pub fn from_masks(ds: &QosDataset, train: &[Mask], val: &[Mask]) -> Result<Self> {
        let mut t = Vec::new();
        let mut v = Vec::new();
        for p in 0..ds.tasks() {
            let e = ds.entries(p, &train[p]);
            if e.is_empty() {
                return Err(Error::EmptyMask(format!("no training entries for task {}", ds.task_names[p])));
            }
            t.push(Arc::new(e));
            v.push(Arc::new(ds.entries(p, &val[p])));
        }
        Ok(TrainData { train: t, val: v })
    }

    pub fn from_splits(ds: &QosDataset, s: &Splits) -> Result<Self> {
        Self::from_masks(ds, &s.train, &s.val)
    }

    pub fn tasks(&self) -> usize {
        self.train.len()
    }
}

/// Mean absolute error of `pred` over `entries`.
pub fn task_loss(pred: &Mat, entries: &[(usize, usize, f64)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyMask("task loss over an empty mask".into()));
    }
    Ok(entries.iter().map(|&(i, j, t)| (t - pred.get(i, j)).abs()).sum::<f64>() / entries.len() as f64)
}

/// `Σ wᵖLᵖ + λ(L0_snr + L0_cross)`.
pub fn total_loss(losses: &[f64], weights: &[f64], l0: (f64, f64), lambda: f64) -> f64 {
    losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() + lambda * (l0.0 + l0.1)
}

/// Objective value and per-tensor gradients at fixed weights and gate noise.
/// Weights are constants: no gradient flows through them.
pub fn objective(
    net: &SharpNet,
    store: &ParamStore,
    feats: &FeatureBank,
    graphs: &GraphOps,
    train: &[Entries],
    weights: &[f64],
    lambda: f64,
    noise: &GateNoise,
) -> Result<(f64, Vec<Mat>)> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, store, true);
    let fwd = net.forward(&mut tape, &vars, feats, graphs, Mode::Train(noise))?;
    let losses: Vec<Var> = fwd.preds.iter().zip(train).map(|(&p, e)| tape.masked_mae(p, e)).collect();
    let weighted = tape.weighted_sum(&losses, weights);
    let total = penalize(&mut tape, weighted, fwd.l0_snr, fwd.l0_cross, lambda);
    let g = tape.backward(total);
    let grads = vars
        .iter()
        .zip(&store.values)
        .map(|(&v, m)| g.get_or_zeros(v, m.rows, m.cols))
        .collect();
    Ok((tape.scalar(total), grads))
}

fn penalize(tape: &mut Tape, loss: Var, l0_snr: Var, l0_cross: Var, lambda: f64) -> Var {
    tape.weighted_sum(&[loss, l0_snr, l0_cross], &[1.0, lambda, lambda])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_mae: Vec<f64>,
    /// Scale-normalized validation MAE (see [`scaled_val_loss`]).
    pub val_loss: f64,
    pub weights: Vec<f64>,
    pub expected_l0_snr: f64,
    pub expected_l0_cross: f64,
}

pub fn write_history_csv(path: &Path, task_names: &[String], rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("epoch");
    for n in task_names {
        out.push_str(&format!(",train_mae_{n}"));
    }
    out.push_str(",val_loss");
    for n in task_names {
        out.push_str(&format!(",w_{n}"));
    }
    out.push_str(",expected_l0_snr,expected_l0_cross\n");
    for r in rows {
        out.push_str(&r.epoch.to_string());
        for v in r.train_mae.iter().chain(std::iter::once(&r.val_loss)).chain(&r.weights) {
            out.push_str(&format!(",{v:e}"));
        }
        out.push_str(&format!(",{:e},{:e}\n", r.expected_l0_snr, r.expected_l0_cross));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean absolute target value; the fixed per-task scale of the monitor.
pub fn value_scale(entries: &[(usize, usize, f64)]) -> f64 {
    let s = entries.iter().map(|e| e.2.abs()).sum::<f64>() / entries.len().max(1) as f64;
    if s > 0.0 { s } else { 1.0 }
}

/// Early-stopping criterion: `(1/P)·Σ_p val_MAE_p / scale_p`. Fixed scales
/// keep it comparable across epochs, unlike the moving balance weights.
pub fn scaled_val_loss(val_losses: &[f64], scales: &[f64]) -> f64 {
    val_losses.iter().zip(scales).map(|(l, s)| l / s).sum::<f64>() / val_losses.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// A loss or gradient went non-finite; the best finite parameters are kept.
    NonFinite { epoch: usize, what: String },
}

/// Loop state exposed after training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub balancer: Balancer,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub since_best: usize,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Parameters at the best monitored epoch.
    pub params: ParamStore,
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
    pub state: TrainState,
    pub seconds: f64,
}

/// Instrumentation points for tests and diagnostics.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Replaces the monitored value `(epoch, val_loss) -> monitored`.
    pub monitor: Option<&'a dyn Fn(usize, f64) -> f64>,
    /// Runs after each optimizer step.
    pub after_step: Option<&'a mut dyn FnMut(usize, &mut ParamStore)>,
}

pub fn train(
    net: &SharpNet,
    init: ParamStore,
    feats: &FeatureBank,
    graphs: &GraphOps,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_with(net, init, feats, graphs, data, cfg, Hooks::default())
}

pub fn train_with(
    net: &SharpNet,
    init: ParamStore,
    feats: &FeatureBank,
    graphs: &GraphOps,
    data: &TrainData,
    cfg: &TrainConfig,
    mut hooks: Hooks,
) -> Result<TrainResult> {
    cfg.validate()?;
    let tasks = net.tasks;
    if data.tasks() != tasks {
        return Err(Error::Shape(format!("{} tasks of data for a {tasks}-task model", data.tasks())));
    }
    if data.train.iter().any(|e| e.is_empty()) {
        return Err(Error::EmptyMask("a task has no training entries".into()));
    }
    // an empty validation set falls back to the training entries
    let monitor_sets: Vec<&Entries> =
        data.val.iter().zip(&data.train).map(|(v, t)| if v.is_empty() { t } else { v }).collect();
    let scales: Vec<f64> = data.train.iter().map(|e| value_scale(e)).collect();
    let started = Instant::now();
    let mut store = init;
    let decay = store.decay_mask();
    let mut state = TrainState {
        balancer: Balancer::new(cfg.balancing, tasks, cfg.ema_beta, cfg.dwa_temperature, cfg.adamw()),
        optimizer: AdamW::new(cfg.adamw(), store.values.iter().map(Mat::shape)),
        epoch: 0,
        best_loss: f64::INFINITY,
        best_epoch: 0,
        since_best: 0,
    };
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut rng = rng_for(cfg.seed, NOISE_STREAM);
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let noise = GateNoise::sample(&mut rng, tasks, net.cfg.k1, net.cfg.k2);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, &store, true);
        let fwd = net.forward(&mut tape, &vars, feats, graphs, Mode::Train(&noise))?;
        let losses: Vec<Var> = fwd.preds.iter().zip(&data.train).map(|(&p, e)| tape.masked_mae(p, e)).collect();
        let loss_vals: Vec<f64> = losses.iter().map(|&l| tape.scalar(l)).collect();
        let (l0s, l0c) = (tape.scalar(fwd.l0_snr), tape.scalar(fwd.l0_cross));
        if loss_vals.iter().any(|l| !l.is_finite()) {
            stop = StopReason::NonFinite { epoch, what: format!("training loss {loss_vals:?}") };
            break;
        }

        // monitor on the parameters that produced this epoch's losses
        let out = net.infer(&store, feats, graphs);
        let weights = state.balancer.advance(&loss_vals);
        let val_losses = match out {
            Ok(o) => o.preds.iter().zip(&monitor_sets).map(|(p, e)| task_loss(p, e)).collect::<Result<Vec<_>>>()?,
            Err(Error::NonFinite(w)) => {
                stop = StopReason::NonFinite { epoch, what: w };
                break;
            }
            Err(e) => return Err(e),
        };
        let val_loss = scaled_val_loss(&val_losses, &scales);
        history.push(HistoryRow {
            epoch,
            train_mae: loss_vals.clone(),
            val_loss,
            weights: weights.clone(),
            expected_l0_snr: l0s,
            expected_l0_cross: l0c,
        });
        let monitored = match hooks.monitor {
            Some(f) => f(epoch, val_loss),
            None => val_loss,
        };
        if !monitored.is_finite() {
            stop = StopReason::NonFinite { epoch, what: format!("validation loss {monitored}") };
            break;
        }
        if monitored < state.best_loss {
            state.best_loss = monitored;
            state.best_epoch = epoch;
            state.since_best = 0;
            best.clone_from(&store);
        } else {
            state.since_best += 1;
            if state.since_best >= cfg.patience {
                stop = StopReason::Patience;
                break;
            }
        }
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            log::info!("epoch {epoch}: train {loss_vals:?} val {val_loss:.6} w {weights:?} L0 ({l0s:.3}, {l0c:.3})");
        }

        let (weighted, huw_s) = state.balancer.weighted_loss(&mut tape, &losses);
        let total = penalize(&mut tape, weighted, fwd.l0_snr, fwd.l0_cross, cfg.lambda);
        let g = tape.backward(total);
        let grads: Vec<Mat> = vars.iter().zip(&store.values).map(|(&v, m)| g.get_or_zeros(v, m.rows, m.cols)).collect();
        if grads.iter().any(|m| !m.all_finite()) {
            stop = StopReason::NonFinite { epoch, what: "gradient".into() };
            break;
        }
        state.optimizer.update(&mut store.values, &grads, &decay);
        state.balancer.step(huw_s.and_then(|s| g.get(s)));
        if let Some(f) = hooks.after_step.as_mut() {
            f(epoch, &mut store);
        }
    }
    if let StopReason::NonFinite { epoch, what } = &stop {
        log::error!("non-finite {what} at epoch {epoch}; keeping parameters from epoch {}", state.best_epoch);
    }
    Ok(TrainResult { params: best, history, stop, state, seconds: started.elapsed().as_secs_f64() })
}
