//! Per-task loss weighting: EMA (the production policy) plus the equal,
//! DWA and uncertainty-weighting baselines used in ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::{Tape, Var};

pub const EMA_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balancing {
    Equal,
    Dwa,
    Huw,
    #[default]
    Ema,
}

impl FromStr for Balancing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "equal" | "eqw" => Ok(Balancing::Equal),
            "dwa" => Ok(Balancing::Dwa),
            "huw" => Ok(Balancing::Huw),
            "ema" => Ok(Balancing::Ema),
            other => Err(Error::Config(format!("unknown balancing mode {other:?} (equal|dwa|huw|ema)"))),
        }
    }
}

impl fmt::Display for Balancing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Balancing::Equal => "equal",
            Balancing::Dwa => "dwa",
            Balancing::Huw => "huw",
            Balancing::Ema => "ema",
        })
    }
}

/// Smoothed task losses and the inverse-loss weights derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub beta: f64,
    pub eps: f64,
    pub smoothed: Vec<f64>,
}

impl EmaState {
    pub fn new(tasks: usize, beta: f64) -> Self {
        EmaState { beta, eps: EMA_EPS, smoothed: vec![1.0; tasks] }
    }

    pub fn update(&mut self, losses: &[f64]) {
        assert_eq!(losses.len(), self.smoothed.len());
        for (s, &l) in self.smoothed.iter_mut().zip(losses) {
            *s = self.beta * *s + (1.0 - self.beta) * l;
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        ema_weights(&self.smoothed, self.eps)
    }
}

/// `wᵖ = (L̃ᵖ+ε)⁻¹ / Σ_q (L̃^q+ε)⁻¹`.
pub fn ema_weights(smoothed: &[f64], eps: f64) -> Vec<f64> {
    let inv: Vec<f64> = smoothed.iter().map(|&s| 1.0 / (s + eps)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// DWA weights `P·exp(rᵖ/T) / Σ exp(r^q/T)` with `rᵖ = Lᵖ_{t−1} / Lᵖ_{t−2}`;
/// all ones until two epochs of history exist.
pub fn dwa_weights(history: &[Vec<f64>], tasks: usize, temperature: f64) -> Vec<f64> {
    if history.len() < 2 {
        return vec![1.0; tasks];
    }
    let (prev, prev2) = (&history[history.len() - 1], &history[history.len() - 2]);
    let e: Vec<f64> = (0..tasks).map(|p| (prev[p] / prev2[p].max(f64::MIN_POSITIVE) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| tasks as f64 * v / total).collect()
}

/// Uncertainty-weighted loss `Σ_p ½e^{−s_p}Lᵖ + ½s_p` with `s = log σ²`.
pub fn huw_loss(losses: &[f64], log_var: &[f64]) -> f64 {
    losses.iter().zip(log_var).map(|(l, s)| 0.5 * (-s).exp() * l + 0.5 * s).sum()
}

/// A weighting policy with its running state.
#[derive(Clone, Debug, PartialEq)]
pub struct Balancer {
    pub kind: Balancing,
    pub ema: EmaState,
    pub dwa_temperature: f64,
    dwa_history: Vec<Vec<f64>>,
    /// HUW log-variances and their optimizer.
    pub log_var: Vec<f64>,
    huw_opt: AdamW,
    last: Vec<f64>,
}

impl Balancer {
    pub fn new(kind: Balancing, tasks: usize, ema_beta: f64, dwa_temperature: f64, opt: AdamWConfig) -> Self {
        let huw_cfg = AdamWConfig { weight_decay: 0.0, ..opt };
        Balancer {
            kind,
            ema: EmaState::new(tasks, ema_beta),
            dwa_temperature,
            dwa_history: Vec::new(),
            log_var: vec![0.0; tasks],
            huw_opt: AdamW::new(huw_cfg, [(1, tasks)]),
            last: Self::initial(kind, tasks),
        }
    }

    fn initial(kind: Balancing, tasks: usize) -> Vec<f64> {
        match kind {
            Balancing::Dwa => vec![1.0; tasks],
            Balancing::Huw => vec![0.5; tasks],
            _ => vec![1.0 / tasks as f64; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.ema.smoothed.len()
    }

    /// Weights for the current epoch given its (detached) task losses.
    /// EMA folds the current losses in first; DWA only looks at earlier epochs.
    pub fn advance(&mut self, losses: &[f64]) -> Vec<f64> {
        let p = self.tasks();
        let w = match self.kind {
            Balancing::Equal => vec![1.0 / p as f64; p],
            Balancing::Ema => {
                self.ema.update(losses);
                self.ema.weights()
            }
            Balancing::Dwa => {
                let w = dwa_weights(&self.dwa_history, p, self.dwa_temperature);
                self.dwa_history.push(losses.to_vec());
                if self.dwa_history.len() > 2 {
                    self.dwa_history.remove(0);
                }
                w
            }
            Balancing::Huw => self.log_var.iter().map(|s| 0.5 * (-s).exp()).collect(),
        };
        self.last = w.clone();
        w
    }

    /// Weights from the latest [`advance`](Self::advance).
    pub fn current(&self) -> &[f64] {
        &self.last
    }

    /// The balanced loss on the tape. HUW also returns its log-variance leaf.
    pub fn weighted_loss(&self, tape: &mut Tape, losses: &[Var]) -> (Var, Option<Var>) {
        match self.kind {
            Balancing::Huw => {
                let s = tape.leaf(Mat::from_vec(1, losses.len(), self.log_var.clone()).expect("log-variance row"));
                let neg = tape.mul_const(s, -1.0);
                let prec = tape.exp(neg);
                let mut terms = Vec::with_capacity(losses.len() + 1);
                for (p, &l) in losses.iter().enumerate() {
                    let w = tape.pick(prec, 0, p);
                    terms.push(tape.scale_by(l, w));
                }
                terms.push(tape.sum(s));
                let ones = vec![0.5; terms.len()];
                (tape.weighted_sum(&terms, &ones), Some(s))
            }
            _ => (tape.weighted_sum(losses, &self.last), None),
        }
    }

    /// Apply the HUW log-variance gradient (no-op for other policies).
    pub fn step(&mut self, grad: Option<&Mat>) {
        if let (Balancing::Huw, Some(g)) = (self.kind, grad) {
            let mut s = [Mat::from_vec(1, self.log_var.len(), self.log_var.clone()).expect("row")];
            self.huw_opt.update(&mut s, std::slice::from_ref(g), &[false]);
            self.log_var = s[0].data.clone();
        }
    }
}
