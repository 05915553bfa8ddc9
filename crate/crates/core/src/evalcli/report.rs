//! The evaluation report (`report.json`) and its Markdown rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::ConfidenceInterval;
use crate::error::{Error, Result};
use crate::trainloop::StopReason;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Per-service training mean.
    pub baseline_mae: f64,
    pub baseline_rmse: f64,
    /// Test entries touching a cold user or service, when a scenario is active.
    pub cold_n_test: Option<usize>,
    pub cold_mae: Option<f64>,
    pub intervals: Vec<ConfidenceInterval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: String,
    pub metric: String,
    pub reference: String,
    pub model: f64,
    pub reference_value: f64,
    /// Relative improvement of the model over the reference, in percent.
    pub improvement: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub data_seed: u64,
    pub config_hash: String,
    pub source: String,
    pub n: usize,
    pub m: usize,
    pub train_density: f64,
    pub balancing: String,
    pub cold_start: Option<String>,
    pub outlier_frac: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stop: Option<StopReason>,
    pub parameters: usize,
    /// Multiply–adds of one inference forward pass.
    pub macs: u64,
    pub active_gates: usize,
    pub total_gates: usize,
    pub curvatures: Vec<f64>,
    pub strict_determinism: bool,
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub preprocess: f64,
    pub features: f64,
    pub graphs: f64,
    pub train: f64,
    pub evaluate: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub status: Status,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub tasks: Vec<TaskReport>,
    pub comparisons: Vec<Comparison>,
    pub run: RunMeta,
    /// Omitted in strict mode so reports compare byte for byte; the
    /// timings then go to `timing.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl EvalReport {
    pub fn incomplete(run: RunMeta, stage: &str, error: &str) -> Self {
        EvalReport {
            status: Status::Incomplete,
            failed_stage: Some(stage.to_string()),
            error: Some(error.to_string()),
            tasks: Vec::new(),
            comparisons: Vec::new(),
            run,
            timing: None,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Human-readable summary.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let r = &self.run;
        let _ = writeln!(s, "# Run summary\n");
        if self.status == Status::Incomplete {
            let _ = writeln!(
                s,
                "**INCOMPLETE** — stage `{}` failed: {}\n",
                self.failed_stage.as_deref().unwrap_or("?"),
                self.error.as_deref().unwrap_or("")
            );
        }
        let _ = writeln!(
            s,
            "- data: {} ({}×{}), TD {}%, seed {} (data seed {})",
            r.source, r.n, r.m, r.train_density, r.seed, r.data_seed
        );
        let _ = writeln!(
            s,
            "- balancing: {}; cold start: {}; outliers removed: {}%",
            r.balancing,
            r.cold_start.as_deref().unwrap_or("none"),
            r.outlier_frac
        );
        let stop = r.stop.as_ref().map(|x| format!("{x:?}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "- epochs: {} (best {}), stop: {stop}", r.epochs_run, r.best_epoch);
        let _ = writeln!(
            s,
            "- parameters: {}, MACs/forward: {}, active gates: {}/{}",
            r.parameters, r.macs, r.active_gates, r.total_gates
        );
        let _ = writeln!(s, "- config hash: `{}`\n", r.config_hash);

        if !self.tasks.is_empty() {
            let _ = writeln!(s, "| task | train | test | MAE | RMSE | baseline MAE | baseline RMSE | cold MAE |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|");
            for t in &self.tasks {
                let cold = t.cold_mae.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                    t.name, t.n_train, t.n_test, t.mae, t.rmse, t.baseline_mae, t.baseline_rmse, cold
                );
            }
            let _ = writeln!(s);
        }
        if !self.comparisons.is_empty() {
            let _ = writeln!(s, "| task | metric | model | {} | I(%) |", self.comparisons[0].reference);
            let _ = writeln!(s, "|---|---|---:|---:|---:|");
            for c in &self.comparisons {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {:.2} |",
                    c.task, c.metric, c.model, c.reference_value, c.improvement
                );
            }
            let _ = writeln!(s);
        }
        let with_ci: Vec<&TaskReport> = self.tasks.iter().filter(|t| !t.intervals.is_empty()).collect();
        if !with_ci.is_empty() {
            let _ = writeln!(s, "| task | level | G | m̄ | s | CI | overall MAE | H₀ |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|---|---:|---|");
            for t in with_ci {
                for c in &t.intervals {
                    let _ = writeln!(
                        s,
                        "| {} | {}% | {} | {:.4} | {:.4} | ({:.4}, {:.4}) | {:.4} | {} |",
                        t.name,
                        c.level,
                        c.groups,
                        c.mean,
                        c.std,
                        c.lower,
                        c.upper,
                        c.overall_mae,
                        if c.h0_accepted { "accepted" } else { "rejected" }
                    );
                }
            }
            let _ = writeln!(s);
        }
        if let Some(t) = &self.timing {
            let _ = writeln!(
                s,
                "Timing (s): preprocess {:.2}, features {:.2}, graphs {:.2}, train {:.2}, evaluate {:.2}, total {:.2}",
                t.preprocess, t.features, t.graphs, t.train, t.evaluate, t.total
            );
        }
        s
    }
}

/// Markdown table comparing several labelled runs (sweeps).
pub fn sweep_markdown(title: &str, runs: &[(String, EvalReport)]) -> String {
    let mut s = format!("# {title}\n\n");
    let names: Vec<String> = runs.first().map(|(_, r)| r.tasks.iter().map(|t| t.name.clone()).collect()).unwrap_or_default();
    let mut head = String::from("| variant |");
    let mut rule = String::from("|---|");
    for n in &names {
        head.push_str(&format!(" {n} MAE | {n} RMSE |"));
        rule.push_str("---:|---:|");
    }
    let _ = writeln!(s, "{head}\n{rule}");
    for (label, r) in runs {
        let mut row = format!("| {label} |");
        for n in &names {
            match r.task(n) {
                Some(t) => row.push_str(&format!(" {:.4} | {:.4} |", t.mae, t.rmse)),
                None => row.push_str(" - | - |"),
            }
        }
        let _ = writeln!(s, "{row}");
    }
    s
}
