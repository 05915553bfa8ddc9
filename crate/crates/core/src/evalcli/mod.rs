//! Metrics, confidence intervals, experiment orchestration and the
//! loss-balancing baselines used in ablations.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use config::{ExperimentConfig, Overrides, SourceKind};
pub use experiment::{cold_start_sweep, load_data, outlier_sweep, prepare_splits, run_experiment, Pipeline, Prepared, Stage};
pub use metrics::{confidence_intervals, improvement, mae_rmse, metrics, z_value, ConfidenceInterval};
pub use report::{EvalReport, Status, TaskReport};

use crate::error::Result;
use crate::trainloop::{Balancer, Balancing, TrainConfig};

/// A loss-weighting policy by name (`equal`, `dwa`, `huw` or `ema`); all
/// four share the [`Balancer`] interface used by the training loop.
pub fn balancing_baselines(mode: &str, tasks: usize, cfg: &TrainConfig) -> Result<Balancer> {
    let kind: Balancing = mode.parse()?;
    Ok(Balancer::new(kind, tasks, cfg.ema_beta, cfg.dwa_temperature, cfg.adamw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_by_name() {
        let cfg = TrainConfig::default();
        let mut eq = balancing_baselines("equal", 3, &cfg).unwrap();
        assert_eq!(eq.advance(&[1.0, 2.0, 3.0]), vec![1.0 / 3.0; 3]);
        let mut dwa = balancing_baselines("dwa", 2, &cfg).unwrap();
        assert_eq!(dwa.advance(&[1.0, 2.0]), vec![1.0, 1.0]);
        let mut ema = balancing_baselines("ema", 2, &cfg).unwrap();
        ema.ema.eps = 0.0;
        ema.ema.smoothed = vec![1.0, 3.0];
        ema.ema.beta = 1.0;
        let w = ema.advance(&[5.0, 5.0]);
        assert!((w[0] - 0.75).abs() < 1e-9 && (w[1] - 0.25).abs() < 1e-9);
        assert!(balancing_baselines("gradnorm", 2, &cfg).is_err());
    }
}
