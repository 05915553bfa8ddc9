//! Error metrics, relative improvement and grouped confidence intervals.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::rng_for;

const CI_STREAM: u64 = 0xC1_0001;

/// `(MAE, RMSE)` of `pred` over `(row, col, truth)` entries.
pub fn metrics(pred: &Mat, entries: &[(usize, usize, f64)]) -> Result<(f64, f64)> {
    let errs = errors(pred, entries);
    mae_rmse(&errs)
}

/// Signed errors `prediction − truth`, in entry order.
pub fn errors(pred: &Mat, entries: &[(usize, usize, f64)]) -> Vec<f64> {
    entries.iter().map(|&(i, j, t)| pred.get(i, j) - t).collect()
}

pub fn mae_rmse(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptyMask("metrics over an empty test set".into()));
    }
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok((mae, rmse))
}

/// Relative improvement of `p1` over `p2`, in percent.
pub fn improvement(p1: f64, p2: f64) -> Result<f64> {
    if p2 == 0.0 {
        return Err(Error::Config("improvement against a zero reference".into()));
    }
    Ok((p2 - p1) / p2 * 100.0)
}

/// Two-sided normal quantile for the supported confidence levels.
pub fn z_value(level: u32) -> Result<f64> {
    match level {
        90 => Ok(1.6449),
        95 => Ok(1.96),
        99 => Ok(2.5758),
        _ => Err(Error::Config(format!("unsupported confidence level {level} (90, 95 or 99)"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub level: u32,
    pub z: f64,
    pub groups: usize,
    /// Mean of the group MAEs.
    pub mean: f64,
    /// Sample standard deviation of the group MAEs.
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
    /// MAE over all errors (including any dropped remainder).
    pub overall_mae: f64,
    pub h0_accepted: bool,
}

/// `m̄ ± z·s/√G` with `s` the sample std of the MAE of each group.
pub fn interval(mean: f64, std: f64, groups: usize, level: u32) -> Result<(f64, f64)> {
    let z = z_value(level)?;
    let half = z * std / (groups as f64).sqrt();
    Ok((mean - half, mean + half))
}

/// Group MAEs from `G` equal consecutive chunks; the `len mod G` tail is
/// dropped. With `shuffle_seed`, the errors are permuted first.
pub fn group_maes(errors: &[f64], groups: usize, shuffle_seed: Option<u64>) -> Result<Vec<f64>> {
    if groups < 2 {
        return Err(Error::Config("at least two groups are needed for a spread".into()));
    }
    if errors.len() < groups {
        return Err(Error::Config(format!("{} errors cannot fill {groups} groups", errors.len())));
    }
    let mut e = errors.to_vec();
    if let Some(seed) = shuffle_seed {
        e.shuffle(&mut rng_for(seed, CI_STREAM));
    }
    e.iter_mut().for_each(|v| *v = v.abs());
    let size = e.len() / groups;
    Ok(e.chunks_exact(size).take(groups).map(shifted_mean).collect())
}

/// Mean computed around the first value, so constant inputs come out exact.
fn shifted_mean(v: &[f64]) -> f64 {
    v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / v.len() as f64
}

pub fn confidence_intervals(
    errors: &[f64],
    groups: usize,
    levels: &[u32],
    shuffle_seed: Option<u64>,
) -> Result<Vec<ConfidenceInterval>> {
    let g = group_maes(errors, groups, shuffle_seed)?;
    let mean = shifted_mean(&g);
    let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (groups - 1) as f64;
    let std = var.sqrt();
    let abs: Vec<f64> = errors.iter().map(|v| v.abs()).collect();
    let overall = shifted_mean(&abs);
    levels
        .iter()
        .map(|&level| {
            let (lower, upper) = interval(mean, std, groups, level)?;
            Ok(ConfidenceInterval {
                level,
                z: z_value(level)?,
                groups,
                mean,
                std,
                lower,
                upper,
                overall_mae: overall,
                h0_accepted: lower <= overall && overall <= upper,
            })
        })
        .collect()
}

/// Per-service mean of the training entries, falling back to the global
/// training mean for services without any.
pub fn service_mean_baseline(n: usize, m: usize, train: &[(usize, usize, f64)]) -> Result<Mat> {
    if train.is_empty() {
        return Err(Error::EmptyMask("baseline needs training entries".into()));
    }
    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for &(_, j, v) in train {
        sum[j] += v;
        cnt[j] += 1;
    }
    let global = train.iter().map(|e| e.2).sum::<f64>() / train.len() as f64;
    let col: Vec<f64> = (0..m).map(|j| if cnt[j] > 0 { sum[j] / cnt[j] as f64 } else { global }).collect();
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&col);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let pred = Mat::from_vec(1, 2, vec![4.0, 0.0]).unwrap();
        assert_eq!(metrics(&pred, &[(0, 0, 4.0), (0, 1, 0.0)]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = mae_rmse(&[3.0, -4.0]).unwrap();
        assert_eq!(mae, 3.5);
        assert!((rmse - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(mae_rmse(&[]).is_err());
    }

    #[test]
    fn improvement_cells() {
        assert_eq!(improvement(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(format!("{:.2}", improvement(0.3668, 0.4115).unwrap()), "10.86");
        assert_eq!(format!("{:.2}", improvement(13.2402, 15.4529).unwrap()), "14.32");
        assert!(improvement(1.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_interval() {
        let (lo, hi) = interval(0.3243, 0.1773, 50, 95).unwrap();
        let half = 1.96 * 0.1773 / 50f64.sqrt();
        assert!((lo - (0.3243 - half)).abs() < 1e-12 && (hi - (0.3243 + half)).abs() < 1e-12);
        assert_eq!(format!("({lo:.4}, {hi:.4})"), "(0.2752, 0.3734)");
        assert!(z_value(80).is_err());
    }

    #[test]
    fn degenerate_spread() {
        let ci = confidence_intervals(&vec![-0.7; 120], 50, &[90, 95, 99], Some(3)).unwrap();
        for c in &ci {
            assert_eq!((c.lower, c.upper, c.std), (0.7, 0.7, 0.0));
            assert!(c.h0_accepted);
        }
        assert!(confidence_intervals(&[1.0; 10], 50, &[95], None).is_err());
    }

    #[test]
    fn grouping_drops_remainder() {
        let e: Vec<f64> = (0..103).map(|v| v as f64).collect();
        let g = group_maes(&e, 50, None).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[49], 98.5);
    }

    #[test]
    fn baseline_means() {
        let b = service_mean_baseline(2, 3, &[(0, 0, 1.0), (1, 0, 3.0), (0, 1, 5.0)]).unwrap();
        assert_eq!(b.row(1), &[2.0, 5.0, 3.0]);
    }

    #[test]
    fn width_shrinks_with_more_groups() {
        use rand::Rng;
        let mut rng = rng_for(17, 1);
        let population: Vec<f64> = (0..50_000).map(|_| -rng.gen::<f64>().ln()).collect();
        let width = |g: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let sample: Vec<f64> = (0..g * 20).map(|_| population[rng.gen_range(0..population.len())]).collect();
            let ci = confidence_intervals(&sample, g, &[95], None).unwrap();
            ci[0].upper - ci[0].lower
        };
        let (mut w50, mut w100) = (0.0, 0.0);
        for _ in 0..100 {
            w50 += width(50, &mut rng);
            w100 += width(100, &mut rng);
        }
        let ratio = w100 / w50;
        assert!((ratio / std::f64::consts::FRAC_1_SQRT_2 - 1.0).abs() < 0.15, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(e in proptest::collection::vec(-100.0f64..100.0, 1..64)) {
            let (mae, rmse) = mae_rmse(&e).unwrap();
            prop_assert!(mae <= rmse * (1.0 + 1e-12));
        }

        #[test]
        fn intervals_nest(e in proptest::collection::vec(-10.0f64..10.0, 50..400), seed in 0u64..100) {
            let ci = confidence_intervals(&e, 50, &[90, 95, 99], Some(seed)).unwrap();
            prop_assert!(ci[1].lower <= ci[0].lower && ci[0].upper <= ci[1].upper);
            prop_assert!(ci[2].lower <= ci[1].lower && ci[1].upper <= ci[2].upper);
        }
    }
}
