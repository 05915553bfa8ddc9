use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::iforest::{IsolationForest, IsolationForestConfig};
use super::{Mask, QosDataset};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Training-density split parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Percentage of observed entries used for training (incl. validation).
    pub train_density: f64,
    pub seed: u64,
    /// Fraction of the training side held out for early stopping.
    pub val_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_density: 10.0, seed: 0, val_fraction: 0.05 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_density > 0.0 && self.train_density < 100.0) {
            return Err(Error::Split(format!(
                "train density {} must lie in (0, 100)",
                self.train_density
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Split(format!(
                "validation fraction {} must lie in [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Per-task train / validation / test masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Mask>,
    pub val: Vec<Mask>,
    pub test: Vec<Mask>,
}

/// Sample each task's observed entries independently into train/val/test.
pub fn split(ds: &QosDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut out = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for p in 0..ds.tasks() {
        let mut cells = ds.observed[p].entries();
        let k = (spec.train_density / 100.0 * cells.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Split(format!(
                "task {}: {}% of {} observed entries rounds to zero training entries",
                ds.task_names[p],
                spec.train_density,
                cells.len()
            )));
        }
        let mut rng = rng_for(spec.seed, 0x5e11 + p as u64);
        cells.shuffle(&mut rng);
        let n_val = (spec.val_fraction * k as f64).round() as usize;
        let mut train = Mask::new(ds.n, ds.m);
        let mut val = Mask::new(ds.n, ds.m);
        let mut test = Mask::new(ds.n, ds.m);
        for (idx, &(i, j)) in cells.iter().enumerate() {
            if idx < n_val {
                val.set(i, j, true);
            } else if idx < k {
                train.set(i, j, true);
            } else {
                test.set(i, j, true);
            }
        }
        out.train.push(train);
        out.val.push(val);
        out.test.push(test);
    }
    Ok(out)
}

/// Cold-start scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColdStartKind {
    /// Users lose all training entries.
    CU,
    /// Services lose all training entries.
    CS,
    /// Both.
    CB,
}

impl std::str::FromStr for ColdStartKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CU" => Ok(ColdStartKind::CU),
            "CS" => Ok(ColdStartKind::CS),
            "CB" => Ok(ColdStartKind::CB),
            _ => Err(Error::Config(format!("unknown cold-start kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartSpec {
    pub kind: ColdStartKind,
    /// Percentage of entities made cold.
    pub csp: f64,
    pub seed: u64,
}

impl std::str::FromStr for ColdStartSpec {
    type Err = Error;
    /// `KIND:PCT`, e.g. `CB:10`. The seed defaults to 0.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, pct) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("cold-start spec {s:?} is not KIND:PCT")))?;
        let csp: f64 = pct
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad cold-start percentage {pct:?}")))?;
        Ok(ColdStartSpec { kind: kind.trim().parse()?, csp, seed: 0 })
    }
}

fn pick(count: usize, pct: f64, rng: &mut impl rand::Rng) -> Vec<usize> {
    let k = (pct / 100.0 * count as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Users and services selected by a cold-start spec. User and service
/// draws use separate streams, so CU and CB select the same users.
pub fn select_cold_entities(n: usize, m: usize, spec: &ColdStartSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=100.0).contains(&spec.csp) {
        return Err(Error::Config(format!("cold-start percentage {} outside [0, 100]", spec.csp)));
    }
    let users = match spec.kind {
        ColdStartKind::CU | ColdStartKind::CB => pick(n, spec.csp, &mut rng_for(spec.seed, 0xC01D_0001)),
        ColdStartKind::CS => Vec::new(),
    };
    let services = match spec.kind {
        ColdStartKind::CS | ColdStartKind::CB => pick(m, spec.csp, &mut rng_for(spec.seed, 0xC01D_0002)),
        ColdStartKind::CU => Vec::new(),
    };
    Ok((users, services))
}

/// Clear every training entry of the selected users/services in all tasks.
pub fn make_cold_start(ds: &QosDataset, train: &[Mask], spec: &ColdStartSpec) -> Result<Vec<Mask>> {
    let (users, services) = select_cold_entities(ds.n, ds.m, spec)?;
    let mut out = train.to_vec();
    for mask in &mut out {
        for &i in &users {
            for j in 0..ds.m {
                mask.set(i, j, false);
            }
        }
        for &j in &services {
            for i in 0..ds.n {
                mask.set(i, j, false);
            }
        }
    }
    Ok(out)
}

/// Drop the `fraction`% most anomalous test entries of each task, scored by
/// an isolation forest fitted on that task's test values.
pub fn filter_outliers(ds: &QosDataset, test: &[Mask], fraction: f64, seed: u64) -> Result<Vec<Mask>> {
    // The protocol sweeps 0–10%; larger fractions are accepted for toy sets.
    if !(0.0..100.0).contains(&fraction) {
        return Err(Error::Config(format!("outlier fraction {fraction} outside [0, 100)")));
    }
    let mut out = test.to_vec();
    if fraction == 0.0 {
        return Ok(out);
    }
    for (p, mask) in out.iter_mut().enumerate() {
        let entries = ds.entries(p, mask);
        if entries.is_empty() {
            continue;
        }
        let values: Vec<f64> = entries.iter().map(|e| e.2).collect();
        let forest = IsolationForest::fit(
            &values,
            &IsolationForestConfig::default(),
            seed.wrapping_add(p as u64),
        );
        let scores = forest.score_all(&values);
        let k = (fraction / 100.0 * values.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..values.len()).collect();
        // highest score first, ties by entry order
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &idx in order.iter().take(k) {
            let (i, j, _) = entries[idx];
            mask.set(i, j, false);
        }
    }
    Ok(out)
}
