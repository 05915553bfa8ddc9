//! Named parameter tensors with a stable flattened ordering.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperball::Curvature;
use crate::linalg::Mat;
use crate::rng::{fnv1a, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Glorot,
    Zeros,
    Ones,
    /// Normal(0, std) routing logits.
    LogAlpha(f64),
    /// Raw value giving this effective curvature.
    Curvature(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Receives decoupled weight decay.
    pub decay: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Mat>,
}

/// `task3/head/w1` → `task*/head/w1`, used to tie per-task initializations.
fn untasked(name: &str) -> String {
    name.split('/')
        .map(|part| match part.strip_prefix("task") {
            Some(rest) if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) => "task*",
            _ => part,
        })
        .collect::<Vec<_>>()
        .join("/")
}

impl ParamStore {
    pub fn zeros(specs: Vec<ParamSpec>) -> Self {
        let values = specs.iter().map(|s| Mat::zeros(s.rows, s.cols)).collect();
        ParamStore { specs, values }
    }

    /// Initialize every tensor from its own stream, keyed by name (so the
    /// draw for a tensor does not depend on which other tensors exist).
    /// With `tie_tasks`, tensors differing only in their task index get
    /// identical values.
    pub fn initialize(&mut self, seed: u64, tie_tasks: bool) {
        for (spec, value) in self.specs.iter().zip(&mut self.values) {
            let key = if tie_tasks { untasked(&spec.name) } else { spec.name.clone() };
            let mut rng = rng_for(seed, fnv1a(&key));
            let n = spec.numel();
            let data: Vec<f64> = match spec.init {
                Init::Glorot => {
                    let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::LogAlpha(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Curvature(c) => vec![Curvature::from_effective(c).raw; n],
            };
            value.data = data;
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|k| &self.values[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |k| &mut self.values[k])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.numel())));
        }
        let mut off = 0;
        for m in &mut self.values {
            let k = m.data.len();
            m.data.copy_from_slice(&flat[off..off + k]);
            off += k;
        }
        Ok(())
    }

    /// `(name, offset, rows, cols)` in flattened order.
    pub fn manifest(&self) -> Vec<(String, usize, usize, usize)> {
        let mut off = 0;
        self.specs
            .iter()
            .map(|s| {
                let e = (s.name.clone(), off, s.rows, s.cols);
                off += s.numel();
                e
            })
            .collect()
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.specs.iter().map(|s| s.decay).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Mat::all_finite)
    }
}
