//! Isolation forest over scalar values.

use rand::seq::index::sample;
use rand::Rng;

use crate::par;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct IsolationForestConfig {
    pub n_trees: usize,
    /// Upper bound on the per-tree subsample.
    pub max_samples: usize,
}

impl Default for IsolationForestConfig {
    fn default() -> Self {
        IsolationForestConfig { n_trees: 100, max_samples: 256 }
    }
}

enum Node {
    Split { at: f64, left: Box<Node>, right: Box<Node> },
    Leaf { size: usize },
}

/// Average unsuccessful-search path length in a BST of `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            let harmonic = (n - 1.0).ln() + 0.577_215_664_901_532_9;
            2.0 * harmonic - 2.0 * (n - 1.0) / n
        }
    }
}

fn grow(values: &mut [f64], depth: usize, max_depth: usize, rng: &mut impl Rng) -> Node {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.len() <= 1 || depth >= max_depth || lo == hi {
        return Node::Leaf { size: values.len() };
    }
    let at = rng.gen_range(lo..hi);
    let mut k = 0;
    for i in 0..values.len() {
        if values[i] < at {
            values.swap(i, k);
            k += 1;
        }
    }
    let (l, r) = values.split_at_mut(k);
    Node::Split {
        at,
        left: Box::new(grow(l, depth + 1, max_depth, rng)),
        right: Box::new(grow(r, depth + 1, max_depth, rng)),
    }
}

fn path_length(node: &Node, x: f64, depth: usize) -> f64 {
    match node {
        Node::Leaf { size } => depth as f64 + average_path_length(*size),
        Node::Split { at, left, right } => {
            if x < *at {
                path_length(left, x, depth + 1)
            } else {
                path_length(right, x, depth + 1)
            }
        }
    }
}

pub struct IsolationForest {
    trees: Vec<Node>,
    subsample: usize,
}

impl IsolationForest {
    /// Fit on `values`; each tree draws its subsample without replacement.
    pub fn fit(values: &[f64], cfg: &IsolationForestConfig, seed: u64) -> Self {
        let subsample = cfg.max_samples.min(values.len()).max(1);
        let max_depth = (subsample as f64).log2().ceil() as usize;
        let trees = par::map_indices(cfg.n_trees, |t| {
            let mut rng = rng_for(seed, t as u64);
            let mut pts: Vec<f64> = if values.is_empty() {
                Vec::new()
            } else {
                sample(&mut rng, values.len(), subsample).into_iter().map(|i| values[i]).collect()
            };
            grow(&mut pts, 0, max_depth, &mut rng)
        });
        IsolationForest { trees, subsample }
    }

    /// Mean path length of `x` over all trees.
    pub fn mean_depth(&self, x: f64) -> f64 {
        self.trees.iter().map(|t| path_length(t, x, 0)).sum::<f64>() / self.trees.len() as f64
    }

    /// Anomaly score `2^(-E[h(x)] / c(ψ))`; higher is more anomalous.
    pub fn score(&self, x: f64) -> f64 {
        let c = average_path_length(self.subsample);
        if c == 0.0 {
            return 0.5;
        }
        2f64.powf(-self.mean_depth(x) / c)
    }

    pub fn score_all(&self, xs: &[f64]) -> Vec<f64> {
        par::map_indices(xs.len(), |i| self.score(xs[i]))
    }
}
