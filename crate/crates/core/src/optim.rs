//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes.into_iter().map(|(r, c)| (Mat::zeros(r, c), Mat::zeros(r, c))).unzip();
        AdamW { cfg, step: 0, m, v }
    }

    /// One update. `decay[k]` selects which tensors receive weight decay.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat], decay: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let wd = if decay[k] { weight_decay } else { 0.0 };
            let (p, g) = (&mut params[k].data, &grads[k].data);
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (wd * p[i]);
                p[i] -= lr * (mhat / (vhat.sqrt() + eps));
            }
        }
    }
}
