//! The joint prediction network: hyperbolic graph/hypergraph encoders,
//! sparse routing over shared blocks, gated fusion and factorized heads.
//!
//! Everything is expressed on a [`Tape`], so one forward serves inference,
//! training and gradient checking.

mod io;
mod params;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featinit::FeatureBank;
use crate::graphs::GraphSet;
use crate::hyperball::{sigmoid, CURVATURE_EPS};
use crate::linalg::Mat;
use crate::tape::{SparseOp, Tape, Var};

pub use io::{load_checkpoint, read_gates_csv, save_checkpoint, write_gates_csv, Checkpoint};
pub use params::{Init, ParamSpec, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    /// HyConv layers per stack.
    pub layers: usize,
    pub k1: usize,
    pub k2: usize,
    pub d_snr: usize,
    pub tau: f64,
    pub gamma: f64,
    pub beta_stretch: f64,
    pub delta: f64,
    pub sigma1: String,
    pub sigma2: String,
    pub head_hidden: usize,
    pub head_out: usize,
    pub log_alpha_std: f64,
    pub curvature_init: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            layers: 2,
            k1: 4,
            k2: 4,
            d_snr: 64,
            tau: 2.0 / 3.0,
            gamma: 1.1,
            beta_stretch: -0.1,
            delta: 0.5,
            sigma1: "relu".into(),
            sigma2: "sigmoid".into(),
            head_hidden: 128,
            head_out: 64,
            log_alpha_std: 0.01,
            curvature_init: 1.0,
            norm_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 1.0) {
            return bad(format!("gamma {} must exceed 1", self.gamma));
        }
        if !(self.beta_stretch < 0.0) {
            return bad(format!("beta_stretch {} must be negative", self.beta_stretch));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} must lie in (0, 1)", self.delta));
        }
        if [self.d, self.k1, self.k2, self.d_snr, self.head_hidden, self.head_out].contains(&0) {
            return bad("all widths and block counts must be at least 1".into());
        }
        if !(self.curvature_init > CURVATURE_EPS) {
            return bad(format!("curvature_init must exceed {CURVATURE_EPS}"));
        }
        if self.sigma1 != "relu" {
            return bad(format!("unsupported sigma1 {:?} (only relu)", self.sigma1));
        }
        if self.sigma2 != "sigmoid" {
            return bad(format!("unsupported sigma2 {:?} (only sigmoid)", self.sigma2));
        }
        Ok(())
    }

    /// `−τ·log(−β/γ)`, the shift inside the expected-L0 sigmoid.
    pub fn l0_shift(&self) -> f64 {
        -self.tau * (-self.beta_stretch / self.gamma).ln()
    }
}

/// Stretched, clipped concrete sample for one gate; `u ∈ (0, 1)`.
pub fn hard_concrete_sample(log_alpha: f64, u: f64, cfg: &ModelConfig) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Config(format!("gate noise u = {u} must lie strictly inside (0, 1)")));
    }
    let s = sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / cfg.tau);
    Ok((s * (cfg.gamma - cfg.beta_stretch) + cfg.beta_stretch).clamp(0.0, 1.0))
}

/// Deterministic inference gate `1[σ(log α) > δ]`.
pub fn inference_gate(log_alpha: f64, delta: f64) -> f64 {
    if sigmoid(log_alpha) > delta {
        1.0
    } else {
        0.0
    }
}

/// Probability that a gate is non-zero.
pub fn expected_l0(log_alpha: f64, cfg: &ModelConfig) -> f64 {
    sigmoid(log_alpha + cfg.l0_shift())
}

/// Logistic gate noise `log u − log(1−u)`, per task and block.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNoise {
    pub snr: Vec<Vec<f64>>,
    pub cross: Vec<Vec<f64>>,
}

fn logistic(u: f64) -> f64 {
    u.ln() - (1.0 - u).ln()
}

impl GateNoise {
    pub fn sample(rng: &mut impl Rng, tasks: usize, k1: usize, k2: usize) -> Self {
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| loop {
                    let u: f64 = rng.gen();
                    if u > 0.0 {
                        break logistic(u);
                    }
                })
                .collect()
        };
        let snr = (0..tasks).map(|_| draw(k1)).collect();
        let cross = (0..tasks).map(|_| draw(k2)).collect();
        GateNoise { snr, cross }
    }

    /// From explicit uniforms; rejects `u ∈ {0, 1}`.
    pub fn from_uniform(snr: &[Vec<f64>], cross: &[Vec<f64>]) -> Result<Self> {
        let conv = |v: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            v.iter()
                .map(|row| {
                    row.iter()
                        .map(|&u| {
                            if u > 0.0 && u < 1.0 {
                                Ok(logistic(u))
                            } else {
                                Err(Error::Config(format!("gate noise u = {u} outside (0, 1)")))
                            }
                        })
                        .collect()
                })
                .collect()
        };
        Ok(GateNoise { snr: conv(snr)?, cross: conv(cross)? })
    }

    /// `u = 0.5` everywhere (zero logistic noise).
    pub fn median(tasks: usize, k1: usize, k2: usize) -> Self {
        GateNoise { snr: vec![vec![0.0; k1]; tasks], cross: vec![vec![0.0; k2]; tasks] }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Train(&'a GateNoise),
    Infer,
}

/// Tensor indices of one HyConv stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackIdx {
    /// `[w1, b1, w2, b2]` per layer.
    pub layers: Vec<[usize; 4]>,
    pub curvature: usize,
}

/// Tensor indices of one routing network.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterIdx {
    /// `[ln_gamma, ln_beta, dense_w, dense_b]` per block.
    pub blocks: Vec<[usize; 4]>,
    /// `[task][block]` output maps `d_snr → d`.
    pub task_w: Vec<Vec<usize>>,
    /// `1×K` logits per task.
    pub log_alpha: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Region, AS.
    pub ctx: [StackIdx; 2],
    pub ctx_proj: [usize; 2],
    pub qos: Vec<StackIdx>,
    pub hyper_user: Vec<StackIdx>,
    pub hyper_service: Vec<StackIdx>,
    pub task_proj: Vec<usize>,
    pub snr: RouterIdx,
    pub cross: RouterIdx,
    pub gate_w: Vec<usize>,
    /// `[w1, b1, w2, b2]` per task.
    pub heads: Vec<[usize; 4]>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let decay = !matches!(init, Init::LogAlpha(_) | Init::Curvature(_));
        self.specs.push(ParamSpec { name, rows, cols, decay, init });
        self.specs.len() - 1
    }

    fn stack(&mut self, prefix: &str, cfg: &ModelConfig) -> StackIdx {
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|l| {
                [
                    self.add(format!("{prefix}/l{l}/w1"), d, d, Init::Glorot),
                    self.add(format!("{prefix}/l{l}/b1"), 1, d, Init::Zeros),
                    self.add(format!("{prefix}/l{l}/w2"), d, d, Init::Glorot),
                    self.add(format!("{prefix}/l{l}/b2"), 1, d, Init::Zeros),
                ]
            })
            .collect();
        let curvature = self.add(format!("{prefix}/curvature"), 1, 1, Init::Curvature(cfg.curvature_init));
        StackIdx { layers, curvature }
    }

    fn router(&mut self, prefix: &str, k: usize, tasks: usize, cfg: &ModelConfig) -> RouterIdx {
        let blocks = (0..k)
            .map(|b| {
                [
                    self.add(format!("{prefix}/block{b}/ln_gamma"), 1, cfg.d, Init::Ones),
                    self.add(format!("{prefix}/block{b}/ln_beta"), 1, cfg.d, Init::Zeros),
                    self.add(format!("{prefix}/block{b}/dense_w"), cfg.d, cfg.d_snr, Init::Glorot),
                    self.add(format!("{prefix}/block{b}/dense_b"), 1, cfg.d_snr, Init::Zeros),
                ]
            })
            .collect();
        let mut task_w = Vec::new();
        let mut log_alpha = Vec::new();
        for p in 0..tasks {
            task_w.push(
                (0..k)
                    .map(|b| self.add(format!("{prefix}/task{p}/w{b}"), cfg.d_snr, cfg.d, Init::Glorot))
                    .collect(),
            );
            log_alpha.push(self.add(format!("{prefix}/task{p}/log_alpha"), 1, k, Init::LogAlpha(cfg.log_alpha_std)));
        }
        RouterIdx { blocks, task_w, log_alpha }
    }
}

/// Sparse operators for every graph, shared across forward passes.
#[derive(Clone, Debug)]
pub struct GraphOps {
    pub qos: Vec<Arc<SparseOp>>,
    pub region: Arc<SparseOp>,
    pub as_graph: Arc<SparseOp>,
    pub hyper_user: Vec<Arc<SparseOp>>,
    pub hyper_service: Vec<Arc<SparseOp>>,
}

impl GraphOps {
    pub fn new(gs: &GraphSet) -> Self {
        let op = |g: &crate::graphs::SparseAdj| SparseOp::new(g.to_csr());
        GraphOps {
            qos: gs.qos.iter().map(op).collect(),
            region: op(&gs.region),
            as_graph: op(&gs.as_graph),
            hyper_user: gs.hyper_user.iter().map(op).collect(),
            hyper_service: gs.hyper_service.iter().map(op).collect(),
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct FwdVars {
    pub y_ctx: [Var; 2],
    pub y_ra: Var,
    pub y_task: Vec<Var>,
    pub y_s: Vec<Var>,
    pub y_cs: Vec<Option<Var>>,
    pub y_scs: Vec<Var>,
    pub z: Vec<Var>,
    pub preds: Vec<Var>,
    pub l0_snr: Var,
    pub l0_cross: Var,
    /// Gate values used in this pass, `[task][block]`.
    pub gates_snr: Vec<Vec<f64>>,
    pub gates_cross: Vec<Vec<f64>>,
}

/// Materialized forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub y_region: Mat,
    pub y_as: Mat,
    pub y_ra: Mat,
    pub y_task: Vec<Mat>,
    pub y_s: Vec<Mat>,
    pub y_cs: Vec<Mat>,
    pub y_scs: Vec<Mat>,
    pub z: Vec<Mat>,
    pub preds: Vec<Mat>,
    pub gates_snr: Vec<Vec<f64>>,
    pub gates_cross: Vec<Vec<f64>>,
    pub l0_snr: f64,
    pub l0_cross: f64,
}

impl FwdVars {
    pub fn materialize(&self, tape: &Tape) -> ForwardOutputs {
        let v = |x: Var| tape.value(x).clone();
        let vs = |xs: &[Var]| xs.iter().map(|&x| v(x)).collect::<Vec<_>>();
        ForwardOutputs {
            y_region: v(self.y_ctx[0]),
            y_as: v(self.y_ctx[1]),
            y_ra: v(self.y_ra),
            y_task: vs(&self.y_task),
            y_s: vs(&self.y_s),
            y_cs: self
                .y_cs
                .iter()
                .zip(&self.y_s)
                .map(|(c, s)| c.map(v).unwrap_or_else(|| Mat::zeros(tape.value(*s).rows, tape.value(*s).cols)))
                .collect(),
            y_scs: vs(&self.y_scs),
            z: vs(&self.z),
            preds: vs(&self.preds),
            gates_snr: self.gates_snr.clone(),
            gates_cross: self.gates_cross.clone(),
            l0_snr: tape.scalar(self.l0_snr),
            l0_cross: tape.scalar(self.l0_cross),
        }
    }
}

enum Gates {
    Soft(Vec<Var>),
    Hard(Vec<f64>),
}

/// Network structure for a dataset shape; parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct SharpNet {
    pub cfg: ModelConfig,
    pub n: usize,
    pub m: usize,
    pub tasks: usize,
    pub layout: Layout,
    pub specs: Vec<ParamSpec>,
}

impl SharpNet {
    pub fn new(cfg: ModelConfig, n: usize, m: usize, tasks: usize) -> Result<Self> {
        cfg.validate()?;
        if n == 0 || m == 0 || tasks == 0 {
            return Err(Error::Config(format!("empty model shape n={n} m={m} P={tasks}")));
        }
        let mut b = Builder { specs: Vec::new() };
        let d = cfg.d;
        let cat = d * (cfg.layers + 1);
        let ctx = [b.stack("ctx/region", &cfg), b.stack("ctx/as", &cfg)];
        let ctx_proj = [
            b.add("ctx/region/proj".into(), cat, d, Init::Glorot),
            b.add("ctx/as/proj".into(), cat, d, Init::Glorot),
        ];
        let (mut qos, mut hu, mut hs, mut task_proj) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for p in 0..tasks {
            qos.push(b.stack(&format!("task{p}/qos"), &cfg));
            hu.push(b.stack(&format!("task{p}/hyper_user"), &cfg));
            hs.push(b.stack(&format!("task{p}/hyper_service"), &cfg));
            task_proj.push(b.add(format!("task{p}/proj"), 2 * cat, d, Init::Glorot));
        }
        let snr = b.router("snr", cfg.k1, tasks, &cfg);
        let cross = b.router("cross", cfg.k2, tasks, &cfg);
        let gate_w = (0..tasks).map(|p| b.add(format!("task{p}/gate_w"), 2 * d, d, Init::Glorot)).collect();
        let heads = (0..tasks)
            .map(|p| {
                [
                    b.add(format!("task{p}/head/w1"), d, cfg.head_hidden, Init::Glorot),
                    b.add(format!("task{p}/head/b1"), 1, cfg.head_hidden, Init::Zeros),
                    b.add(format!("task{p}/head/w2"), cfg.head_hidden, cfg.head_out, Init::Glorot),
                    b.add(format!("task{p}/head/b2"), 1, cfg.head_out, Init::Zeros),
                ]
            })
            .collect();
        let layout = Layout {
            ctx,
            ctx_proj,
            qos,
            hyper_user: hu,
            hyper_service: hs,
            task_proj,
            snr,
            cross,
            gate_w,
            heads,
        };
        Ok(SharpNet { cfg, n, m, tasks, layout, specs: b.specs })
    }

    pub fn nodes(&self) -> usize {
        self.n + self.m
    }

    /// Freshly initialized parameters.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut s = ParamStore::zeros(self.specs.clone());
        s.initialize(seed, false);
        s
    }

    /// Like [`init_params`](Self::init_params) but every per-task tensor is
    /// initialized identically across tasks.
    pub fn init_params_tied(&self, seed: u64) -> ParamStore {
        let mut s = ParamStore::zeros(self.specs.clone());
        s.initialize(seed, true);
        s
    }

    /// Put parameters on the tape, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, trainable: bool) -> Vec<Var> {
        store
            .values
            .iter()
            .map(|m| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) })
            .collect()
    }

    fn check_inputs(&self, feats: &FeatureBank, graphs: &GraphOps) -> Result<()> {
        let nn = self.nodes();
        let d = self.cfg.d;
        let mut mats: Vec<&Mat> = feats.qos.iter().collect();
        mats.push(&feats.region);
        mats.push(&feats.as_feats);
        if feats.qos.len() != self.tasks || graphs.qos.len() != self.tasks {
            return Err(Error::Shape(format!("model has {} tasks, inputs have {}", self.tasks, feats.qos.len())));
        }
        for f in mats {
            if f.shape() != (nn, d) {
                return Err(Error::Shape(format!("feature matrix {:?}, expected {:?}", f.shape(), (nn, d))));
            }
            if !f.all_finite() {
                return Err(Error::NonFinite("input features".into()));
            }
        }
        Ok(())
    }

    /// Curvature node of a stack: `softplus(raw) + ε`.
    fn curvature(&self, tape: &mut Tape, raw: Var) -> Var {
        let sp = tape.softplus(raw);
        tape.add_const(sp, CURVATURE_EPS)
    }

    /// Möbius-linear step with bias and wrapped ReLU:
    /// `σ^⊗(exp0(t·W) ⊕ exp0(b))` for tangent input `t`.
    fn hyper_linear(&self, tape: &mut Tape, t: Var, w: Var, b: Var, c: Var) -> Var {
        let lin = tape.matmul(t, w);
        let x = tape.exp0(lin, c);
        let bb = tape.exp0(b, c);
        let sum = tape.mobius_add_row(x, bb, c);
        let lg = tape.log0(sum, c);
        let act = tape.relu(lg);
        tape.exp0(act, c)
    }

    /// Euclidean outputs of the `L+1` states of a HyConv stack.
    pub fn hyconv_stack(&self, tape: &mut Tape, params: &[Var], f: Var, adj: &Arc<SparseOp>, idx: &StackIdx) -> Vec<Var> {
        let c = self.curvature(tape, params[idx.curvature]);
        let x0 = tape.exp0(f, c);
        let mut t = tape.log0(x0, c);
        let mut outs = vec![t];
        for &[w1, b1, w2, b2] in &idx.layers {
            let agg = tape.spmm(adj, t);
            let mid = self.hyper_linear(tape, agg, params[w1], params[b1], c);
            let tm = tape.log0(mid, c);
            let next = self.hyper_linear(tape, tm, params[w2], params[b2], c);
            t = tape.log0(next, c);
            outs.push(t);
        }
        outs
    }

    /// `σ₁(‖ₗ Yₗ) · W`.
    fn project(&self, tape: &mut Tape, parts: &[Var], w: Var) -> Var {
        let cat = tape.concat_cols(parts);
        let act = tape.relu(cat);
        tape.matmul(act, w)
    }

    pub fn hygcn(&self, tape: &mut Tape, params: &[Var], f: Var, adj: &Arc<SparseOp>, which: usize) -> Var {
        let outs = self.hyconv_stack(tape, params, f, adj, &self.layout.ctx[which]);
        self.project(tape, &outs, params[self.layout.ctx_proj[which]])
    }

    pub fn hhgcn(&self, tape: &mut Tape, params: &[Var], f: Var, graphs: &GraphOps, p: usize) -> Var {
        let fu = tape.slice_rows(f, 0, self.n);
        let fs = tape.slice_rows(f, self.n, self.nodes());
        let yq = self.hyconv_stack(tape, params, f, &graphs.qos[p], &self.layout.qos[p]);
        let yu = self.hyconv_stack(tape, params, fu, &graphs.hyper_user[p], &self.layout.hyper_user[p]);
        let ys = self.hyconv_stack(tape, params, fs, &graphs.hyper_service[p], &self.layout.hyper_service[p]);
        let mut blocks = Vec::with_capacity(yq.len());
        for l in 0..yq.len() {
            let hyper = tape.concat_rows(&[yu[l], ys[l]]);
            blocks.push(tape.concat_cols(&[yq[l], hyper]));
        }
        self.project(tape, &blocks, params[self.layout.task_proj[p]])
    }

    /// `φ_k(Y) = ReLU(LN_k(Y)·W_k + b_k)` for every block.
    pub fn route_blocks(&self, tape: &mut Tape, params: &[Var], r: &RouterIdx, y: Var) -> Vec<Var> {
        r.blocks
            .iter()
            .map(|&[g, b, w, bias]| {
                let ln = tape.layer_norm(y, params[g], params[b]);
                let h = tape.matmul(ln, params[w]);
                let h = tape.add_row(h, params[bias]);
                tape.relu(h)
            })
            .collect()
    }

    fn gates(&self, tape: &mut Tape, params: &[Var], log_alpha: usize, noise: Option<&[f64]>) -> (Gates, Vec<f64>) {
        let la = params[log_alpha];
        let cfg = &self.cfg;
        match noise {
            Some(noise) => {
                let nz = tape.constant(Mat::from_vec(1, noise.len(), noise.to_vec()).expect("noise row"));
                let pre = tape.add(la, nz);
                let pre = tape.mul_const(pre, 1.0 / cfg.tau);
                let s = tape.sigmoid(pre);
                let s = tape.mul_const(s, cfg.gamma - cfg.beta_stretch);
                let s = tape.add_const(s, cfg.beta_stretch);
                let c = tape.clip(s, 0.0, 1.0);
                let values = tape.value(c).data.clone();
                let vars = (0..values.len()).map(|k| tape.pick(c, 0, k)).collect();
                (Gates::Soft(vars), values)
            }
            None => {
                let values: Vec<f64> =
                    tape.value(la).data.iter().map(|&a| inference_gate(a, cfg.delta)).collect();
                (Gates::Hard(values.clone()), values)
            }
        }
    }

    /// `Σ_k c_k φ_k W^p_k / (Σ_k c_k + ε)`.
    fn combine(&self, tape: &mut Tape, params: &[Var], phis: &[Var], task_w: &[usize], gates: &Gates) -> Var {
        let eps = self.cfg.norm_eps;
        match gates {
            Gates::Soft(cs) => {
                let mut acc: Option<Var> = None;
                for (k, &phi) in phis.iter().enumerate() {
                    let t = tape.matmul(phi, params[task_w[k]]);
                    let t = tape.scale_by(t, cs[k]);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, t),
                        None => t,
                    });
                }
                let total = tape.weighted_sum(cs, &vec![1.0; cs.len()]);
                let denom = tape.add_const(total, eps);
                let inv = tape.recip(denom);
                tape.scale_by(acc.expect("at least one block"), inv)
            }
            Gates::Hard(cs) => {
                let mut acc: Option<Var> = None;
                let mut count = 0.0;
                for (k, &phi) in phis.iter().enumerate() {
                    if cs[k] == 0.0 {
                        continue;
                    }
                    count += cs[k];
                    let t = tape.matmul(phi, params[task_w[k]]);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, t),
                        None => t,
                    });
                }
                match acc {
                    Some(a) => tape.mul_const(a, 1.0 / (count + eps)),
                    None => {
                        log::debug!("all routing gates closed; routed features are zero");
                        let rows = tape.value(phis[0]).rows;
                        tape.constant(Mat::zeros(rows, self.cfg.d))
                    }
                }
            }
        }
    }

    /// Routed output of task `p` from precomputed block features
    /// (`noise = None`: inference gates).
    pub fn snr_route(&self, tape: &mut Tape, params: &[Var], phis: &[Var], p: usize, noise: Option<&[f64]>) -> (Var, Vec<f64>) {
        let r = &self.layout.snr;
        let (g, vals) = self.gates(tape, params, r.log_alpha[p], noise);
        (self.combine(tape, params, phis, &r.task_w[p], &g), vals)
    }

    /// `Θ_p(Yʲ)` summed over sources `j ≠ p`; `None` when there is no other task.
    /// Gate noise is drawn once per target and shared by all sources.
    pub fn cross_snr(&self, tape: &mut Tape, params: &[Var], pool: &[Vec<Var>], p: usize, noise: Option<&[f64]>) -> (Option<Var>, Vec<f64>) {
        let r = &self.layout.cross;
        let (g, vals) = self.gates(tape, params, r.log_alpha[p], noise);
        let thetas: Vec<Var> = pool.iter().map(|phis| self.combine(tape, params, phis, &r.task_w[p], &g)).collect();
        (sum_except(tape, &thetas, p), vals)
    }

    /// `Z = Y_scs + g ⊙ (Y − Y_scs)` with `g = σ([Y ‖ Y_scs]·W_g)`.
    pub fn gated_fusion(&self, tape: &mut Tape, params: &[Var], y: Var, y_scs: Var, p: usize) -> Var {
        let cat = tape.concat_cols(&[y, y_scs]);
        let gl = tape.matmul(cat, params[self.layout.gate_w[p]]);
        let g = tape.sigmoid(gl);
        let diff = tape.sub(y, y_scs);
        let gd = tape.mul(g, diff);
        tape.add(y_scs, gd)
    }

    /// Head on `Z`, then `Q̂ = Z_u · Z_sᵀ`.
    pub fn predict(&self, tape: &mut Tape, params: &[Var], z: Var, p: usize) -> Var {
        let [w1, b1, w2, b2] = self.layout.heads[p];
        let h = tape.matmul(z, params[w1]);
        let h = tape.add_row(h, params[b1]);
        let h = tape.relu(h);
        let o = tape.matmul(h, params[w2]);
        let o = tape.add_row(o, params[b2]);
        let rows = tape.value(o).rows;
        let zu = tape.slice_rows(o, 0, rows - self.m);
        let zs = tape.slice_rows(o, rows - self.m, rows);
        tape.matmul_nt(zu, zs)
    }

    /// Sum of expected-L0 terms of a router over the given tasks.
    fn l0(&self, tape: &mut Tape, params: &[Var], r: &RouterIdx, tasks: std::ops::Range<usize>) -> Var {
        let terms: Vec<Var> = tasks
            .map(|p| {
                let s = tape.add_const(params[r.log_alpha[p]], self.cfg.l0_shift());
                let s = tape.sigmoid(s);
                tape.sum(s)
            })
            .collect();
        let ones = vec![1.0; terms.len()];
        tape.weighted_sum(&terms, &ones)
    }

    /// Full forward pass.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], feats: &FeatureBank, graphs: &GraphOps, mode: Mode) -> Result<FwdVars> {
        self.check_inputs(feats, graphs)?;
        if params.len() != self.specs.len() {
            return Err(Error::Shape(format!("{} parameter vars for {} tensors", params.len(), self.specs.len())));
        }
        let noise = match mode {
            Mode::Train(nz) => {
                if nz.snr.len() != self.tasks
                    || nz.snr.iter().any(|r| r.len() != self.cfg.k1)
                    || nz.cross.len() != self.tasks
                    || nz.cross.iter().any(|r| r.len() != self.cfg.k2)
                {
                    return Err(Error::Shape("gate noise does not match the model".into()));
                }
                Some(nz)
            }
            Mode::Infer => None,
        };

        // context encoders
        let fr = tape.constant(feats.region.clone());
        let fa = tape.constant(feats.as_feats.clone());
        let yr = self.hygcn(tape, params, fr, &graphs.region, 0);
        let ya = self.hygcn(tape, params, fa, &graphs.as_graph, 1);
        let y_ra = tape.add(yr, ya);

        // structural QoS encoders
        let y_task: Vec<Var> = (0..self.tasks)
            .map(|p| {
                let f = tape.constant(feats.qos[p].clone());
                self.hhgcn(tape, params, f, graphs, p)
            })
            .collect();

        // context routing
        let mut y_s = Vec::new();
        let mut gates_snr = Vec::new();
        let phis = self.route_blocks(tape, params, &self.layout.snr, y_ra);
        for p in 0..self.tasks {
            let (y, vals) = self.snr_route(tape, params, &phis, p, noise.map(|nz| &nz.snr[p][..]));
            y_s.push(y);
            gates_snr.push(vals);
        }

        // cross-task routing
        let mut y_cs = vec![None; self.tasks];
        let mut gates_cross = vec![Vec::new(); self.tasks];
        if self.tasks >= 2 {
            let pool: Vec<Vec<Var>> =
                y_task.iter().map(|&y| self.route_blocks(tape, params, &self.layout.cross, y)).collect();
            for p in 0..self.tasks {
                let (y, vals) = self.cross_snr(tape, params, &pool, p, noise.map(|nz| &nz.cross[p][..]));
                y_cs[p] = y;
                gates_cross[p] = vals;
            }
        }
        let y_scs: Vec<Var> = (0..self.tasks)
            .map(|p| match y_cs[p] {
                Some(cs) => tape.add(y_s[p], cs),
                None => y_s[p],
            })
            .collect();

        let mut z = Vec::new();
        let mut preds = Vec::new();
        for p in 0..self.tasks {
            let zp = self.gated_fusion(tape, params, y_task[p], y_scs[p], p);
            z.push(zp);
            preds.push(self.predict(tape, params, zp, p));
        }

        let l0_snr = self.l0(tape, params, &self.layout.snr, 0..self.tasks);
        let l0_cross = if self.tasks >= 2 {
            self.l0(tape, params, &self.layout.cross, 0..self.tasks)
        } else {
            tape.constant_scalar(0.0)
        };
        Ok(FwdVars { y_ctx: [yr, ya], y_ra, y_task, y_s, y_cs, y_scs, z, preds, l0_snr, l0_cross, gates_snr, gates_cross })
    }

    /// Inference-mode forward with all intermediates.
    pub fn infer(&self, store: &ParamStore, feats: &FeatureBank, graphs: &GraphOps) -> Result<ForwardOutputs> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, store, false);
        let fwd = self.forward(&mut tape, &vars, feats, graphs, Mode::Infer)?;
        let out = fwd.materialize(&tape);
        if out.preds.iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite("predictions".into()));
        }
        Ok(out)
    }

    /// Multiply–add count of one inference forward pass.
    pub fn macs(&self, store: &ParamStore, feats: &FeatureBank, graphs: &GraphOps) -> Result<u64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, store, false);
        self.forward(&mut tape, &vars, feats, graphs, Mode::Infer)?;
        Ok(tape.macs())
    }

    /// Inference gate values `[task][block]` of a router (`cross = false`: SNR).
    pub fn inference_gates(&self, store: &ParamStore, cross: bool) -> Vec<Vec<f64>> {
        let r = if cross { &self.layout.cross } else { &self.layout.snr };
        r.log_alpha
            .iter()
            .map(|&k| store.values[k].data.iter().map(|&a| inference_gate(a, self.cfg.delta)).collect())
            .collect()
    }

    /// Number of open inference gates over both routers (Cross-SNR counted
    /// only when it is used, i.e. P ≥ 2).
    pub fn active_gates(&self, store: &ParamStore) -> usize {
        let count = |g: Vec<Vec<f64>>| g.iter().flatten().filter(|&&v| v > 0.0).count();
        let snr = count(self.inference_gates(store, false));
        let cross = if self.tasks >= 2 { count(self.inference_gates(store, true)) } else { 0 };
        snr + cross
    }
}

/// `Σ_{j≠p} xs[j]`, accumulated in index order.
pub fn sum_except(tape: &mut Tape, xs: &[Var], p: usize) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for (j, &x) in xs.iter().enumerate() {
        if j == p {
            continue;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, x),
            None => x,
        });
    }
    acc
}
