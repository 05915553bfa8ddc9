//! The twelve acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion ids (`C3 C7`)
//! as arguments to run a subset. Artifacts of the desk-scale runs are kept
//! under the cargo target tmp dir for inspection.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharpqos::evalcli::{self, EvalReport, ExperimentConfig, Pipeline};
use sharpqos::featinit::{build_features, FeatureBank, FeatureConfig};
use sharpqos::graphs::GraphSet;
use sharpqos::hyperball::{exp0, log0, mobius_add};
use sharpqos::linalg::Mat;
use sharpqos::par;
use sharpqos::qosdata::{split, synth, ContextAttr, Mask, QosDataset, SplitSpec};
use sharpqos::sharpnet::{expected_l0, hard_concrete_sample, inference_gate, GateNoise, GraphOps, Mode, ModelConfig, ParamStore, SharpNet};
use sharpqos::tape::Tape;
use sharpqos::trainloop::{self, ema_weights, objective, Balancing, TrainConfig, TrainData, EMA_EPS};

// ---- pinned tolerances -------------------------------------------------

const C1_SAMPLES: usize = 1000;
const C1_ROUND_TRIP_REL: f64 = 1e-8;
const C1_LEFT_INVERSE: f64 = 1e-12;
const C1_BUDGET: Duration = Duration::from_secs(5);
const C2_H: f64 = 1e-5;
const C2_MAX_REL: f64 = 1e-3;
/// Denominator floor of the relative error. At h = 1e-5 the central
/// difference itself carries ~3e-9 of round-off, so partials far below
/// this floor are compared absolutely.
const C2_FLOOR: f64 = 1e-5;
const C2_BUDGET: Duration = Duration::from_secs(120);
const C3_TOL: f64 = 1e-10;
const C4_SUM_TOL: f64 = 1e-12;
const C4_EXAMPLE_TOL: f64 = 1e-9;
const C5_SAMPLES: usize = 10_000;
const C5_MEAN_TOL: f64 = 0.02;
const C6_FRACTION_OF_STD: f64 = 0.05;
const C6_MAX_EPOCHS: usize = 3000;
const C6_BUDGET: Duration = Duration::from_secs(600);
const C7_RT_GAIN: f64 = 15.0;
const C7_TP_GAIN: f64 = 10.0;
const C7_BUDGET: Duration = Duration::from_secs(1800);
const C7_PLAUSIBLE_RT: (f64, f64) = (0.29, 0.45);
const C9_TOL: f64 = 1e-9;
const C10_SEEDS: u64 = 5;
const C10_LAMBDA: f64 = 1e-3;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    p
}

fn fixture_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&repo_root().join("fixtures").join(name)).expect("fixture config")
}

// ---- C1 ----------------------------------------------------------------

fn c1_hyperbolic_identities() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rt, mut worst_inv) = (0.0f64, 0.0f64);
    for _ in 0..C1_SAMPLES {
        let d = rng.gen_range(1..=16);
        let c: f64 = rng.gen_range(0.1..4.0);
        let sc = c.sqrt();
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        // tangent vectors with √c‖v‖ up to 5 (still 1 − 9e-5 from the boundary after exp0)
        let r = rng.gen_range(0.0..5.0) / sc;
        let v: Vec<f64> = dir.iter().map(|x| x / nrm * r).collect();
        let x = exp0(&v, c).map_err(|e| e.to_string())?;
        let back = log0(&x, c).map_err(|e| e.to_string())?;
        let err = v.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst_rt = worst_rt.max(if r > 0.0 { err / r } else { err });

        // ball points with √c‖y‖ < 0.95 for the gyro-identities
        let y: Vec<f64> = dir.iter().map(|t| t / nrm * rng.gen_range(0.0..0.95) / sc).collect();
        let zero = vec![0.0; d];
        let left = mobius_add(&zero, &y, c).map_err(|e| e.to_string())?;
        ensure(left == y, || format!("0 ⊕ y ≠ y at d={d}, c={c}"))?;
        let neg: Vec<f64> = y.iter().map(|t| -t).collect();
        let inv = mobius_add(&neg, &y, c).map_err(|e| e.to_string())?;
        worst_inv = worst_inv.max(inv.iter().map(|t| t.abs()).fold(0.0, f64::max));

        // wild tangent vectors still land strictly inside the ball
        let big: Vec<f64> = dir.iter().map(|t| t * 10f64.powf(rng.gen_range(-3.0..3.0))).collect();
        for p in [&x, &exp0(&big, c).map_err(|e| e.to_string())?, &mobius_add(&x, &y, c).map_err(|e| e.to_string())?] {
            let n2 = p.iter().map(|t| t * t).sum::<f64>();
            ensure(c * n2 < 1.0, || format!("point outside the ball: c‖x‖² = {}", c * n2))?;
        }
    }
    let el = started.elapsed();
    ensure(worst_rt < C1_ROUND_TRIP_REL, || format!("round-trip relative error {worst_rt:e}"))?;
    ensure(worst_inv < C1_LEFT_INVERSE, || format!("left-inverse residual {worst_inv:e}"))?;
    ensure(el < C1_BUDGET, || format!("took {el:?}"))?;
    Ok(format!("{C1_SAMPLES} samples, round trip {worst_rt:.1e}, left inverse {worst_inv:.1e}, left identity exact"))
}

// ---- C2 ----------------------------------------------------------------

struct Tiny {
    net: SharpNet,
    store: ParamStore,
    feats: FeatureBank,
    ops: GraphOps,
    data: TrainData,
}

fn tiny_instance() -> Tiny {
    let ds = synth::low_rank(4, 5, 2, 2, 7);
    let sp = split(&ds, &SplitSpec { train_density: 70.0, seed: 1, val_fraction: 0.0 }).unwrap();
    let gs = GraphSet::build(&ds, &sp.train).unwrap();
    let fc = FeatureConfig { d: 8, nmf_iters: 30, ae_epochs: 20, ae_lr: 1e-2, seed: 3 };
    let feats = build_features(&ds, &sp.train, &fc).unwrap();
    let cfg = ModelConfig { d: 8, layers: 1, k1: 2, k2: 2, d_snr: 8, head_hidden: 8, head_out: 8, ..Default::default() };
    let net = SharpNet::new(cfg, 4, 5, 2).unwrap();
    let mut store = net.init_params(11);
    // non-zero biases and gate logits so no term sits at a trivial point
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (spec, v) in store.specs.iter().zip(store.values.iter_mut()) {
        if spec.name.ends_with("/b1") || spec.name.ends_with("/b2") || spec.name.ends_with("dense_b") || spec.name.ends_with("ln_beta") {
            v.data.iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
        }
        if spec.name.ends_with("log_alpha") {
            v.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    }
    let data = TrainData::from_splits(&ds, &sp).unwrap();
    Tiny { net, store, feats, ops: GraphOps::new(&gs), data }
}

fn c2_gradient_contract() -> Outcome {
    let started = Instant::now();
    let t = tiny_instance();
    let noise = GateNoise::from_uniform(&[vec![0.31, 0.66], vec![0.45, 0.72]], &[vec![0.58, 0.27], vec![0.4, 0.69]])
        .map_err(|e| e.to_string())?;
    let w = [0.4, 0.6];
    let lambda = 1e-2;
    let f = |s: &ParamStore| objective(&t.net, s, &t.feats, &t.ops, &t.data.train, &w, lambda, &noise).unwrap();
    let (loss, g) = f(&t.store);
    let floor = C2_FLOOR;
    let flat_g: Vec<f64> = g.iter().flat_map(|m| m.data.iter().copied()).collect();
    let base = t.store.flatten();
    let mut store = t.store.clone();
    let (mut worst, mut at) = (0.0f64, 0usize);
    for k in 0..base.len() {
        let mut x = base.clone();
        x[k] = base[k] + C2_H;
        store.set_flat(&x).unwrap();
        let up = f(&store).0;
        x[k] = base[k] - C2_H;
        store.set_flat(&x).unwrap();
        let dn = f(&store).0;
        let fd = (up - dn) / (2.0 * C2_H);
        let diff = (fd - flat_g[k]).abs();
        let rel = diff / fd.abs().max(flat_g[k].abs()).max(floor);
        if rel > worst {
            worst = rel;
            at = k;
        }
    }
    let el = started.elapsed();
    let name = t.store.manifest().into_iter().rev().find(|m| m.1 <= at).map(|m| m.0).unwrap_or_default();
    let gnorm = flat_g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nonzero = flat_g.iter().filter(|v| v.abs() > floor).count();
    ensure(nonzero > base.len() / 4, || format!("only {nonzero} non-negligible partials"))?;
    ensure(worst < C2_MAX_REL, || format!("max relative error {worst:e} at scalar {at} ({name})"))?;
    ensure(el < C2_BUDGET, || format!("took {el:?}"))?;
    Ok(format!(
        "{} scalars ({nonzero} above the floor, ‖g‖ = {gnorm:.3}, L = {loss:.3}), max relative error {worst:.1e}",
        base.len()
    ))
}

// ---- C3 ----------------------------------------------------------------

mod scalar {
    //! Independent scalar (d = 1) trace of the network.

    pub fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }
    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    pub fn relu(x: f64) -> f64 {
        x.max(0.0)
    }
    pub fn exp0(v: f64, c: f64) -> f64 {
        (c.sqrt() * v).tanh() / c.sqrt()
    }
    pub fn log0(x: f64, c: f64) -> f64 {
        (c.sqrt() * x).atanh() / c.sqrt()
    }
    pub fn madd(x: f64, y: f64, c: f64) -> f64 {
        ((1.0 + 2.0 * c * x * y + c * y * y) * x + (1.0 - c * x * x) * y) / (1.0 + 2.0 * c * x * y + c * c * x * x * y * y)
    }
    /// Möbius-linear map with bias and wrapped ReLU, from a tangent input.
    pub fn hyper_linear(t: f64, w: f64, b: f64, c: f64) -> f64 {
        exp0(relu(log0(madd(exp0(t * w, c), exp0(b, c), c), c)), c)
    }
}

fn c3_scalar_forward_oracle() -> Outcome {
    use scalar::*;
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    // one user, one service; same region, different AS
    let region = ContextAttr::from_labels(&s(&["R"]), &s(&["R"]));
    let as_attr = ContextAttr::from_labels(&s(&["A1"]), &s(&["A2"]));
    let ds = QosDataset::from_dense(
        s(&["a", "b"]),
        vec![Mat::scalar(2.0), Mat::scalar(3.0)],
        region,
        as_attr,
    )
    .map_err(|e| e.to_string())?;
    let train = vec![Mask::from_fn(1, 1, |_, _| true); 2];
    let gs = GraphSet::build(&ds, &train).map_err(|e| e.to_string())?;

    // hand-derived normalized graphs
    let ones = [[1.0, 1.0], [1.0, 1.0]];
    let ident = [[1.0, 0.0], [0.0, 1.0]];
    let dense2 = |a: &sharpqos::graphs::SparseAdj| [[a.get(0, 0), a.get(0, 1)], [a.get(1, 0), a.get(1, 1)]];
    ensure(dense2(&gs.qos[0]) == ones && dense2(&gs.qos[1]) == ones, || "invocation graph".into())?;
    ensure(dense2(&gs.region) == ones, || "region graph".into())?;
    ensure(dense2(&gs.as_graph) == ident, || "AS graph".into())?;
    ensure(gs.hyper_user[0].get(0, 0) == 1.0 && gs.hyper_service[1].get(0, 0) == 1.0, || "hypergraphs".into())?;

    let cfg = ModelConfig { d: 1, layers: 1, k1: 2, k2: 2, d_snr: 1, head_hidden: 1, head_out: 1, ..Default::default() };
    let net = SharpNet::new(cfg.clone(), 1, 1, 2).map_err(|e| e.to_string())?;
    let mut store = net.init_params(0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (spec, v) in store.specs.iter().zip(store.values.iter_mut()) {
        let lo_hi = if spec.name.ends_with("curvature") { (-0.5, 1.0) } else { (-0.9, 0.9) };
        v.data.iter_mut().for_each(|x| *x = rng.gen_range(lo_hi.0..lo_hi.1));
    }
    let logits = [
        ("snr/task0/log_alpha", [2.0, -2.0]),
        ("snr/task1/log_alpha", [-1.5, 1.0]),
        ("cross/task0/log_alpha", [1.2, 0.7]),
        ("cross/task1/log_alpha", [-0.3, -2.5]),
    ];
    for (name, v) in logits {
        store.get_mut(name).unwrap().data = v.to_vec();
    }
    let pr = |name: &str, i: usize| store.get(name).unwrap_or_else(|| panic!("no {name}")).data[i];

    let col = |a: f64, b: f64| Mat::from_vec(2, 1, vec![a, b]).unwrap();
    let feats = FeatureBank { qos: vec![col(0.4, -0.3), col(0.7, 0.2)], region: col(-0.5, 0.6), as_feats: col(0.3, 0.8) };
    let fv = |m: &Mat| [m.data[0], m.data[1]];

    // HyConv stack over a 2-node (or 1-node) graph; returns [layer][node]
    let stack = |prefix: &str, f: &[f64], adj: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let c = softplus(pr(&format!("{prefix}/curvature"), 0)) + 1e-5;
        let mut t: Vec<f64> = f.iter().map(|&x| log0(exp0(x, c), c)).collect();
        let mut outs = vec![t.clone()];
        let (w1, b1, w2, b2) = (
            pr(&format!("{prefix}/l0/w1"), 0),
            pr(&format!("{prefix}/l0/b1"), 0),
            pr(&format!("{prefix}/l0/w2"), 0),
            pr(&format!("{prefix}/l0/b2"), 0),
        );
        let agg: Vec<f64> = adj.iter().map(|row| row.iter().zip(&t).map(|(a, x)| a * x).sum()).collect();
        t = agg
            .iter()
            .map(|&a| {
                let mid = log0(hyper_linear(a, w1, b1, c), c);
                log0(hyper_linear(mid, w2, b2, c), c)
            })
            .collect();
        outs.push(t);
        outs
    };
    let a_ones = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
    let a_id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let a_one = vec![vec![1.0]];

    // context encoders (HyGCN): relu(concat) · W
    let hygcn = |prefix: &str, f: [f64; 2], adj: &[Vec<f64>]| -> [f64; 2] {
        let o = stack(prefix, &f, adj);
        let w = [pr(&format!("{prefix}/proj"), 0), pr(&format!("{prefix}/proj"), 1)];
        [0, 1].map(|v| relu(o[0][v]) * w[0] + relu(o[1][v]) * w[1])
    };
    let yr = hygcn("ctx/region", fv(&feats.region), &a_ones);
    let ya = hygcn("ctx/as", fv(&feats.as_feats), &a_id);
    let y_ra = [yr[0] + ya[0], yr[1] + ya[1]];

    // structural encoders (HHGCN)
    let y_task: Vec<[f64; 2]> = (0..2)
        .map(|p| {
            let f = fv(&feats.qos[p]);
            let yq = stack(&format!("task{p}/qos"), &f, &a_ones);
            let yu = stack(&format!("task{p}/hyper_user"), &f[..1], &a_one);
            let ys = stack(&format!("task{p}/hyper_service"), &f[1..], &a_one);
            let w: Vec<f64> = (0..4).map(|i| pr(&format!("task{p}/proj"), i)).collect();
            let user = relu(yq[0][0]) * w[0] + relu(yu[0][0]) * w[1] + relu(yq[1][0]) * w[2] + relu(yu[1][0]) * w[3];
            let serv = relu(yq[0][1]) * w[0] + relu(ys[0][0]) * w[1] + relu(yq[1][1]) * w[2] + relu(ys[1][0]) * w[3];
            [user, serv]
        })
        .collect();

    // routing blocks: d = 1 layer norm centres every row to 0, leaving β
    let phi = |router: &str, k: usize, _y: f64| {
        relu(pr(&format!("{router}/block{k}/ln_beta"), 0) * pr(&format!("{router}/block{k}/dense_w"), 0)
            + pr(&format!("{router}/block{k}/dense_b"), 0))
    };
    let gate = |router: &str, p: usize, k: usize, noise: Option<f64>| -> f64 {
        let la = pr(&format!("{router}/task{p}/log_alpha"), k);
        match noise {
            Some(n) => (sigmoid((la + n) / cfg.tau) * (cfg.gamma - cfg.beta_stretch) + cfg.beta_stretch).clamp(0.0, 1.0),
            None => {
                if sigmoid(la) > cfg.delta {
                    1.0
                } else {
                    0.0
                }
            }
        }
    };
    let route = |router: &str, p: usize, y: f64, noise: Option<&[f64]>| -> f64 {
        let gs: Vec<f64> = (0..2).map(|k| gate(router, p, k, noise.map(|n| n[k]))).collect();
        let num: f64 = (0..2).map(|k| gs[k] * phi(router, k, y) * pr(&format!("{router}/task{p}/w{k}"), 0)).sum();
        let den: f64 = gs.iter().sum();
        if noise.is_none() && den == 0.0 {
            0.0
        } else {
            num / (den + 1e-8)
        }
    };

    let trace = |noise: Option<&GateNoise>| -> Vec<f64> {
        let mut preds = Vec::new();
        for p in 0..2 {
            let q = 1 - p;
            let z: Vec<f64> = (0..2)
                .map(|v| {
                    let ys = route("snr", p, y_ra[v], noise.map(|n| &n.snr[p][..]));
                    let ycs = route("cross", p, y_task[q][v], noise.map(|n| &n.cross[p][..]));
                    let yscs = ys + ycs;
                    let y = y_task[p][v];
                    let g = sigmoid(y * pr(&format!("task{p}/gate_w"), 0) + yscs * pr(&format!("task{p}/gate_w"), 1));
                    yscs + g * (y - yscs)
                })
                .collect();
            let head = |zv: f64| {
                let h = relu(zv * pr(&format!("task{p}/head/w1"), 0) + pr(&format!("task{p}/head/b1"), 0));
                h * pr(&format!("task{p}/head/w2"), 0) + pr(&format!("task{p}/head/b2"), 0)
            };
            preds.push(head(z[0]) * head(z[1]));
        }
        preds
    };

    let ops = GraphOps::new(&gs);
    let noise = GateNoise::from_uniform(&[vec![0.3, 0.8], vec![0.6, 0.45]], &[vec![0.7, 0.2], vec![0.55, 0.9]])
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for mode in [None, Some(&noise)] {
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, &store, false);
        let m = match mode {
            Some(n) => Mode::Train(n),
            None => Mode::Infer,
        };
        let fwd = net.forward(&mut tape, &vars, &feats, &ops, m).map_err(|e| e.to_string())?;
        let out = fwd.materialize(&tape);
        let want = trace(mode);
        for p in 0..2 {
            let got = out.preds[p].data[0];
            worst = worst.max((got - want[p]).abs() / want[p].abs().max(1.0));
            for v in 0..2 {
                let d = (out.y_task[p].data[v] - y_task[p][v]).abs();
                worst = worst.max(d);
            }
        }
        for v in 0..2 {
            worst = worst.max((out.y_ra.data[v] - y_ra[v]).abs());
        }
    }
    ensure(worst < C3_TOL, || format!("network vs scalar trace differ by {worst:e}"))?;
    Ok(format!("inference and fixed-noise training traces agree to {worst:.1e}"))
}

// ---- C4 ----------------------------------------------------------------

fn c4_ema_balancing() -> Outcome {
    let w = ema_weights(&[1.0, 3.0], 0.0);
    ensure((w[0] - 0.75).abs() <= C4_EXAMPLE_TOL && (w[1] - 0.25).abs() <= C4_EXAMPLE_TOL, || format!("{w:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let p = rng.gen_range(2..=6);
        let l: Vec<f64> = (0..p).map(|_| 10f64.powf(rng.gen_range(-4.0..3.0))).collect();
        let w = ema_weights(&l, EMA_EPS);
        ensure((w.iter().sum::<f64>() - 1.0).abs() <= C4_SUM_TOL, || format!("sum {}", w.iter().sum::<f64>()))?;
        for a in 0..p {
            for b in 0..p {
                ensure(!(l[a] < l[b]) || w[a] > w[b], || format!("order violated for {l:?} → {w:?}"))?;
            }
        }
    }
    // every epoch of a real run
    let t = tiny_instance();
    let cfg = TrainConfig { epochs: 200, patience: 1000, lr: 1e-2, balancing: Balancing::Ema, ..Default::default() };
    let r = trainloop::train(&t.net, t.store.clone(), &t.feats, &t.ops, &t.data, &cfg).map_err(|e| e.to_string())?;
    let worst = r.history.iter().map(|h| (h.weights.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst <= C4_SUM_TOL, || format!("epoch weight sum off by {worst:e}"))?;
    Ok(format!("(1,3) → ({:.9}, {:.9}); 1000 random vectors ordered; {} epochs sum to 1 within {worst:.1e}", w[0], w[1], r.history.len()))
}

// ---- C5 ----------------------------------------------------------------

fn c5_hard_concrete() -> Outcome {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mean = 0.0;
    for _ in 0..C5_SAMPLES {
        let u: f64 = loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        mean += hard_concrete_sample(0.0, u, &cfg).map_err(|e| e.to_string())?;
    }
    mean /= C5_SAMPLES as f64;
    // E[z] = ∫₀¹ clip(σ(logit(u)/τ)(γ−β)+β, 0, 1) du, midpoint rule
    let k = 200_000;
    let expect: f64 = (0..k)
        .map(|i| {
            let u = (i as f64 + 0.5) / k as f64;
            let s = 1.0 / (1.0 + (-((u / (1.0 - u)).ln() / cfg.tau)).exp());
            (s * (cfg.gamma - cfg.beta_stretch) + cfg.beta_stretch).clamp(0.0, 1.0)
        })
        .sum::<f64>()
        / k as f64;
    ensure((mean - expect).abs() <= C5_MEAN_TOL, || format!("mean {mean} vs expectation {expect}"))?;
    for la in [-3.0, -0.1, -1e-9, 0.0, 1e-9, 0.4, 3.0] {
        let g = inference_gate(la, cfg.delta);
        let want = if 1.0 / (1.0 + (-la as f64).exp()) > 0.5 { 1.0 } else { 0.0 };
        ensure(g == want && g == inference_gate(la, cfg.delta), || format!("gate at log α = {la}: {g}"))?;
    }
    ensure(expected_l0(0.0, &cfg) > 0.5, || "expected L0 at log α = 0".into())?;
    Ok(format!("mean gate {mean:.4} vs integral {expect:.4}; inference gates threshold at δ = {}", cfg.delta))
}

// ---- C6 ----------------------------------------------------------------

fn c6_overfit() -> Outcome {
    let started = Instant::now();
    let cfg = fixture_config("overfit.toml");
    ensure(cfg.trainloop.epochs <= C6_MAX_EPOCHS, || "epoch budget".into())?;
    let mut pipe = Pipeline::new(cfg, &scratch("overfit")).map_err(|e| e.to_string())?;
    let prep = pipe.preprocess().map_err(|e| e.to_string())?;
    ensure((prep.ds.n, prep.ds.m, prep.ds.tasks()) == (30, 20, 2), || "fixture shape".into())?;
    let feats = pipe.features(&prep).map_err(|e| e.to_string())?;
    let gs = pipe.graphs(&prep).map_err(|e| e.to_string())?;
    let (net, res) = pipe.train(&prep, &feats, &gs).map_err(|e| e.to_string())?;
    let out = net.infer(&res.params, &feats, &GraphOps::new(&gs)).map_err(|e| e.to_string())?;
    let mut cells = Vec::new();
    let mut ok = true;
    for p in 0..2 {
        let all: Vec<f64> = prep.ds.entries(p, &prep.ds.observed[p]).iter().map(|e| e.2).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        let train = prep.ds.entries(p, &prep.splits.train[p]);
        let (mae, _) = evalcli::metrics(&out.preds[p], &train).map_err(|e| e.to_string())?;
        ok &= mae < C6_FRACTION_OF_STD * std;
        cells.push(format!("{} MAE {mae:.4} vs {:.4}", prep.ds.task_names[p], C6_FRACTION_OF_STD * std));
    }
    let el = started.elapsed();
    let msg = format!("{} after {} epochs ({:.0}s)", cells.join(", "), res.history.len(), el.as_secs_f64());
    ensure(ok && el < C6_BUDGET, || msg.clone())?;
    Ok(msg)
}

// ---- C7 / C12 ----------------------------------------------------------

fn desk_config() -> ExperimentConfig {
    fixture_config("desk.toml")
}

fn c7_desk_generalization(base: &mut Option<EvalReport>) -> Outcome {
    let started = Instant::now();
    let r = evalcli::run_experiment(&desk_config(), &scratch("desk_base")).map_err(|e| e.to_string())?;
    let el = started.elapsed();
    let gain = |task: &str| {
        r.comparisons
            .iter()
            .find(|c| c.task == task && c.metric == "MAE")
            .map(|c| c.improvement)
            .unwrap_or(f64::NAN)
    };
    let (rt, tp) = (gain("rt"), gain("tp"));
    let rt_mae = r.task("rt").map(|t| t.mae).unwrap_or(f64::NAN);
    let plausible = (C7_PLAUSIBLE_RT.0..=C7_PLAUSIBLE_RT.1).contains(&rt_mae);
    *base = Some(r.clone());
    let msg = format!(
        "[{}] RT MAE {rt_mae:.4} ({rt:+.1}% vs service mean, plausibility band {}), TP {tp:+.1}%, {:.0}s",
        r.run.source,
        if plausible { "inside" } else { "outside" },
        el.as_secs_f64()
    );
    ensure(rt >= C7_RT_GAIN && tp >= C7_TP_GAIN && el < C7_BUDGET, || msg.clone())?;
    Ok(msg)
}

fn c12_cold_start_trend(base: &mut Option<EvalReport>) -> Outcome {
    let cfg = desk_config();
    let base = match base.take() {
        Some(b) => b,
        None => evalcli::run_experiment(&cfg, &scratch("desk_base")).map_err(|e| e.to_string())?,
    };
    let mut maes = vec![base];
    for s in ["CB:10", "CB:20"] {
        let mut c = cfg.clone();
        c.qosdata.cold_start = Some(s.into());
        maes.push(evalcli::run_experiment(&c, &scratch(&format!("desk_{}", s.replace(':', "_")))).map_err(|e| e.to_string())?);
    }
    let mut cells = Vec::new();
    let mut ok = true;
    for task in ["rt", "tp"] {
        let v: Vec<f64> = maes.iter().map(|r| r.task(task).map(|t| t.mae).unwrap_or(f64::NAN)).collect();
        ok &= v[2] >= v[1] && v[1] >= v[0];
        cells.push(format!("{task} {:.4} ≤ {:.4} ≤ {:.4}", v[0], v[1], v[2]));
    }
    let msg = format!("base ≤ CB:10 ≤ CB:20: {}", cells.join("; "));
    ensure(ok, || msg.clone())?;
    Ok(msg)
}

// ---- C8 / C9 -----------------------------------------------------------

fn c8_improvement_cells() -> Outcome {
    let a = evalcli::improvement(0.3668, 0.4115).map_err(|e| e.to_string())?;
    let b = evalcli::improvement(13.2402, 15.4529).map_err(|e| e.to_string())?;
    let (fa, fb) = (format!("{a:.2}"), format!("{b:.2}"));
    ensure(fa == "10.86" && fb == "14.32", || format!("{fa}, {fb}"))?;
    Ok(format!("I = {fa}, {fb}"))
}

fn c9_confidence_intervals() -> Outcome {
    let (lo, hi) = evalcli::metrics::interval(0.3243, 0.1773, 50, 95).map_err(|e| e.to_string())?;
    let half = 1.96 * 0.1773 / 50f64.sqrt();
    ensure((lo - (0.3243 - half)).abs() <= C9_TOL && (hi - (0.3243 + half)).abs() <= C9_TOL, || format!("({lo}, {hi})"))?;
    // grouped path against a direct computation
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let errs: Vec<f64> = (0..1037).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ci = evalcli::confidence_intervals(&errs, 50, &[90, 95, 99], None).map_err(|e| e.to_string())?;
    let size = errs.len() / 50;
    let g: Vec<f64> = (0..50).map(|k| errs[k * size..(k + 1) * size].iter().map(|e| e.abs()).sum::<f64>() / size as f64).collect();
    let m = g.iter().sum::<f64>() / 50.0;
    let s = (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 49.0).sqrt();
    for (c, z) in ci.iter().zip([1.6449, 1.96, 2.5758]) {
        let h = z * s / 50f64.sqrt();
        ensure((c.lower - (m - h)).abs() <= C9_TOL && (c.upper - (m + h)).abs() <= C9_TOL, || format!("level {}", c.level))?;
    }
    // degenerate spread is exact
    let flat = evalcli::confidence_intervals(&[0.37; 500], 50, &[90, 95, 99], Some(1)).map_err(|e| e.to_string())?;
    ensure(flat.iter().all(|c| c.std == 0.0 && c.lower == 0.37 && c.upper == 0.37 && c.h0_accepted), || format!("degenerate case: {:?}", flat[0]))?;
    // nesting on random inputs
    for trial in 0..500 {
        let n = rng.gen_range(50..600);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let c = evalcli::confidence_intervals(&e, 50, &[90, 95, 99], Some(trial)).map_err(|e| e.to_string())?;
        ensure(c[1].lower <= c[0].lower && c[0].upper <= c[1].upper && c[2].lower <= c[1].lower && c[1].upper <= c[2].upper, || {
            format!("nesting fails on trial {trial}")
        })?;
    }
    Ok(format!("CI95 = ({lo:.4}, {hi:.4}); grouped path, degenerate case and 500 nesting trials agree"))
}

// ---- C10 ---------------------------------------------------------------

fn c10_sparsity_response() -> Outcome {
    let mut counts = [0usize; 2];
    for seed in 0..C10_SEEDS {
        for (slot, lambda) in [0.0, C10_LAMBDA].into_iter().enumerate() {
            let mut cfg = fixture_config("tiny.toml");
            cfg.seed = seed;
            cfg.trainloop.lambda = lambda;
            let mut pipe = Pipeline::new(cfg, &scratch(&format!("sparsity_{seed}_{slot}"))).map_err(|e| e.to_string())?;
            let prep = pipe.preprocess().map_err(|e| e.to_string())?;
            let feats = pipe.features(&prep).map_err(|e| e.to_string())?;
            let gs = pipe.graphs(&prep).map_err(|e| e.to_string())?;
            let (net, res) = pipe.train(&prep, &feats, &gs).map_err(|e| e.to_string())?;
            counts[slot] += net.active_gates(&res.params);
        }
    }
    let avg = counts.map(|c| c as f64 / C10_SEEDS as f64);
    let msg = format!("mean active gates λ=0: {:.1}, λ={C10_LAMBDA:e}: {:.1}", avg[0], avg[1]);
    ensure(avg[1] < avg[0], || msg.clone())?;
    Ok(msg)
}

// ---- C11 ---------------------------------------------------------------

fn c11_leakage_and_determinism() -> Outcome {
    let cfg = fixture_config("tiny.toml");
    let (ds, _) = evalcli::load_data(&cfg).map_err(|e| e.to_string())?;
    let sp = split(&ds, &SplitSpec { train_density: 50.0, seed: 3, val_fraction: 0.1 }).map_err(|e| e.to_string())?;
    let mut permuted = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in 0..ds.tasks() {
        let cells = sp.test[p].entries();
        let mut vals: Vec<f64> = cells.iter().map(|&(i, j)| ds.values[p].get(i, j)).collect();
        rand::seq::SliceRandom::shuffle(&mut vals[..], &mut rng);
        vals.iter_mut().for_each(|v| *v *= rng.gen_range(0.5..2.0));
        for (&(i, j), v) in cells.iter().zip(vals) {
            permuted.values[p].set(i, j, v);
        }
    }
    ensure(permuted.values != ds.values, || "test values unchanged".into())?;
    let fc = FeatureConfig { d: 8, nmf_iters: 50, ae_epochs: 30, ae_lr: 1e-2, seed: 2 };
    let a = (GraphSet::build(&ds, &sp.train).unwrap(), build_features(&ds, &sp.train, &fc).unwrap());
    let b = (GraphSet::build(&permuted, &sp.train).unwrap(), build_features(&permuted, &sp.train, &fc).unwrap());
    ensure(a.0 == b.0, || "adjacencies depend on test values".into())?;
    ensure(a.1 == b.1, || "features depend on test values".into())?;

    let mut strict = cfg.clone();
    strict.evalcli.strict_determinism = true;
    let (d1, d2) = (scratch("strict_1"), scratch("strict_2"));
    evalcli::run_experiment(&strict, &d1).map_err(|e| e.to_string())?;
    evalcli::run_experiment(&strict, &d2).map_err(|e| e.to_string())?;
    par::set_sequential(false);
    let r1 = std::fs::read(d1.join("report.json")).map_err(|e| e.to_string())?;
    let r2 = std::fs::read(d2.join("report.json")).map_err(|e| e.to_string())?;
    ensure(r1 == r2, || "strict-mode reports differ".into())?;
    Ok(format!("graphs and features unchanged under test-value permutation; strict reports identical ({} bytes)", r1.len()))
}

// ---- driver ------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f.eq_ignore_ascii_case(id));
    let mut base: Option<EvalReport> = None;
    let mut failures = 0;
    let mut run = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {id:>3} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {id:>3} {name}: {msg} [{secs:.1}s]");
            }
        }
    };
    run("C1", "hyperbolic identities", &mut c1_hyperbolic_identities);
    run("C2", "gradient contract", &mut c2_gradient_contract);
    run("C3", "scalar forward oracle", &mut c3_scalar_forward_oracle);
    run("C4", "EMA balancing", &mut c4_ema_balancing);
    run("C5", "hard-concrete statistics", &mut c5_hard_concrete);
    run("C6", "overfit check", &mut c6_overfit);
    run("C7", "desk-scale generalization", &mut || c7_desk_generalization(&mut base));
    run("C8", "improvement arithmetic", &mut c8_improvement_cells);
    run("C9", "confidence intervals", &mut c9_confidence_intervals);
    run("C10", "sparsity response", &mut c10_sparsity_response);
    run("C11", "leakage and determinism", &mut c11_leakage_and_determinism);
    run("C12", "cold-start trend", &mut || c12_cold_start_trend(&mut base));
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
