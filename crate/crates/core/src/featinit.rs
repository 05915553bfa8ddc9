//! Initial node features: masked NMF per QoS task and autoencoded one-hot
//! context attributes.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::qosdata::{Attribute, EntityKind, Mask, QosDataset};
use crate::rng::rng_for;
use crate::tape::Tape;

const NMF_EPS: f64 = 1e-12;

/// Masked NMF result with the per-iteration masked Frobenius error
/// (entry 0 is the error at initialization).
#[derive(Clone, Debug)]
pub struct NmfFit {
    pub u: Mat,
    pub v: Mat,
    pub errors: Vec<f64>,
}

fn masked_error(entries: &[(usize, usize, f64)], u: &Mat, v: &Mat) -> f64 {
    entries
        .iter()
        .map(|&(i, j, q)| {
            let r = q - crate::linalg::dot(u.row(i), v.row(j));
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Multiplicative-update NMF fitted to the masked entries of `q` only.
pub fn nmf(q: &Mat, mask: &Mask, rank: usize, iters: usize, seed: u64) -> Result<NmfFit> {
    let (n, m) = q.shape();
    if rank == 0 {
        return Err(Error::Config("NMF rank must be at least 1".into()));
    }
    let entries: Vec<(usize, usize, f64)> =
        mask.entries().into_iter().map(|(i, j)| (i, j, q.get(i, j))).collect();
    if entries.is_empty() {
        return Err(Error::EmptyMask("NMF needs at least one observed entry".into()));
    }
    if entries.iter().any(|e| !(e.2 >= 0.0) || !e.2.is_finite()) {
        return Err(Error::Dataset("NMF input must be finite and non-negative".into()));
    }
    let mean = entries.iter().map(|e| e.2).sum::<f64>() / entries.len() as f64;
    let scale = (mean / rank as f64).sqrt();
    let mut rng = rng_for(seed, 0x0A3F);
    let mut u = Mat::from_vec(n, rank, (0..n * rank).map(|_| rng.gen::<f64>() * scale).collect())?;
    let mut v = Mat::from_vec(m, rank, (0..m * rank).map(|_| rng.gen::<f64>() * scale).collect())?;

    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for &(i, j, x) in &entries {
        by_row[i].push((j, x));
        by_col[j].push((i, x));
    }
    // one half-step: a ← a ⊙ Σ q·b / Σ (a·b)·b over the masked neighbours
    fn half_step(a: &mut Mat, b: &Mat, lists: &[Vec<(usize, f64)>]) {
        let k = a.cols;
        let prev = a.clone();
        par::for_each_row(&mut a.data, k, |i, row| {
            let ai = prev.row(i);
            let mut num = vec![0.0; k];
            let mut den = vec![0.0; k];
            for &(j, x) in &lists[i] {
                let bj = b.row(j);
                let pred = crate::linalg::dot(ai, bj);
                for r in 0..k {
                    num[r] += x * bj[r];
                    den[r] += pred * bj[r];
                }
            }
            for r in 0..k {
                // rows with no observations keep their value
                if !lists[i].is_empty() {
                    row[r] = ai[r] * num[r] / (den[r] + NMF_EPS);
                }
            }
        });
    }
    let mut errors = Vec::with_capacity(iters + 1);
    errors.push(masked_error(&entries, &u, &v));
    for _ in 0..iters {
        half_step(&mut u, &v, &by_row);
        half_step(&mut v, &u, &by_col);
        errors.push(masked_error(&entries, &u, &v));
    }
    Ok(NmfFit { u, v, errors })
}

/// One-hot encoding of `attribute` for one entity kind; columns are the
/// categories that occur for that kind, in order of first appearance.
pub fn onehot_context(ds: &QosDataset, attribute: Attribute, kind: EntityKind) -> Mat {
    let attr = ds.attr(attribute);
    let ids = match kind {
        EntityKind::User => &attr.users,
        EntityKind::Service => &attr.services,
    };
    let mut column = std::collections::HashMap::new();
    for &c in ids {
        let next = column.len();
        column.entry(c).or_insert(next);
    }
    let mut x = Mat::zeros(ids.len(), column.len());
    for (r, c) in ids.iter().enumerate() {
        x.set(r, column[c], 1.0);
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig { width: 128, epochs: 300, lr: 1e-3, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct AeFit {
    /// Hidden representation, `rows × width`.
    pub codes: Mat,
    /// MSE before each update, plus the final loss.
    pub losses: Vec<f64>,
}

/// Single-hidden-layer autoencoder (ReLU encoder, sigmoid decoder, MSE),
/// full-batch AdamW.
pub fn autoencode(x: &Mat, cfg: &AutoencoderConfig, seed: u64) -> Result<AeFit> {
    let (rows, cols) = x.shape();
    if cfg.width == 0 || cols == 0 {
        return Err(Error::Config("autoencoder needs non-empty input and width".into()));
    }
    if cfg.width >= cols {
        log::warn!("autoencoder width {} ≥ input width {cols}: compression is trivial", cfg.width);
    }
    let mut rng = rng_for(seed, 0xAE);
    let glorot = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
        let a = (6.0 / (r + c) as f64).sqrt();
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
    };
    // Encoder weights start non-negative: with one-hot inputs each code is
    // relu(W_row + b), so a negative row would start (and stay) dead.
    let we = glorot(&mut rng, cols, cfg.width).map(f64::abs);
    let wd = glorot(&mut rng, cfg.width, cols);
    let mut params = vec![we, Mat::zeros(1, cfg.width), wd, Mat::zeros(1, cols)];
    let decay = [true, false, true, false];
    let opt_cfg = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt = AdamW::new(opt_cfg, params.iter().map(Mat::shape));
    let scale = 1.0 / (rows * cols) as f64;

    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let forward = |params: &[Mat], tape: &mut Tape| {
        let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let xin = tape.leaf(x.clone());
        let pre = tape.matmul(xin, vars[0]);
        let pre = tape.add_row(pre, vars[1]);
        let h = tape.relu(pre);
        let out = tape.matmul(h, vars[2]);
        let out = tape.add_row(out, vars[3]);
        let xhat = tape.sigmoid(out);
        let diff = tape.sub(xhat, xin);
        let sq = tape.mul(diff, diff);
        let total = tape.sum(sq);
        let loss = tape.mul_const(total, scale);
        (vars, h, loss)
    };
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let (vars, _, loss) = forward(&params, &mut tape);
        losses.push(tape.scalar(loss));
        let g = tape.backward(loss);
        let grads: Vec<Mat> =
            vars.iter().zip(&params).map(|(&v, p)| g.get_or_zeros(v, p.rows, p.cols)).collect();
        opt.update(&mut params, &grads, &decay);
    }
    let mut tape = Tape::new();
    let (_, h, loss) = forward(&params, &mut tape);
    losses.push(tape.scalar(loss));
    Ok(AeFit { codes: tape.value(h).clone(), losses })
}

/// Initial features per source, users stacked above services.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub qos: Vec<Mat>,
    pub region: Mat,
    pub as_feats: Mat,
}

impl FeatureBank {
    pub fn width(&self) -> usize {
        self.region.cols
    }

    /// `(source name, matrix)` pairs in a stable order.
    pub fn sources(&self, task_names: &[String]) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> =
            task_names.iter().zip(&self.qos).map(|(t, m)| (format!("qos_{t}"), m)).collect();
        out.push(("region".into(), &self.region));
        out.push(("as".into(), &self.as_feats));
        out
    }
}

fn stack(user: &Mat, service: &Mat, what: &str) -> Result<Mat> {
    if user.cols != service.cols {
        return Err(Error::Shape(format!(
            "{what}: user block width {} ≠ service block width {}",
            user.cols, service.cols
        )));
    }
    Mat::vstack(&[user, service])
}

/// Stack `(user, service)` blocks into N-row feature matrices.
/// `context` is `[(user_region, service_region), (user_as, service_as)]`.
pub fn assemble_bank(nmf: &[(Mat, Mat)], context: [(Mat, Mat); 2]) -> Result<FeatureBank> {
    let qos = nmf
        .iter()
        .enumerate()
        .map(|(p, (u, s))| stack(u, s, &format!("qos task {p}")))
        .collect::<Result<Vec<_>>>()?;
    let [(ur, sr), (ua, sa)] = context;
    Ok(FeatureBank { qos, region: stack(&ur, &sr, "region")?, as_feats: stack(&ua, &sa, "as")? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// NMF rank (d₁) and autoencoder width (d₂).
    pub d: usize,
    pub nmf_iters: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { d: 128, nmf_iters: 200, ae_epochs: 300, ae_lr: 1e-3, seed: 0 }
    }
}

/// Run the P NMF fits (train entries only) and the four autoencoders.
pub fn build_features(ds: &QosDataset, train: &[Mask], cfg: &FeatureConfig) -> Result<FeatureBank> {
    let nmf_fits = par::map_indices(ds.tasks(), |p| {
        nmf(&ds.values[p], &train[p], cfg.d, cfg.nmf_iters, cfg.seed.wrapping_add(p as u64))
            .map_err(|e| e.in_stage("featinit/nmf"))
    });
    let nmf_out = nmf_fits.into_iter().map(|r| r.map(|f| (f.u, f.v))).collect::<Result<Vec<_>>>()?;
    let ae_cfg = AutoencoderConfig { width: cfg.d, epochs: cfg.ae_epochs, lr: cfg.ae_lr, ..Default::default() };
    let jobs = [
        (Attribute::Region, EntityKind::User),
        (Attribute::Region, EntityKind::Service),
        (Attribute::As, EntityKind::User),
        (Attribute::As, EntityKind::Service),
    ];
    let codes = par::map_indices(jobs.len(), |k| {
        let (a, kind) = jobs[k];
        autoencode(&onehot_context(ds, a, kind), &ae_cfg, cfg.seed.wrapping_add(0x100 + k as u64))
            .map(|f| f.codes)
    });
    let mut codes = codes.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let mut next = || codes.next().expect("four autoencoders");
    let context = [(next(), next()), (next(), next())];
    assemble_bank(&nmf_out, context)
}

/// Write `features_<source>.bin` (u32 LE rows, u32 LE cols, then row-major
/// f64 LE) for every source, plus `features_meta.json`.
pub fn write_cache(dir: &Path, bank: &FeatureBank, task_names: &[String], cfg: &FeatureConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (name, m) in bank.sources(task_names) {
        let path = dir.join(format!("features_{name}.bin"));
        let mut buf = Vec::with_capacity(8 + 8 * m.data.len());
        buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    let meta = serde_json::json!({ "config": cfg, "task_names": task_names, "sources": names });
    let path = dir.join("features_meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn read_matrix_bin(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 0, msg: msg.to_string() };
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * rows * cols {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Mat::from_vec(rows, cols, data)
}

/// Read a cache written by [`write_cache`].
pub fn read_cache(dir: &Path) -> Result<(FeatureBank, FeatureConfig)> {
    let meta_path = dir.join("features_meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: serde_json::Value = serde_json::from_str(&text)?;
    let cfg: FeatureConfig = serde_json::from_value(meta["config"].clone())?;
    let tasks: Vec<String> = serde_json::from_value(meta["task_names"].clone())?;
    let load = |name: &str| read_matrix_bin(&dir.join(format!("features_{name}.bin")));
    let qos = tasks.iter().map(|t| load(&format!("qos_{t}"))).collect::<Result<Vec<_>>>()?;
    Ok((FeatureBank { qos, region: load("region")?, as_feats: load("as")? }, cfg))
}
