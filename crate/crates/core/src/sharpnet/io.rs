//! `model.ckpt` directory (meta.json + flat f64 blob) and gate dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{inference_gate, ModelConfig, ParamStore, SharpNet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub n: usize,
    pub m: usize,
    pub tasks: usize,
    pub seed: u64,
    pub epoch: usize,
    pub numel: usize,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

pub fn save_checkpoint(dir: &Path, net: &SharpNet, store: &ParamStore, seed: u64, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = store
        .manifest()
        .into_iter()
        .map(|(name, offset, rows, cols)| ManifestEntry { name, offset, rows, cols })
        .collect();
    let meta = CheckpointMeta {
        config: net.cfg.clone(),
        n: net.n,
        m: net.m,
        tasks: net.tasks,
        seed,
        epoch,
        numel: store.numel(),
        manifest,
    };
    let mp = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    let bytes: Vec<u8> = store.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bp = dir.join("params.bin");
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))
}

/// Load a checkpoint and rebuild the network it was saved from.
pub fn load_checkpoint(dir: &Path) -> Result<(SharpNet, Checkpoint)> {
    let mp = dir.join("meta.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    let net = SharpNet::new(meta.config.clone(), meta.n, meta.m, meta.tasks)?;
    let mut store = ParamStore::zeros(net.specs.clone());
    let expected: Vec<_> = store.manifest();
    let matches = expected.len() == meta.manifest.len()
        && expected
            .iter()
            .zip(&meta.manifest)
            .all(|(a, b)| a.0 == b.name && a.1 == b.offset && a.2 == b.rows && a.3 == b.cols);
    if !matches {
        return Err(Error::Shape("checkpoint manifest does not match the model layout".into()));
    }
    let bp = dir.join("params.bin");
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() != 8 * meta.numel {
        return Err(Error::Shape(format!("params.bin has {} bytes, expected {}", bytes.len(), 8 * meta.numel)));
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    store.set_flat(&flat)?;
    if !store.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((net, Checkpoint { meta, params: store }))
}

/// One row per routing block of task `p`: `block,log_alpha,inference_gate`.
pub fn write_gates_csv(path: &Path, net: &SharpNet, store: &ParamStore, p: usize) -> Result<()> {
    let mut out = String::from("block,log_alpha,inference_gate\n");
    let mut routers = vec![("snr", &net.layout.snr)];
    if net.tasks >= 2 {
        routers.push(("cross", &net.layout.cross));
    }
    for (label, r) in routers {
        for (k, &a) in store.values[r.log_alpha[p]].data.iter().enumerate() {
            out.push_str(&format!("{label}/{k},{a:.17e},{}\n", inference_gate(a, net.cfg.delta)));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_gates_csv(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, s: &str| -> Result<f64> {
        s.trim().parse().map_err(|_| Error::Parse { path: path.into(), line, msg: format!("bad number {s:?}") })
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Parse { path: path.into(), line: i + 1, msg: "expected 3 columns".into() });
            }
            Ok((cols[0].to_string(), parse(i + 1, cols[1])?, parse(i + 1, cols[2])?))
        })
        .collect()
}
