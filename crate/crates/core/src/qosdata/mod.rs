//! QoS matrices, context attributes, and the sampling protocols used for
//! evaluation (density splits, cold-start, outlier filtering).

mod iforest;
mod split;
pub mod synth;
pub mod wsdream;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub use iforest::{average_path_length, IsolationForest, IsolationForestConfig};
pub use split::{
    filter_outliers, make_cold_start, select_cold_entities, split, ColdStartKind, ColdStartSpec,
    Splits, SplitSpec,
};

/// Dense boolean `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.bits[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Set coordinates in row-major order.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count());
        for (k, &b) in self.bits.iter().enumerate() {
            if b {
                out.push((k / self.cols, k % self.cols));
            }
        }
        out
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Mask { rows: self.rows, cols: self.cols, bits }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    /// `self ⊆ other`
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// One categorical context attribute over users and services, with a
/// vocabulary shared by both entity kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextAttr {
    pub vocab: Vec<String>,
    pub users: Vec<usize>,
    pub services: Vec<usize>,
}

impl ContextAttr {
    /// Intern raw labels for users and services.
    pub fn from_labels(users: &[String], services: &[String]) -> Self {
        let mut vocab = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |s: &String| {
            *index.entry(s.clone()).or_insert_with(|| {
                vocab.push(s.clone());
                vocab.len() - 1
            })
        };
        let users = users.iter().map(&mut intern).collect();
        let services = services.iter().map(&mut intern).collect();
        ContextAttr { vocab, users, services }
    }

    pub fn user_label(&self, i: usize) -> &str {
        &self.vocab[self.users[i]]
    }

    pub fn service_label(&self, j: usize) -> &str {
        &self.vocab[self.services[j]]
    }

    /// Category of graph node `k` (users first, then services).
    pub fn node(&self, k: usize) -> usize {
        if k < self.users.len() {
            self.users[k]
        } else {
            self.services[k - self.users.len()]
        }
    }
}

/// Which context attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribute {
    Region,
    As,
}

/// Which side of the user–service matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    User,
    Service,
}

/// P partially observed user × service QoS matrices plus context.
#[derive(Clone, Debug, PartialEq)]
pub struct QosDataset {
    pub n: usize,
    pub m: usize,
    pub task_names: Vec<String>,
    /// Dense `n × m` values; unobserved cells hold 0.
    pub values: Vec<Mat>,
    pub observed: Vec<Mask>,
    pub region: ContextAttr,
    pub as_attr: ContextAttr,
}

impl QosDataset {
    pub fn tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn nodes(&self) -> usize {
        self.n + self.m
    }

    pub fn attr(&self, a: Attribute) -> &ContextAttr {
        match a {
            Attribute::Region => &self.region,
            Attribute::As => &self.as_attr,
        }
    }

    /// Build from dense matrices where values ≤ 0 mark unobserved cells.
    pub fn from_dense(
        task_names: Vec<String>,
        raw: Vec<Mat>,
        region: ContextAttr,
        as_attr: ContextAttr,
    ) -> Result<Self> {
        let first = raw.first().ok_or_else(|| Error::Dataset("no QoS matrices".into()))?;
        let (n, m) = first.shape();
        if raw.len() != task_names.len() {
            return Err(Error::Dataset(format!(
                "{} task names for {} matrices",
                task_names.len(),
                raw.len()
            )));
        }
        let mut values = Vec::with_capacity(raw.len());
        let mut observed = Vec::with_capacity(raw.len());
        for (p, mat) in raw.into_iter().enumerate() {
            if mat.shape() != (n, m) {
                return Err(Error::Dataset(format!(
                    "task {} has shape {:?}, expected {:?}",
                    task_names[p],
                    mat.shape(),
                    (n, m)
                )));
            }
            let mask = Mask::from_fn(n, m, |i, j| mat.get(i, j) > 0.0);
            let clean = Mat::from_vec(n, m, mat.data.iter().map(|&v| v.max(0.0)).collect())?;
            if mask.is_empty() {
                log::warn!("task {} has no observed entries", task_names[p]);
            }
            values.push(clean);
            observed.push(mask);
        }
        let ds = QosDataset { n, m, task_names, values, observed, region, as_attr };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (p, (v, mask)) in self.values.iter().zip(&self.observed).enumerate() {
            if v.shape() != (self.n, self.m) || (mask.rows, mask.cols) != (self.n, self.m) {
                return Err(Error::Dataset(format!("task {p} shape mismatch")));
            }
            for i in 0..self.n {
                for j in 0..self.m {
                    let x = v.get(i, j);
                    if !x.is_finite() || (mask.get(i, j) && x <= 0.0) {
                        return Err(Error::Dataset(format!(
                            "task {p} entry ({i},{j}) = {x} is not a valid observation"
                        )));
                    }
                }
            }
        }
        for attr in [&self.region, &self.as_attr] {
            if attr.users.len() != self.n || attr.services.len() != self.m {
                return Err(Error::Dataset("context attribute length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Observed `(i, j, value)` triples of task `p` restricted to `mask`.
    pub fn entries(&self, p: usize, mask: &Mask) -> Vec<(usize, usize, f64)> {
        mask.entries().into_iter().map(|(i, j)| (i, j, self.values[p].get(i, j))).collect()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse a whitespace-separated numeric grid. `-1` and `0` mark missing
/// entries; any other negative value is rejected.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("not a number: {tok:?}"),
            })?;
            if !v.is_finite() || (v < 0.0 && v != -1.0) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: ln + 1,
                    msg: format!("invalid QoS value {v}"),
                });
            }
            row.push(if v == -1.0 { 0.0 } else { v });
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: ln + 1,
                    msg: format!("row has {} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(Mat::from_rows(&rows))
}

/// Parse the `kind\tindex\tregion\tas` context table.
pub fn parse_context(text: &str, path: &Path, n: usize, m: usize) -> Result<(ContextAttr, ContextAttr)> {
    let mut user: Vec<Option<(String, String)>> = vec![None; n];
    let mut service: Vec<Option<(String, String)>> = vec![None; m];
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if ln == 0 && cols.first().map(|c| c.trim()) == Some("kind") {
            continue;
        }
        if cols.len() != 4 {
            return Err(perr(ln + 1, format!("expected 4 tab-separated columns, got {}", cols.len())));
        }
        let idx: usize =
            cols[1].trim().parse().map_err(|_| perr(ln + 1, format!("bad index {:?}", cols[1])))?;
        let slot = match cols[0].trim() {
            "user" => user.get_mut(idx),
            "service" => service.get_mut(idx),
            other => return Err(perr(ln + 1, format!("unknown entity kind {other:?}"))),
        }
        .ok_or_else(|| perr(ln + 1, format!("index {idx} out of range")))?;
        *slot = Some((cols[2].trim().to_string(), cols[3].trim().to_string()));
    }
    let unpack = |v: Vec<Option<(String, String)>>, kind: &str| -> Result<(Vec<String>, Vec<String>)> {
        let mut r = Vec::with_capacity(v.len());
        let mut a = Vec::with_capacity(v.len());
        for (i, e) in v.into_iter().enumerate() {
            let (reg, asn) =
                e.ok_or_else(|| Error::Dataset(format!("missing context row for {kind} {i}")))?;
            r.push(reg);
            a.push(asn);
        }
        Ok((r, a))
    };
    let (ur, ua) = unpack(user, "user")?;
    let (sr, sa) = unpack(service, "service")?;
    Ok((ContextAttr::from_labels(&ur, &sr), ContextAttr::from_labels(&ua, &sa)))
}

/// Load raw matrix files plus the context table.
pub fn load_dataset(
    matrix_paths: &[PathBuf],
    context_path: &Path,
    task_names: &[String],
) -> Result<QosDataset> {
    if matrix_paths.len() != task_names.len() {
        return Err(Error::Dataset(format!(
            "{} matrix files for {} task names",
            matrix_paths.len(),
            task_names.len()
        )));
    }
    let mut raw = Vec::with_capacity(matrix_paths.len());
    for p in matrix_paths {
        raw.push(parse_matrix(&read_to_string(p)?, p)?);
    }
    let (n, m) = raw.first().map(Mat::shape).unwrap_or((0, 0));
    if let Some((p, bad)) = raw.iter().enumerate().find(|(_, r)| r.shape() != (n, m)) {
        return Err(Error::Dataset(format!(
            "{} has shape {:?}, expected {:?}",
            matrix_paths[p].display(),
            bad.shape(),
            (n, m)
        )));
    }
    let (region, as_attr) = parse_context(&read_to_string(context_path)?, context_path, n, m)?;
    QosDataset::from_dense(task_names.to_vec(), raw, region, as_attr)
}

/// Write a matrix in the raw whitespace format (`-1` for unobserved).
pub fn write_raw_matrix(path: &Path, values: &Mat, observed: &Mask) -> Result<()> {
    let mut out = String::new();
    for i in 0..values.rows {
        let row: Vec<String> = (0..values.cols)
            .map(|j| if observed.get(i, j) { format!("{}", values.get(i, j)) } else { "-1".into() })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn context_tsv(ds: &QosDataset) -> String {
    let mut out = String::from("kind\tindex\tregion\tas\n");
    for i in 0..ds.n {
        out.push_str(&format!("user\t{i}\t{}\t{}\n", ds.region.user_label(i), ds.as_attr.user_label(i)));
    }
    for j in 0..ds.m {
        out.push_str(&format!(
            "service\t{j}\t{}\t{}\n",
            ds.region.service_label(j),
            ds.as_attr.service_label(j)
        ));
    }
    out
}

/// Write raw matrices (`<task>.txt`) and `context.tsv` into `dir`.
pub fn write_raw_dataset(dir: &Path, ds: &QosDataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (p, name) in ds.task_names.iter().enumerate() {
        let path = dir.join(format!("{name}.txt"));
        write_raw_matrix(&path, &ds.values[p], &ds.observed[p])?;
        paths.push(path);
    }
    let ctx = dir.join("context.tsv");
    fs::write(&ctx, context_tsv(ds)).map_err(|e| Error::io(&ctx, e))?;
    Ok(paths)
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    n: usize,
    m: usize,
    #[serde(rename = "P")]
    p: usize,
    task_names: Vec<String>,
    seed: Option<u64>,
    source: String,
}

/// Write the normalized archive: `meta.json`, `values_<task>.csv`
/// (`row,col,value` triples) and `context.tsv`.
pub fn write_archive(dir: &Path, ds: &QosDataset, seed: Option<u64>, source: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ArchiveMeta {
        n: ds.n,
        m: ds.m,
        p: ds.tasks(),
        task_names: ds.task_names.clone(),
        seed,
        source: source.to_string(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    for (p, name) in ds.task_names.iter().enumerate() {
        let path = dir.join(format!("values_{name}.csv"));
        let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        let mut emit = || -> std::io::Result<()> {
            writeln!(f, "row,col,value")?;
            for (i, j) in ds.observed[p].entries() {
                writeln!(f, "{i},{j},{}", ds.values[p].get(i, j))?;
            }
            f.flush()
        };
        emit().map_err(|e| Error::io(&path, e))?;
    }
    let ctx = dir.join("context.tsv");
    fs::write(&ctx, context_tsv(ds)).map_err(|e| Error::io(&ctx, e))
}

pub fn read_archive(dir: &Path) -> Result<QosDataset> {
    let meta_path = dir.join("meta.json");
    let meta: ArchiveMeta = serde_json::from_str(&read_to_string(&meta_path)?)?;
    let mut raw = Vec::with_capacity(meta.p);
    for name in &meta.task_names {
        let path = dir.join(format!("values_{name}.csv"));
        let text = read_to_string(&path)?;
        let mut mat = Mat::zeros(meta.n, meta.m);
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse { path: path.clone(), line: ln + 1, msg: format!("bad triple {line:?}") };
            if parts.len() != 3 {
                return Err(bad());
            }
            let i: usize = parts[0].trim().parse().map_err(|_| bad())?;
            let j: usize = parts[1].trim().parse().map_err(|_| bad())?;
            let v: f64 = parts[2].trim().parse().map_err(|_| bad())?;
            if i >= meta.n || j >= meta.m || !(v > 0.0) {
                return Err(bad());
            }
            mat.set(i, j, v);
        }
        raw.push(mat);
    }
    let ctx_path = dir.join("context.tsv");
    let (region, as_attr) = parse_context(&read_to_string(&ctx_path)?, &ctx_path, meta.n, meta.m)?;
    QosDataset::from_dense(meta.task_names, raw, region, as_attr)
}
