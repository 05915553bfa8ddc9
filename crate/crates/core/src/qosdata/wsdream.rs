//! Reader for the public WS-DREAM dataset #1 layout (`rtMatrix.txt`,
//! `tpMatrix.txt`, `userlist.txt`, `wslist.txt`) and entity subsampling.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;

use super::{parse_matrix, ContextAttr, Mask, QosDataset};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::rng_for;

/// Environment variable pointing at an unpacked WS-DREAM directory.
pub const ENV_DIR: &str = "SHARPQOS_WSDREAM_DIR";

/// Parse a WS-DREAM entity list: tab-separated rows after a bracketed
/// header and a dashed rule. Returns `(country, as)` per entity, in id order.
fn parse_entity_list(text: &str, path: &Path, country_col: usize, as_col: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('[') || t.starts_with('-') || t.starts_with('=') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let need = country_col.max(as_col) + 1;
        if cols.len() < need {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("expected at least {need} columns, got {}", cols.len()),
            });
        }
        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg: format!("bad entity id {:?}", cols[0]),
        })?;
        if id != out.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("entity ids must be consecutive from 0; got {id}"),
            });
        }
        out.push((cols[country_col].to_string(), cols[as_col].to_string()));
    }
    Ok(out)
}

/// Load the two-task (rt, tp) dataset from a WS-DREAM directory.
pub fn load_dir(dir: &Path) -> Result<QosDataset> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map(|t| (t, p.clone())).map_err(|e| Error::io(&p, e))
    };
    let (rt_text, rt_path) = read("rtMatrix.txt")?;
    let (tp_text, tp_path) = read("tpMatrix.txt")?;
    let (ul_text, ul_path) = read("userlist.txt")?;
    let (sl_text, sl_path) = read("wslist.txt")?;
    let rt = parse_matrix(&rt_text, &rt_path)?;
    let tp = parse_matrix(&tp_text, &tp_path)?;
    let users = parse_entity_list(&ul_text, &ul_path, 2, 4)?;
    let services = parse_entity_list(&sl_text, &sl_path, 4, 6)?;
    if users.len() != rt.rows || services.len() != rt.cols {
        return Err(Error::Dataset(format!(
            "entity lists ({} users, {} services) do not match the {}x{} matrix",
            users.len(),
            services.len(),
            rt.rows,
            rt.cols
        )));
    }
    let col = |v: &[(String, String)], first: bool| -> Vec<String> {
        v.iter().map(|(a, b)| if first { a.clone() } else { b.clone() }).collect()
    };
    let region = ContextAttr::from_labels(&col(&users, true), &col(&services, true));
    let as_attr = ContextAttr::from_labels(&col(&users, false), &col(&services, false));
    QosDataset::from_dense(vec!["rt".into(), "tp".into()], vec![rt, tp], region, as_attr)
}

/// Restrict a dataset to the given users and services (in the given order).
pub fn restrict(ds: &QosDataset, users: &[usize], services: &[usize]) -> Result<QosDataset> {
    let (n, m) = (users.len(), services.len());
    let mut raw = Vec::with_capacity(ds.tasks());
    for p in 0..ds.tasks() {
        let mut mat = Mat::zeros(n, m);
        for (a, &i) in users.iter().enumerate() {
            for (b, &j) in services.iter().enumerate() {
                if ds.observed[p].get(i, j) {
                    mat.set(a, b, ds.values[p].get(i, j));
                }
            }
        }
        raw.push(mat);
    }
    let pick = |attr: &ContextAttr| {
        let u: Vec<String> = users.iter().map(|&i| attr.user_label(i).to_string()).collect();
        let s: Vec<String> = services.iter().map(|&j| attr.service_label(j).to_string()).collect();
        ContextAttr::from_labels(&u, &s)
    };
    QosDataset::from_dense(ds.task_names.clone(), raw, pick(&ds.region), pick(&ds.as_attr))
}

/// Uniformly sample `n` users and `m` services without replacement.
pub fn subsample(ds: &QosDataset, n: usize, m: usize, seed: u64) -> Result<QosDataset> {
    if n > ds.n || m > ds.m || n == 0 || m == 0 {
        return Err(Error::Dataset(format!("cannot subsample {n}x{m} from {}x{}", ds.n, ds.m)));
    }
    let mut users = sample(&mut rng_for(seed, 0x5AB_0001), ds.n, n).into_vec();
    let mut services = sample(&mut rng_for(seed, 0x5AB_0002), ds.m, m).into_vec();
    users.sort_unstable();
    services.sort_unstable();
    restrict(ds, &users, &services)
}

/// Observed-entry count per task.
pub fn observed_counts(ds: &QosDataset) -> Vec<usize> {
    ds.observed.iter().map(Mask::count).collect()
}
