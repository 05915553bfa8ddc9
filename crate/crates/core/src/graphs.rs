//! Invocation, context and hypergraph adjacencies.
//!
//! Node indexing: users `0..n`, services `n..n+m`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Csr;
use crate::par;
use crate::qosdata::{Attribute, Mask, QosDataset};

/// Guard substituted for a zero degree.
pub const DEGREE_EPS: f64 = 1.0;

/// Coordinate-list sparse matrix; entries sorted row-major, no duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdj {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub symmetric: bool,
}

impl SparseAdj {
    /// Build from triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>, symmetric: bool) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in triplets {
            debug_assert!(i < n_rows && j < n_cols);
            *acc.entry((i, j)).or_insert(0.0) += w;
        }
        let entries = acc.into_iter().map(|((i, j), w)| (i, j, w)).collect();
        SparseAdj { n_rows, n_cols, entries, symmetric }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_csr(&self) -> Csr {
        Csr::from_triplets(self.n_rows, self.n_cols, &self.entries)
    }

    pub fn to_dense(&self) -> crate::linalg::Mat {
        self.to_csr().to_dense()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// Row sums.
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_rows];
        for &(i, _, w) in &self.entries {
            d[i] += w;
        }
        d
    }

    /// Exact structural and numeric symmetry check.
    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.entries.iter().all(|&(i, j, w)| self.get(j, i) == w)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut f = std::io::BufWriter::new(f);
        let mut emit = || -> std::io::Result<()> {
            writeln!(f, "row,col,weight")?;
            for &(i, j, w) in &self.entries {
                writeln!(f, "{i},{j},{w}")?;
            }
            f.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Bipartite 0/1 graph with an edge `(i, n+j)` for every training entry.
pub fn build_invocation_graph(ds: &QosDataset, train: &Mask) -> SparseAdj {
    let n = ds.n;
    let edges = train
        .entries()
        .into_iter()
        .flat_map(|(i, j)| [(i, n + j, 1.0), (n + j, i, 1.0)]);
    SparseAdj::from_triplets(ds.nodes(), ds.nodes(), edges, true)
}

/// 0/1 graph linking distinct entities that share the attribute value.
pub fn build_context_graph(ds: &QosDataset, attribute: Attribute) -> SparseAdj {
    let attr = ds.attr(attribute);
    let nodes = ds.nodes();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); attr.vocab.len()];
    for k in 0..nodes {
        groups[attr.node(k)].push(k);
    }
    let mut entries = Vec::new();
    for g in &groups {
        for &a in g {
            for &b in g {
                if a != b {
                    entries.push((a, b, 1.0));
                }
            }
        }
    }
    entries.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    SparseAdj { n_rows: nodes, n_cols: nodes, entries, symmetric: true }
}

fn guard(d: f64) -> f64 {
    if d > 0.0 {
        d
    } else {
        DEGREE_EPS
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A` (guarded).
pub fn normalize_adjacency(a: &SparseAdj) -> Result<SparseAdj> {
    if a.n_rows != a.n_cols {
        return Err(Error::Shape(format!("adjacency must be square, got {}x{}", a.n_rows, a.n_cols)));
    }
    let inv_sqrt: Vec<f64> = a.degrees().into_iter().map(|d| guard(d).sqrt().recip()).collect();
    let with_self = a.entries.iter().copied().chain((0..a.n_rows).map(|i| (i, i, 1.0)));
    let mut out = SparseAdj::from_triplets(a.n_rows, a.n_cols, with_self, a.symmetric);
    for e in &mut out.entries {
        e.2 *= inv_sqrt[e.0] * inv_sqrt[e.1];
    }
    Ok(out)
}

/// Second-hop normalized adjacency `Dv^{-1/2} H De^{-1} Hᵀ Dv^{-1/2}` for the
/// vertices given by the rows of the incidence `members` (one list of vertex
/// ids per hyperedge).
fn hyper_adjacency(vertices: usize, members: &[Vec<usize>]) -> SparseAdj {
    let mut deg = vec![0.0; vertices];
    for e in members {
        for &v in e {
            deg[v] += 1.0;
        }
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| guard(d).sqrt().recip()).collect();
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for e in members {
        if e.is_empty() {
            continue;
        }
        let w = 1.0 / e.len() as f64;
        for &a in e {
            for &b in e {
                *acc.entry((a, b)).or_insert(0.0) += w;
            }
        }
    }
    let entries = acc.into_iter().map(|((a, b), w)| (a, b, w * (inv_sqrt[a] * inv_sqrt[b]))).collect();
    SparseAdj { n_rows: vertices, n_cols: vertices, entries, symmetric: true }
}

/// User (n×n) and service (m×m) hypergraph adjacencies of one task.
pub fn build_hypergraphs(ds: &QosDataset, train: &Mask) -> (SparseAdj, SparseAdj) {
    let mut by_service: Vec<Vec<usize>> = vec![Vec::new(); ds.m];
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n];
    for (i, j) in train.entries() {
        by_service[j].push(i);
        by_user[i].push(j);
    }
    (hyper_adjacency(ds.n, &by_service), hyper_adjacency(ds.m, &by_user))
}

/// All normalized graphs used by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSet {
    pub qos: Vec<SparseAdj>,
    pub region: SparseAdj,
    pub as_graph: SparseAdj,
    pub hyper_user: Vec<SparseAdj>,
    pub hyper_service: Vec<SparseAdj>,
}

impl GraphSet {
    /// Build from training masks only.
    pub fn build(ds: &QosDataset, train: &[Mask]) -> Result<GraphSet> {
        if train.len() != ds.tasks() {
            return Err(Error::Shape(format!("{} train masks for {} tasks", train.len(), ds.tasks())));
        }
        let per_task = par::map_indices(ds.tasks(), |p| {
            let qos = normalize_adjacency(&build_invocation_graph(ds, &train[p]));
            let (hu, hs) = build_hypergraphs(ds, &train[p]);
            qos.map(|q| (q, hu, hs))
        });
        let mut gs = GraphSet {
            qos: Vec::new(),
            region: normalize_adjacency(&build_context_graph(ds, Attribute::Region))?,
            as_graph: normalize_adjacency(&build_context_graph(ds, Attribute::As))?,
            hyper_user: Vec::new(),
            hyper_service: Vec::new(),
        };
        for r in per_task {
            let (q, hu, hs) = r?;
            gs.qos.push(q);
            gs.hyper_user.push(hu);
            gs.hyper_service.push(hs);
        }
        Ok(gs)
    }

    /// `(name, graph)` pairs in a stable order.
    pub fn named(&self, task_names: &[String]) -> Vec<(String, &SparseAdj)> {
        let mut out = vec![("region".to_string(), &self.region), ("as".to_string(), &self.as_graph)];
        for (p, name) in task_names.iter().enumerate() {
            out.push((format!("qos_{name}"), &self.qos[p]));
            out.push((format!("hyper_user_{name}"), &self.hyper_user[p]));
            out.push((format!("hyper_service_{name}"), &self.hyper_service[p]));
        }
        out
    }

    /// Debug dump: one `edges_<name>.csv` per graph.
    pub fn write_edges(&self, dir: &Path, task_names: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, g) in self.named(task_names) {
            g.write_csv(&dir.join(format!("edges_{name}.csv")))?;
        }
        Ok(())
    }
}
