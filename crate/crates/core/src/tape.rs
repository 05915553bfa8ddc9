//! Minimal reverse-mode autodiff over dense matrices.
//!
//! Scalars are `1×1` matrices. Nodes are appended in evaluation order, so a
//! single reverse sweep over the node list is a valid topological order.

use std::sync::Arc;

use crate::hyperball;
use crate::linalg::{Csr, Mat};
use crate::par;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant sparse operator together with its transpose.
#[derive(Debug)]
pub struct SparseOp {
    pub fwd: Csr,
    pub bwd: Csr,
}

impl SparseOp {
    pub fn new(m: Csr) -> Arc<Self> {
        let bwd = m.transpose();
        Arc::new(SparseOp { fwd: m, bwd })
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Spmm(Arc<SparseOp>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Recip(Var),
    AddConst(Var),
    MulConst(Var, f64),
    Clip(Var, f64, f64),
    ScaleBy(Var, Var),
    Sum(Var),
    WeightedSum(Vec<Var>, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Exp0(Var, Var),
    Log0(Var, Var),
    MobiusAddRow(Var, Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    MaskedMae(Var, Arc<Vec<(usize, usize, f64)>>),
    Pick(Var, usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | ScaleBy(a, b) | Exp0(a, b) | Log0(a, b) => vec![*a, *b],
            Spmm(_, a) | Relu(a) | Sigmoid(a) | Exp(a) | Softplus(a) | Recip(a) | AddConst(a)
            | MulConst(a, _) | Clip(a, _, _) | Sum(a) | SliceRows(a, _) | MaskedMae(a, _)
            | Pick(a, _, _) => vec![*a],
            WeightedSum(v, _) | ConcatCols(v) | ConcatRows(v) => v.clone(),
            MobiusAddRow(a, b, c) => vec![*a, *b, *c],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    /// False for constants and for nodes depending only on constants.
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let grad = match op {
            Op::Leaf => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.nodes.push(Node { value: m, op: Op::Leaf, grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Multiply–add count of the products recorded so far.
    pub fn macs(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::MatMul(a, _) => (self.value(*a).rows * self.value(*a).cols * n.value.cols) as u64,
                Op::MatMulNT(a, _) => (self.value(*a).rows * self.value(*a).cols * n.value.cols) as u64,
                Op::Spmm(s, _) => (s.fwd.nnz() * n.value.cols) as u64,
                _ => 0,
            })
            .sum()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_scalar()
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Mat::scalar(v))
    }

    /// Entry `(i, j)` of `a` as a scalar node.
    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Var {
        let v = Mat::scalar(self.value(a).get(i, j));
        self.push(v, Op::Pick(a, i, j))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn spmm(&mut self, s: &Arc<SparseOp>, x: Var) -> Var {
        let v = s.fwd.spmm(self.value(x));
        self.push(v, Op::Spmm(Arc::clone(s), x))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise op shape mismatch");
        Mat {
            rows: ma.rows,
            cols: ma.cols,
            data: ma.data.iter().zip(&mb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Add a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, r.cols, "add_row width mismatch");
        let rd = r.data.clone();
        for chunk in v.data.chunks_mut(rd.len().max(1)) {
            for (o, b) in chunk.iter_mut().zip(&rd) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(hyperball::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(hyperball::softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::MulConst(a, k))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clip(a, lo, hi))
    }

    /// Multiply matrix `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    /// `Σ wᵢ sᵢ` over scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Var {
        assert_eq!(terms.len(), weights.len());
        let total = terms.iter().zip(weights).map(|(&t, w)| w * self.scalar(t)).sum();
        self.push(Mat::scalar(total), Op::WeightedSum(terms.to_vec(), weights.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::hstack(&mats).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vstack(&mats).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a, start))
    }

    /// Row-wise exponential map; `c` is a scalar node holding the curvature.
    pub fn exp0(&mut self, x: Var, c: Var) -> Var {
        let cv = self.scalar(c);
        let src = self.value(x);
        let mut out = Mat::zeros(src.rows, src.cols);
        let cols = src.cols;
        par::for_each_row(&mut out.data, cols, |i, row| {
            hyperball::exp0_into(&src.data[i * cols..(i + 1) * cols], cv, row)
        });
        self.push(out, Op::Exp0(x, c))
    }

    pub fn log0(&mut self, x: Var, c: Var) -> Var {
        let cv = self.scalar(c);
        let src = self.value(x);
        let mut out = Mat::zeros(src.rows, src.cols);
        let cols = src.cols;
        par::for_each_row(&mut out.data, cols, |i, row| {
            hyperball::log0_into(&src.data[i * cols..(i + 1) * cols], cv, row)
        });
        self.push(out, Op::Log0(x, c))
    }

    /// `xᵢ ⊕_c b` for every row `xᵢ`, with `b` a `1×d` ball point.
    pub fn mobius_add_row(&mut self, x: Var, b: Var, c: Var) -> Var {
        let cv = self.scalar(c);
        let src = self.value(x);
        let bv = self.value(b).data.clone();
        let mut out = Mat::zeros(src.rows, src.cols);
        let cols = src.cols;
        assert_eq!(bv.len(), cols, "mobius_add_row width mismatch");
        par::for_each_row(&mut out.data, cols, |i, row| {
            hyperball::mobius_add_into(&src.data[i * cols..(i + 1) * cols], &bv, cv, row)
        });
        self.push(out, Op::MobiusAddRow(x, b, c))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let r = src.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat.data[i * cols + j] = h;
                out.data[i * cols + j] = h * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Mean absolute error between `pred` and the `(row, col, target)` entries.
    pub fn masked_mae(&mut self, pred: Var, entries: &Arc<Vec<(usize, usize, f64)>>) -> Var {
        let p = self.value(pred);
        assert!(!entries.is_empty(), "masked_mae over an empty mask");
        let total: f64 = entries.iter().map(|&(i, j, t)| (p.get(i, j) - t).abs()).sum();
        let v = Mat::scalar(total / entries.len() as f64);
        self.push(v, Op::MaskedMae(pred, Arc::clone(entries)))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].grad;
        let mut acc = |v: Var, m: Mat| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_nt(val(*b)));
                }
                if needs(*b) {
                    acc(*b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if needs(*a) {
                    acc(*a, g.matmul(val(*b)));
                }
                if needs(*b) {
                    acc(*b, g.matmul_tn(val(*a)));
                }
            }
            Op::Pick(a, i, j) => {
                let src = val(*a);
                let mut m = Mat::zeros(src.rows, src.cols);
                m.set(*i, *j, g.as_scalar());
                acc(*a, m);
            }
            Op::Spmm(s, x) => acc(*x, s.bwd.spmm(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (val(*a), val(*b));
                acc(*a, elementwise(g, mb, |x, y| x * y));
                acc(*b, elementwise(g, ma, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut r = Mat::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (o, v) in r.data.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*row, r);
            }
            Op::Relu(a) => {
                acc(*a, elementwise(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                acc(*a, elementwise(g, &node.value, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Exp(a) => acc(*a, elementwise(g, &node.value, |gv, e| gv * e)),
            Op::Softplus(a) => {
                acc(*a, elementwise(g, val(*a), |gv, x| gv * hyperball::sigmoid(x)));
            }
            Op::Recip(a) => acc(*a, elementwise(g, &node.value, |gv, r| -gv * r * r)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::MulConst(a, k) => acc(*a, g.map(|v| v * k)),
            Op::Clip(a, lo, hi) => {
                acc(
                    *a,
                    elementwise(g, val(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 }),
                );
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).as_scalar();
                acc(*a, g.map(|v| v * k));
                let ds: f64 = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                acc(*s, Mat::scalar(ds));
            }
            Op::Sum(a) => {
                let m = val(*a);
                acc(*a, Mat::filled(m.rows, m.cols, g.as_scalar()));
            }
            Op::WeightedSum(terms, weights) => {
                let gs = g.as_scalar();
                for (t, w) in terms.iter().zip(weights) {
                    acc(*t, Mat::scalar(gs * w));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols;
                    let mut m = Mat::zeros(g.rows, w);
                    for i in 0..g.rows {
                        m.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    off += w;
                    acc(*p, m);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = val(*p).rows;
                    acc(*p, g.slice_rows(off, off + r));
                    off += r;
                }
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut m = Mat::zeros(src.rows, src.cols);
                let off = start * src.cols;
                m.data[off..off + g.data.len()].copy_from_slice(&g.data);
                acc(*a, m);
            }
            Op::Exp0(x, c) => {
                let (gx, gc) = rowwise_vjp(val(*x), g, |xr, gr, out| {
                    hyperball::exp0_vjp(xr, val(*c).as_scalar(), gr, out)
                });
                acc(*x, gx);
                acc(*c, Mat::scalar(gc));
            }
            Op::Log0(x, c) => {
                let (gx, gc) = rowwise_vjp(val(*x), g, |xr, gr, out| {
                    hyperball::log0_vjp(xr, val(*c).as_scalar(), gr, out)
                });
                acc(*x, gx);
                acc(*c, Mat::scalar(gc));
            }
            Op::MobiusAddRow(x, b, c) => {
                let cv = val(*c).as_scalar();
                let bv = &val(*b).data;
                let src = val(*x);
                let cols = src.cols;
                let per_row: Vec<(Vec<f64>, Vec<f64>, f64)> = par::map_indices(src.rows, |i| {
                    let mut gx = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    let gc = hyperball::mobius_add_vjp(
                        src.row(i),
                        bv,
                        cv,
                        g.row(i),
                        &mut gx,
                        &mut gb,
                    );
                    (gx, gb, gc)
                });
                let mut gx = Mat::zeros(src.rows, cols);
                let mut gb = Mat::zeros(1, cols);
                let mut gc = 0.0;
                for (i, (rx, rb, rc)) in per_row.into_iter().enumerate() {
                    gx.row_mut(i).copy_from_slice(&rx);
                    for (o, v) in gb.data.iter_mut().zip(&rb) {
                        *o += v;
                    }
                    gc += rc;
                }
                acc(*x, gx);
                acc(*b, gb);
                acc(*c, Mat::scalar(gc));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let gm = &val(*gamma).data;
                let mut gx = Mat::zeros(rows, cols);
                let mut gg = Mat::zeros(1, cols);
                let mut gb = Mat::zeros(1, cols);
                let d = cols as f64;
                for i in 0..rows {
                    let gr = g.row(i);
                    let hr = xhat.row(i);
                    let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx.data[i * cols + j] = inv_std[i] / d * (d * dh[j] - s1 - hr[j] * s2);
                        gg.data[j] += gr[j] * hr[j];
                        gb.data[j] += gr[j];
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::MaskedMae(pred, entries) => {
                let p = val(*pred);
                let mut gp = Mat::zeros(p.rows, p.cols);
                let k = g.as_scalar() / entries.len() as f64;
                for &(i, j, t) in entries.iter() {
                    let r = p.get(i, j) - t;
                    let s = if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gp.data[i * p.cols + j] += k * s;
                }
                acc(*pred, gp);
            }
        }
    }
}

fn elementwise(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Apply a per-row VJP that also yields a curvature contribution; the
/// curvature terms are summed in row order.
fn rowwise_vjp<F>(x: &Mat, g: &Mat, f: F) -> (Mat, f64)
where
    F: Fn(&[f64], &[f64], &mut [f64]) -> f64 + Sync + Send,
{
    let cols = x.cols;
    let per_row: Vec<(Vec<f64>, f64)> = par::map_indices(x.rows, |i| {
        let mut out = vec![0.0; cols];
        let gc = f(x.row(i), g.row(i), &mut out);
        (out, gc)
    });
    let mut gx = Mat::zeros(x.rows, cols);
    let mut gc = 0.0;
    for (i, (row, c)) in per_row.into_iter().enumerate() {
        gx.row_mut(i).copy_from_slice(&row);
        gc += c;
    }
    (gx, gc)
}
