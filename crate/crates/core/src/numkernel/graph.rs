//! Recorded computation graph with reverse-mode differentiation.
//!
//! Operations are evaluated eagerly as they are recorded, so every node
//! carries its value from construction. The recorded node list can then
//! be replayed with different leaf values ([`Graph::evaluate`]) and
//! differentiated with respect to any scalar node ([`Graph::backward`]).
//! Nodes are appended in creation order, which is already a topological
//! order: no cycle can be expressed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive with a hand-written vector-Jacobian product, recorded
/// through [`Graph::custom`].
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, String>;

    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable, reported by [`Graph::gradient`].
    Param,
    /// Named data that can be rebound during evaluation.
    Input,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Arc<Vec<bool>>),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Custom(op, _) => op.name(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    name: Option<String>,
}

/// How the right operand of an elementwise op is broadcast over the left.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(a: &Tensor, b: &Tensor) -> std::result::Result<Bcast, String> {
    let (n, m) = (a.rows(), a.cols());
    let (bn, bm) = (b.rows(), b.cols());
    if a.len() == b.len() && n == bn && m == bm {
        Ok(Bcast::Same)
    } else if bn == 1 && bm == 1 {
        Ok(Bcast::Scalar)
    } else if bn == 1 && bm == m {
        Ok(Bcast::Row)
    } else if bm == 1 && bn == n {
        Ok(Bcast::Col)
    } else {
        Err(format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, j: usize, m: usize) -> usize {
    match kind {
        Bcast::Same => i * m + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> std::result::Result<Tensor, String> {
    let kind = bcast(a, b)?;
    let (n, m) = (a.rows(), a.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(f(ad[i * m + j], bd[bidx(kind, i, j, m)]));
        }
    }
    Tensor::new(a.shape().to_vec(), out).map_err(|e| e.to_string())
}

/// Sums `g` (shaped like the left operand) down to the right operand's shape.
fn reduce_to(kind: Bcast, g: &[f64], n: usize, m: usize, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; b.len()];
    for i in 0..n {
        for j in 0..m {
            out[bidx(kind, i, j, m)] += g[i * m + j];
        }
    }
    Tensor::new(b.shape().to_vec(), out).expect("reduction shape")
}

fn require_2d(t: &Tensor, what: &str) -> std::result::Result<(), String> {
    if t.ndim() != 2 {
        return Err(format!("{what} expects a 2-D tensor, got {:?}", t.shape()));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward_op(op: &Op, vals: &[Tensor]) -> std::result::Result<Tensor, String> {
    let v = |x: &Var| &vals[x.0];
    let t = match op {
        Op::Leaf(_) => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => binary(v(a), v(b), |x, y| x + y)?,
        Op::Sub(a, b) => binary(v(a), v(b), |x, y| x - y)?,
        Op::Mul(a, b) => binary(v(a), v(b), |x, y| x * y)?,
        Op::Div(a, b) => binary(v(a), v(b), |x, y| x / y)?,
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::AddScalar(a, s) => v(a).map(|x| x + s),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            require_2d(a, "matmul")?;
            require_2d(b, "matmul")?;
            if a.cols() != b.rows() {
                return Err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
            }
            a.matmul(b)
        }
        Op::Transpose(a) => {
            require_2d(v(a), "transpose")?;
            v(a).transpose()
        }
        Op::Reshape(a, shape) => v(a).reshaped(shape).map_err(|e| e.to_string())?,
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Gelu(a) => v(a).map(gelu),
        Op::Abs(a) => v(a).map(f64::abs),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::SumAll(a) => Tensor::scalar(v(a).sum()),
        Op::MeanAll(a) => Tensor::scalar(v(a).sum() / v(a).len() as f64),
        Op::SoftmaxRows(a) => {
            let a = v(a);
            require_2d(a, "softmax_rows")?;
            let m = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(m) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |p, &x| p.max(x));
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            Tensor::new(a.shape().to_vec(), out).map_err(|e| e.to_string())?
        }
        Op::LogSumExpRows(a, mask) => {
            let a = v(a);
            require_2d(a, "logsumexp_rows")?;
            if mask.len() != a.len() {
                return Err(format!("mask has {} entries for {:?}", mask.len(), a.shape()));
            }
            let m = a.cols();
            let mut out = Vec::with_capacity(a.rows());
            for (row, mrow) in a.data().chunks_exact(m).zip(mask.chunks_exact(m)) {
                let mx = row
                    .iter()
                    .zip(mrow)
                    .filter(|(_, &k)| k)
                    .fold(f64::NEG_INFINITY, |p, (&x, _)| p.max(x));
                if mx == f64::NEG_INFINITY {
                    return Err("row with no unmasked entries".into());
                }
                let s: f64 = row.iter().zip(mrow).filter(|(_, &k)| k).map(|(&x, _)| (x - mx).exp()).sum();
                out.push(mx + s.ln());
            }
            Tensor::col(out)
        }
        Op::LayerNormRows(a, eps) => {
            let a = v(a);
            require_2d(a, "layer_norm_rows")?;
            let m = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(m) {
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
            Tensor::new(a.shape().to_vec(), out).map_err(|e| e.to_string())?
        }
        Op::L2NormalizeRows(a) => {
            let a = v(a);
            require_2d(a, "l2_normalize_rows")?;
            let m = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(m) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
            Tensor::new(a.shape().to_vec(), out).map_err(|e| e.to_string())?
        }
        Op::SliceCols(a, s, e) => {
            let a = v(a);
            require_2d(a, "slice_cols")?;
            let m = a.cols();
            if s >= e || *e > m {
                return Err(format!("column slice {s}..{e} of {m}"));
            }
            let data = a.data().chunks_exact(m).flat_map(|r| r[*s..*e].iter().copied()).collect();
            Tensor::matrix(a.rows(), e - s, data)
        }
        Op::SliceRows(a, s, e) => {
            let a = v(a);
            require_2d(a, "slice_rows")?;
            let m = a.cols();
            if s >= e || *e > a.rows() {
                return Err(format!("row slice {s}..{e} of {}", a.rows()));
            }
            Tensor::matrix(e - s, m, a.data()[s * m..e * m].to_vec())
        }
        Op::ConcatCols(parts) => {
            let n = v(&parts[0]).rows();
            for p in parts {
                require_2d(v(p), "concat_cols")?;
                if v(p).rows() != n {
                    return Err(format!("concat_cols row mismatch {} vs {n}", v(p).rows()));
                }
            }
            let m: usize = parts.iter().map(|p| v(p).cols()).sum();
            let mut data = Vec::with_capacity(n * m);
            for i in 0..n {
                for p in parts {
                    let t = v(p);
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::matrix(n, m, data)
        }
        Op::ConcatRows(parts) => {
            let m = v(&parts[0]).cols();
            for p in parts {
                require_2d(v(p), "concat_rows")?;
                if v(p).cols() != m {
                    return Err(format!("concat_rows column mismatch {} vs {m}", v(p).cols()));
                }
            }
            let n: usize = parts.iter().map(|p| v(p).rows()).sum();
            let data = parts.iter().flat_map(|p| v(p).data().iter().copied()).collect();
            Tensor::matrix(n, m, data)
        }
        Op::Custom(op, inputs) => {
            let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
            op.forward(&ins)?
        }
    };
    Ok(t)
}

/// Vector-Jacobian product of one node; pushes `(input, grad)` pairs.
fn backward_op(op: &Op, vals: &[Tensor], out: &Tensor, g: &Tensor, acc: &mut Vec<(Var, Tensor)>) {
    let v = |x: &Var| &vals[x.0];
    match op {
        Op::Leaf(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let kind = bcast(ta, tb).expect("validated in forward");
            acc.push((*a, g.clone()));
            let mut gb = reduce_to(kind, g.data(), ta.rows(), ta.cols(), tb);
            if matches!(op, Op::Sub(..)) {
                gb = gb.map(|x| -x);
            }
            acc.push((*b, gb));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let kind = bcast(ta, tb).expect("validated in forward");
            let (n, m) = (ta.rows(), ta.cols());
            let mut ga = vec![0.0; n * m];
            let mut gab = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let k = i * m + j;
                    ga[k] = g.data()[k] * tb.data()[bidx(kind, i, j, m)];
                    gab[k] = g.data()[k] * ta.data()[k];
                }
            }
            acc.push((*a, Tensor::new(ta.shape().to_vec(), ga).unwrap()));
            acc.push((*b, reduce_to(kind, &gab, n, m, tb)));
        }
        Op::Div(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let kind = bcast(ta, tb).expect("validated in forward");
            let (n, m) = (ta.rows(), ta.cols());
            let mut ga = vec![0.0; n * m];
            let mut gab = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let k = i * m + j;
                    let d = tb.data()[bidx(kind, i, j, m)];
                    ga[k] = g.data()[k] / d;
                    gab[k] = -g.data()[k] * ta.data()[k] / (d * d);
                }
            }
            acc.push((*a, Tensor::new(ta.shape().to_vec(), ga).unwrap()));
            acc.push((*b, reduce_to(kind, &gab, n, m, tb)));
        }
        Op::Neg(a) => acc.push((*a, g.map(|x| -x))),
        Op::Scale(a, s) => acc.push((*a, g.map(|x| x * s))),
        Op::AddScalar(a, _) => acc.push((*a, g.clone())),
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
            let ga = matmul_nt(g.data(), tb.data(), n, m, k);
            let gb = matmul_tn(ta.data(), g.data(), n, k, m);
            acc.push((*a, Tensor::matrix(n, k, ga)));
            acc.push((*b, Tensor::matrix(k, m, gb)));
        }
        Op::Transpose(a) => acc.push((*a, g.transpose())),
        Op::Reshape(a, _) => acc.push((*a, g.reshaped(v(a).shape()).unwrap())),
        Op::Exp(a) => acc.push((*a, g.zip_map(out, |gi, y| gi * y))),
        Op::Log(a) => acc.push((*a, g.zip_map(v(a), |gi, x| gi / x))),
        Op::Tanh(a) => acc.push((*a, g.zip_map(out, |gi, y| gi * (1.0 - y * y)))),
        Op::Sigmoid(a) => acc.push((*a, g.zip_map(out, |gi, y| gi * y * (1.0 - y)))),
        Op::Gelu(a) => acc.push((*a, g.zip_map(v(a), |gi, x| gi * gelu_grad(x)))),
        Op::Abs(a) => acc.push((*a, g.zip_map(v(a), |gi, x| if x > 0.0 { gi } else if x < 0.0 { -gi } else { 0.0 }))),
        Op::Square(a) => acc.push((*a, g.zip_map(v(a), |gi, x| 2.0 * gi * x))),
        Op::Sqrt(a) => acc.push((*a, g.zip_map(out, |gi, y| gi * 0.5 / y))),
        Op::SumAll(a) => acc.push((*a, Tensor::full(v(a).shape(), g.item()))),
        Op::MeanAll(a) => {
            let n = v(a).len() as f64;
            acc.push((*a, Tensor::full(v(a).shape(), g.item() / n)));
        }
        Op::SoftmaxRows(a) => {
            let m = out.cols();
            let mut gx = vec![0.0; out.len()];
            for ((yr, gr), xr) in out.data().chunks_exact(m).zip(g.data().chunks_exact(m)).zip(gx.chunks_exact_mut(m)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((x, &y), &gi) in xr.iter_mut().zip(yr).zip(gr) {
                    *x = y * (gi - dot);
                }
            }
            acc.push((*a, Tensor::new(out.shape().to_vec(), gx).unwrap()));
        }
        Op::LogSumExpRows(a, mask) => {
            let ta = v(a);
            let m = ta.cols();
            let mut gx = vec![0.0; ta.len()];
            for i in 0..ta.rows() {
                let lse = out.data()[i];
                for j in 0..m {
                    let k = i * m + j;
                    if mask[k] {
                        gx[k] = g.data()[i] * (ta.data()[k] - lse).exp();
                    }
                }
            }
            acc.push((*a, Tensor::new(ta.shape().to_vec(), gx).unwrap()));
        }
        Op::LayerNormRows(a, eps) => {
            let ta = v(a);
            let m = ta.cols();
            let mut gx = vec![0.0; ta.len()];
            for i in 0..ta.rows() {
                let xr = &ta.data()[i * m..(i + 1) * m];
                let mean = xr.iter().sum::<f64>() / m as f64;
                let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let yr = &out.data()[i * m..(i + 1) * m];
                let gr = &g.data()[i * m..(i + 1) * m];
                let gmean = gr.iter().sum::<f64>() / m as f64;
                let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / m as f64;
                for j in 0..m {
                    gx[i * m + j] = inv * (gr[j] - gmean - yr[j] * gy);
                }
            }
            acc.push((*a, Tensor::new(ta.shape().to_vec(), gx).unwrap()));
        }
        Op::L2NormalizeRows(a) => {
            let ta = v(a);
            let m = ta.cols();
            let mut gx = vec![0.0; ta.len()];
            for i in 0..ta.rows() {
                let xr = &ta.data()[i * m..(i + 1) * m];
                let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let yr = &out.data()[i * m..(i + 1) * m];
                let gr = &g.data()[i * m..(i + 1) * m];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..m {
                    gx[i * m + j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            acc.push((*a, Tensor::new(ta.shape().to_vec(), gx).unwrap()));
        }
        Op::SliceCols(a, s, e) => {
            let ta = v(a);
            let m = ta.cols();
            let w = e - s;
            let mut gx = vec![0.0; ta.len()];
            for i in 0..ta.rows() {
                gx[i * m + s..i * m + e].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            acc.push((*a, Tensor::new(ta.shape().to_vec(), gx).unwrap()));
        }
        Op::SliceRows(a, s, e) => {
            let ta = v(a);
            let m = ta.cols();
            let mut gx = vec![0.0; ta.len()];
            gx[s * m..e * m].copy_from_slice(g.data());
            acc.push((*a, Tensor::new(ta.shape().to_vec(), gx).unwrap()));
        }
        Op::ConcatCols(parts) => {
            let n = out.rows();
            let m = out.cols();
            let mut off = 0;
            for p in parts {
                let c = v(p).cols();
                let mut gp = Vec::with_capacity(n * c);
                for i in 0..n {
                    gp.extend_from_slice(&g.data()[i * m + off..i * m + off + c]);
                }
                acc.push((*p, Tensor::matrix(n, c, gp)));
                off += c;
            }
        }
        Op::ConcatRows(parts) => {
            let m = out.cols();
            let mut off = 0;
            for p in parts {
                let r = v(p).rows();
                acc.push((*p, Tensor::matrix(r, m, g.data()[off * m..(off + r) * m].to_vec())));
                off += r;
            }
        }
        Op::Custom(op, inputs) => {
            let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
            let grads = op.backward(&ins, out, g);
            debug_assert_eq!(grads.len(), inputs.len());
            acc.extend(inputs.iter().copied().zip(grads));
        }
    }
}

/// Values of every node after a (re)evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    names: BTreeMap<String, Var>,
}

impl Evaluation {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).map(|v| &self.values[v.0])
    }

    /// Every named node's value.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().map(|(k, v)| (k.clone(), self.values[v.0].clone())).collect()
    }
}

/// Adjoints of every node that the seeded outputs depend on.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    names: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, kind: LeafKind, name: Option<String>, value: Tensor) -> Var {
        let var = Var(self.nodes.len());
        if let Some(n) = &name {
            assert!(!self.names.contains_key(n), "duplicate node name {n}");
            self.names.insert(n.clone(), var);
        }
        self.nodes.push(Node { op: Op::Leaf(kind), name });
        self.values.push(value);
        var
    }

    /// Trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.leaf(LeafKind::Param, Some(name.into()), value)
    }

    /// Named non-trainable leaf that [`Graph::evaluate`] may rebind.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.leaf(LeafKind::Input, Some(name.into()), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Constant, None, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op) -> Var {
        let id = self.nodes.len();
        let value = forward_op(&op, &self.values).unwrap_or_else(|e| panic!("node {id} ({}): {e}", op.name()));
        self.nodes.push(Node { op, name: None });
        self.values.push(value);
        Var(id)
    }

    /// Attaches a name to a node so evaluation results can refer to it.
    pub fn set_name(&mut self, v: Var, name: impl Into<String>) {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate node name {name}");
        self.nodes[v.0].name = Some(name.clone());
        self.names.insert(name, v);
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.nodes[v.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    /// Trainable leaves in creation order.
    pub fn params(&self) -> Vec<(String, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf(LeafKind::Param)))
            .map(|(i, n)| (n.name.clone().expect("params are named"), Var(i)))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::AddScalar(a, s))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.push(Op::Gelu(a))
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a))
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }
    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::MeanAll(a))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::SoftmaxRows(a))
    }
    /// Row-wise log-sum-exp over entries where `mask` is true; `n x 1` output.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Var {
        self.push(Op::LogSumExpRows(a, Arc::new(mask)))
    }
    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        self.push(Op::LayerNormRows(a, eps))
    }
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        self.push(Op::L2NormalizeRows(a))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.push(Op::SliceRows(a, start, end))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Var {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    /// `x W + b` with a row-broadcast bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Replays the recorded graph with some leaves rebound by name.
    ///
    /// Unbound leaves keep their recorded values. Replaying with no
    /// overrides reproduces the recorded values bit for bit.
    pub fn evaluate(&self, inputs: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        for name in inputs.keys() {
            match self.names.get(name) {
                Some(v) if matches!(self.nodes[v.0].op, Op::Leaf(LeafKind::Param | LeafKind::Input)) => {}
                _ => return Err(invalid!("no rebindable leaf named {name}")),
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf(_) => match node.name.as_ref().and_then(|n| inputs.get(n)) {
                    Some(t) => t.clone(),
                    None => self.values[id].clone(),
                },
                op => forward_op(op, &values).map_err(|detail| Error::Node {
                    node: id,
                    op: op.name().to_string(),
                    detail,
                })?,
            };
            values.push(value);
        }
        Ok(Evaluation { values, names: self.names.clone() })
    }

    /// Reverse sweep from several seeded nodes over the given node values.
    pub fn backward_seeded(&self, values: &[Tensor], seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, s) in seeds {
            if s.len() != values[v.0].len() {
                return Err(Error::Shape(format!("seed for node {} has wrong size", v.0)));
            }
            match &mut adj[v.0] {
                Some(a) => a.add_assign(s),
                slot => *slot = Some(s.reshaped(values[v.0].shape())?),
            }
        }
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        let mut acc = Vec::new();
        for id in (0..=last).rev() {
            let Some(g) = adj[id].take() else { continue };
            acc.clear();
            backward_op(&self.nodes[id].op, values, &values[id], &g, &mut acc);
            adj[id] = Some(g);
            for (input, gi) in acc.drain(..) {
                match &mut adj[input.0] {
                    Some(a) => a.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Gradients of a scalar node with respect to every node, at the recorded values.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.values[output.0].is_scalar() {
            return Err(invalid!("gradient requires a scalar output, node {} is {:?}", output.0, self.values[output.0].shape()));
        }
        self.backward_seeded(&self.values, &[(output, Tensor::scalar(1.0))])
    }

    fn param_grads(&self, grads: &Gradients, values: &[Tensor]) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|(name, v)| {
                let g = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(values[v.0].shape()));
                (name, g)
            })
            .collect()
    }

    /// `d output / d leaf` for every trainable leaf, zeros where unrelated.
    pub fn gradient(&self, output: &str) -> Result<BTreeMap<String, Tensor>> {
        let out = self.var(output).ok_or_else(|| invalid!("no node named {output}"))?;
        let grads = self.backward(out)?;
        Ok(self.param_grads(&grads, &self.values))
    }

    /// Value and trainable-leaf gradients of `output` after rebinding `point`.
    pub fn gradient_at(&self, output: Var, point: &BTreeMap<String, Tensor>) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let ev = self.evaluate(point)?;
        let y = ev.get(output);
        if !y.is_scalar() {
            return Err(invalid!("gradient requires a scalar output, node {} is {:?}", output.0, y.shape()));
        }
        let value = y.item();
        let grads = self.backward_seeded(&ev.values, &[(output, Tensor::scalar(1.0))])?;
        Ok((value, self.param_grads(&grads, &ev.values)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::row(vec![1.0, 2.0]));
        let y = g.add(x, x);
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let x = g.input("x", Tensor::col(vec![1.0, 2.0, 3.0]));
        let y = g.matmul(i, x);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn power_rule_and_sum() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.square(x);
        g.set_name(y, "y");
        assert_eq!(g.gradient("y").unwrap()["x"].item(), 6.0);

        let mut g = Graph::new();
        let x = g.param("x", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.set_name(s, "s");
        assert_eq!(g.gradient("s").unwrap()["x"], Tensor::ones(&[2, 2]));
    }

    #[test]
    fn unrelated_leaf_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0));
        let _z = g.param("z", Tensor::row(vec![1.0, 1.0]));
        let y = g.exp(x);
        g.set_name(y, "y");
        let grads = g.gradient("y").unwrap();
        assert_eq!(grads["z"], Tensor::zeros(&[1, 2]));
        assert!((grads["x"].item() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::row(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        g.set_name(y, "y");
        assert!(g.gradient("y").is_err());
    }

    #[test]
    fn evaluate_reports_offending_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::matrix(2, 2, vec![1.0; 4]));
        let b = g.input("b", Tensor::matrix(2, 2, vec![1.0; 4]));
        let c = g.matmul(a, b);
        let _ = g.sum(c);
        let mut bind = BTreeMap::new();
        bind.insert("b".to_string(), Tensor::matrix(3, 2, vec![1.0; 6]));
        match g.evaluate(&bind) {
            Err(Error::Node { node, op, .. }) => {
                assert_eq!(node, c.index());
                assert_eq!(op, "matmul");
            }
            other => panic!("expected node error, got {other:?}"),
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]));
        let s = g.softmax_rows(x);
        let l = g.layer_norm_rows(s, 1e-6);
        let t = g.tanh(l);
        let ev = g.evaluate(&BTreeMap::new()).unwrap();
        assert_eq!(ev.get(t), g.value(t));
    }

    #[test]
    fn broadcast_forms() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let r = g.param("r", Tensor::row(vec![10.0, 20.0]));
        let c = g.param("c", Tensor::col(vec![2.0, 3.0]));
        let ar = g.add(a, r);
        assert_eq!(g.value(ar).data(), &[11.0, 22.0, 13.0, 24.0]);
        let ac = g.mul(ar, c);
        assert_eq!(g.value(ac).data(), &[22.0, 44.0, 39.0, 72.0]);
        let s = g.sum(ac);
        g.set_name(s, "s");
        let grads = g.gradient("s").unwrap();
        assert_eq!(grads["r"].data(), &[5.0, 5.0]);
        assert_eq!(grads["c"].data(), &[33.0, 37.0]);
    }
}
