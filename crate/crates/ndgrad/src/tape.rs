//! Append-only computation tape and the reverse sweep over it.
//!
//! Every primitive records its parents and enough of its inputs to produce
//! local partials. Nodes are pushed in evaluation order, so the tape is
//! always topologically sorted and `backward` is a single reverse pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Relu,
    Exp,
    Log,
    LogAbs,
    Softplus,
    Square,
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Huber(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    SegmentMean(Var, Vec<(usize, usize)>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Tapes are cheap to build and meant to be discarded after a single
/// `backward`; parameters live outside the tape and are re-registered as
/// leaves on every step.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: one accumulated gradient per node that
/// received any.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(&[r, c])
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn shape_of(t: &Tensor) -> Vec<usize> {
    vec![t.rows(), t.cols()]
}

/// Index of the right operand element paired with `(i, j)` of the left one.
#[inline]
fn bcast(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    let bi = if rows == 1 { 0 } else { i };
    let bj = if cols == 1 { 0 } else { j };
    bi * cols + bj
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        assert_eq!(
            ac,
            br,
            "matmul: {:?} x {:?}",
            shape_of(self.value(a)),
            shape_of(self.value(b))
        );
        let mut out = vec![0.0; ar * bc];
        gemm(
            self.value(a).data(),
            ar,
            ac,
            false,
            self.value(b).data(),
            br,
            bc,
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_raw(ar, bc, out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_raw(c, r, out), Op::Transpose(a), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        assert!(
            (br == ar || br == 1) && (bc == ac || bc == 1),
            "{kind:?}: cannot broadcast {:?} onto {:?}",
            (br, bc),
            (ar, ac)
        );
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(ar * ac);
        for i in 0..ar {
            for j in 0..ac {
                let x = av[i * ac + j];
                let y = bv[bcast(i, j, br, bc)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Min => x.min(y),
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_raw(ar, ac, out), Op::Binary(kind, a, b), rg)
    }

    /// Elementwise `a + b`; `b` may be `a`-shaped, a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::LogAbs => |x| x.abs().ln(),
            Unary::Softplus => softplus,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    /// `log |a|`.
    pub fn ln_abs(&mut self, a: Var) -> Var {
        self.unary(Unary::LogAbs, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Elementwise Huber penalty (not reduced).
    pub fn huber(&mut self, a: Var, kappa: f64) -> Var {
        assert!(kappa > 0.0, "huber kappa must be positive");
        let value = self.value(a).map(|u| {
            if u.abs() <= kappa {
                0.5 * u * u
            } else {
                kappa * (u.abs() - 0.5 * kappa)
            }
        });
        let rg = self.rg(a);
        self.push(value, Op::Huber(a, kappa), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Sum of all elements as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let out = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_raw(r, 1, out), Op::SumCols(a), rg)
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(a);
        self.push(Tensor::from_raw(1, c, out), Op::MeanRows(a), rg)
    }

    /// Mean over each half-open row range: `[m, n] -> [segments, n]`.
    pub fn segment_mean(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut out = vec![0.0; segments.len() * c];
        for (k, &(s, e)) in segments.iter().enumerate() {
            assert!(s < e && e <= r, "segment {s}..{e} outside {r} rows");
            let row = &mut out[k * c..(k + 1) * c];
            for i in s..e {
                for (o, v) in row.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            let inv = 1.0 / (e - s) as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::from_raw(segments.len(), c, out),
            Op::SegmentMean(a, segments.to_vec()),
            rg,
        )
    }

    /// Select rows by index (with repetition): `[m, n] -> [idx.len(), n]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {i} outside {r} rows");
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::from_raw(idx.len(), c, out),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            assert_eq!(self.value(p).rows(), rows, "concat_cols: row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_raw(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        assert!(start < end && end <= c, "slice {start}..{end} of {c} columns");
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_raw(r, w, out), Op::SliceCols(a, start, end), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| dims(&nd.value)).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ar, ac) = dims(av);
                let (br, bc) = dims(bv);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    accumulate_with(grads, *a, ar, ac, |buf, beta| {
                        gemm(gd, ar, bc, false, bv.data(), br, bc, true, buf, beta)
                    });
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    accumulate_with(grads, *b, br, bc, |buf, beta| {
                        gemm(av.data(), ar, ac, true, gd, ar, bc, false, buf, beta)
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(g);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(c, r, out));
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a).data();
                let bt = self.value(*b);
                let (br, bc) = dims(bt);
                let bv = bt.data();
                let (r, c) = dims(g);
                let need_a = self.rg(*a);
                let need_b = self.rg(*b);
                let mut ga = if need_a { vec![0.0; r * c] } else { Vec::new() };
                let mut gb = if need_b { vec![0.0; br * bc] } else { Vec::new() };
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        let bk = bcast(i, j, br, bc);
                        let (da, db) = match kind {
                            Binary::Add => (1.0, 1.0),
                            Binary::Sub => (1.0, -1.0),
                            Binary::Mul => (bv[bk], av[k]),
                            Binary::Min => {
                                if av[k] <= bv[bk] {
                                    (1.0, 0.0)
                                } else {
                                    (0.0, 1.0)
                                }
                            }
                        };
                        if need_a {
                            ga[k] = gd[k] * da;
                        }
                        if need_b {
                            gb[bk] += gd[k] * db;
                        }
                    }
                }
                if need_a {
                    accumulate(grads, *a, Tensor::from_raw(r, c, ga));
                }
                if need_b {
                    accumulate(grads, *b, Tensor::from_raw(br, bc, gb));
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let out = gd
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| {
                        gk * match kind {
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => y[k],
                            Unary::Log | Unary::LogAbs => 1.0 / x[k],
                            Unary::Softplus => sigmoid(x[k]),
                            Unary::Square => 2.0 * x[k],
                            Unary::Abs => x[k].signum(),
                        }
                    })
                    .collect();
                let (r, c) = dims(g);
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Huber(a, kappa) => {
                let x = self.value(*a).data();
                let out = gd
                    .iter()
                    .zip(x)
                    .map(|(&gk, &u)| gk * u.clamp(-kappa, *kappa))
                    .collect();
                let (r, c) = dims(g);
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let out = gd
                    .iter()
                    .zip(x)
                    .map(|(&gk, &v)| if v < *lo || v > *hi { 0.0 } else { gk })
                    .collect();
                let (r, c) = dims(g);
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::Sum(a) => {
                let (r, c) = dims(self.value(*a));
                accumulate(grads, *a, Tensor::full(&[r, c], gd[0]));
            }
            Op::SumCols(a) => {
                let (r, c) = dims(self.value(*a));
                let mut out = Vec::with_capacity(r * c);
                for &gi in gd.iter().take(r) {
                    out.extend(std::iter::repeat_n(gi, c));
                }
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::MeanRows(a) => {
                let (r, c) = dims(self.value(*a));
                let inv = 1.0 / r as f64;
                let row: Vec<f64> = gd.iter().map(|v| v * inv).collect();
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend_from_slice(&row);
                }
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::SegmentMean(a, segments) => {
                let (r, c) = dims(self.value(*a));
                let mut out = vec![0.0; r * c];
                for (k, &(s, e)) in segments.iter().enumerate() {
                    let inv = 1.0 / (e - s) as f64;
                    for i in s..e {
                        for j in 0..c {
                            out[i * c + j] += gd[k * c + j] * inv;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = dims(self.value(*a));
                let mut out = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += gd[k * c + j];
                    }
                }
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims(g);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(r * w);
                        for i in 0..r {
                            out.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, Tensor::from_raw(r, w, out));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = dims(self.value(*a));
                let w = end - start;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, Tensor::from_raw(r, c, out));
            }
        }
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.len() / t.rows());
        Tensor::from_raw(r, c, t.into_data())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with(
    grads: &mut [Option<Tensor>],
    v: Var,
    rows: usize,
    cols: usize,
    f: impl FnOnce(&mut [f64], f64),
) {
    match &mut grads[v.0] {
        Some(existing) => f(existing.data_mut(), 1.0),
        slot @ None => {
            let mut buf = vec![0.0; rows * cols];
            f(&mut buf, 0.0);
            *slot = Some(Tensor::from_raw(rows, cols, buf));
        }
    }
}
