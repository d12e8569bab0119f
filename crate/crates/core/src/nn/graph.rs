//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and appends a
//! node holding its value and the indices of its inputs. Nodes are only ever
//! appended, so reverse insertion order is a valid topological order for
//! the backward sweep.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Reshape(Var),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Some parameter lies upstream.
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            left: (a.rows(), a.cols()),
            right: (b.rows(), b.cols()),
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let t = |v: &Var| self.nodes[v.0].tracked;
        let tracked = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => t(a) || t(b),
            Op::ConcatCols(parts) => parts.iter().any(t),
            Op::Unary(_, a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::SegmentSum(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::SumRows(a) => t(a),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// A constant input; receives no gradient outside the graph.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: (ta.rows(), ta.cols()),
                right: (tb.rows(), tb.cols()),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta, false, tb, false, out.data_mut(), false);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x * w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(name, ta, tb)?;
        let mut out = Vec::with_capacity(rows * cols);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Min => x.min(y),
            Binary::Max => x.max(y),
        };
        if ta.shape() == tb.shape() {
            out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        } else {
            for r in 0..rows {
                let ra = if ta.rows() == 1 { 0 } else { r };
                let rb = if tb.rows() == 1 { 0 } else { r };
                for c in 0..cols {
                    let ca = if ta.cols() == 1 { 0 } else { c };
                    let cb = if tb.cols() == 1 { 0 } else { c };
                    out.push(f(ta.get(ra, ca), tb.get(rb, cb)));
                }
            }
        }
        let t = Tensor::new(rows, cols, out)?;
        Ok(self.push(t, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    /// Elementwise minimum; the gradient follows the selected branch.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, "minimum", a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, "maximum", a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: f64| match kind {
            Unary::Tanh => fast_tanh(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::Scale(s) => s * x,
            Unary::AddScalar(s) => x + s,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        let t = self.value(a).map(f);
        self.push(t, Op::Unary(kind, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(s), a)
    }

    /// Clamp to `[lo, hi]`; zero gradient where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: (t.rows(), t.cols()),
                right: (start, end),
            });
        }
        let width = end - start;
        let mut out = Vec::with_capacity(t.rows() * width);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let t = Tensor::new(t.rows(), width, out)?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: (t.rows(), t.cols()),
                });
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::new(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of {} rows",
                t.rows()
            )));
        }
        let mut out = Vec::with_capacity(index.len() * t.cols());
        for &i in index.iter() {
            out.extend_from_slice(t.row_slice(i));
        }
        let t = Tensor::new(index.len(), t.cols(), out)?;
        Ok(self.push(t, Op::GatherRows(a, index)))
    }

    /// Sums rows of `a` into `segments` output rows; row `i` goes to `segment[i]`.
    pub fn segment_sum(&mut self, a: Var, segment: Rc<[usize]>, segments: usize) -> Result<Var> {
        let t = self.value(a);
        if segment.len() != t.rows() || segment.iter().any(|&s| s >= segments) {
            return Err(Error::Contract("segment_sum ids do not match input rows".into()));
        }
        let mut out = Tensor::zeros(segments, t.cols());
        let cols = t.cols();
        for (i, &s) in segment.iter().enumerate() {
            let src = t.row_slice(i);
            let dst = &mut out.data_mut()[s * cols..(s + 1) * cols];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum(a, segment)))
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, a: Var, segment: Rc<[usize]>, segments: usize) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 || segment.len() != t.rows() || segment.iter().any(|&s| s >= segments) {
            return Err(Error::Contract("segment_softmax expects an [n, 1] input with matching ids".into()));
        }
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (i, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(t.data()[i]);
        }
        let mut e: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(i, &s)| (t.data()[i] - max[s]).exp())
            .collect();
        let mut sum = vec![0.0; segments];
        for (i, &s) in segment.iter().enumerate() {
            sum[s] += e[i];
        }
        for (i, &s) in segment.iter().enumerate() {
            e[i] /= sum[s];
        }
        let t = Tensor::new(e.len(), 1, e)?;
        Ok(self.push(t, Op::SegmentSoftmax(a, segment)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            out.extend(crate::math::softmax(t.row_slice(r)));
        }
        let t = Tensor::new(t.rows(), t.cols(), out).expect("shape preserved");
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let lse = crate::math::log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(t.rows(), t.cols(), out).expect("shape preserved");
        self.push(t, Op::LogSoftmaxRows(a))
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: (t.rows(), t.cols()),
                right: (rows, cols),
            });
        }
        let t = t.clone().reshaped(rows, cols);
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `[n, c] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let t = Tensor::new(out.len(), 1, out).expect("column");
        self.push(t, Op::SumCols(a))
    }

    /// Sum across rows: `[n, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let t = Tensor::new(1, out.len(), out).expect("row");
        self.push(t, Op::SumRows(a))
    }

    /// `mu + std * eps` with `eps ~ N(0, I)`. Returns the sample and the noise.
    pub fn reparam_sample<R: Rng + ?Sized>(
        &mut self,
        mu: Var,
        std: Var,
        rng: &mut R,
    ) -> Result<(Var, Tensor)> {
        let (rows, cols) = self.shape(mu);
        let eps: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(rows, cols, eps)?;
        let z = self.reparam_with_noise(mu, std, eps.clone())?;
        Ok((z, eps))
    }

    /// Reparameterized sample with caller-supplied noise.
    pub fn reparam_with_noise(&mut self, mu: Var, std: Var, eps: Tensor) -> Result<Var> {
        if self.value(std).data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract("reparameterization needs positive std".into()));
        }
        if self.shape(mu) != (eps.rows(), eps.cols()) {
            return Err(Error::Shape {
                op: "reparam",
                left: self.shape(mu),
                right: (eps.rows(), eps.cols()),
            });
        }
        let eps = self.constant(eps);
        let noise = self.mul(std, eps)?;
        self.add(mu, noise)
    }

    /// Accumulates d(loss)/d(param) into `store` for every parameter node,
    /// then clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.sweep(loss, true)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.accumulate_grad(*id, &g);
            }
        }
        self.clear();
        Ok(())
    }

    /// Gradients of a scalar with respect to every node (None when unreachable).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        self.sweep(loss, false)
    }

    /// Reverse sweep; with `params_only`, branches that cannot reach a
    /// parameter are skipped.
    fn sweep(&self, loss: Var, params_only: bool) -> Result<Vec<Option<Tensor>>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lt.rows(),
                lt.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if params_only && !self.nodes[i].tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, params_only);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], params_only: bool) {
        let wanted = |v: &Var| !params_only || self.nodes[v.0].tracked;
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wanted(a) {
                    let ga = slot(grads, *a, ta.rows(), ta.cols());
                    gemm(g, false, tb, true, ga.data_mut(), true);
                }
                if wanted(b) {
                    let gb = slot(grads, *b, tb.rows(), tb.cols());
                    gemm(ta, true, g, false, gb.data_mut(), true);
                }
            }
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, g, grads),
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, x.rows(), x.cols());
                let gd = ga.data_mut();
                for k in 0..x.len() {
                    let xv = x.data()[k];
                    let yv = out.data()[k];
                    let d = match kind {
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Exp => yv,
                        Unary::Log => 1.0 / xv,
                        Unary::Sqrt => 0.5 / yv,
                        Unary::Square => 2.0 * xv,
                        Unary::Neg => -1.0,
                        Unary::Scale(s) => *s,
                        Unary::AddScalar(_) => 1.0,
                        Unary::Clamp(lo, hi) => {
                            if xv < *lo || xv > *hi {
                                0.0
                            } else {
                                1.0
                            }
                        }
                    };
                    gd[k] += g.data()[k] * d;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let cols = x.cols();
                let width = g.cols();
                let ga = slot(grads, *a, x.rows(), cols);
                for r in 0..g.rows() {
                    let dst = &mut ga.data_mut()[r * cols + start..r * cols + start + width];
                    for (d, v) in dst.iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let (rows, cols) = (x.rows(), x.cols());
                    let gp = slot(grads, p, rows, cols);
                    for r in 0..rows {
                        let src = &g.row_slice(r)[offset..offset + cols];
                        for (d, v) in gp.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                    offset += cols;
                }
            }
            Op::GatherRows(a, index) => {
                let x = self.value(*a);
                let cols = x.cols();
                let ga = slot(grads, *a, x.rows(), cols);
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut ga.data_mut()[src * cols..(src + 1) * cols];
                    for (d, v) in dst.iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
            }
            Op::SegmentSum(a, segment) => {
                let x = self.value(*a);
                let cols = x.cols();
                let ga = slot(grads, *a, x.rows(), cols);
                for (r, &s) in segment.iter().enumerate() {
                    let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                    for (d, v) in dst.iter_mut().zip(g.row_slice(s)) {
                        *d += v;
                    }
                }
            }
            Op::SegmentSoftmax(a, segment) => {
                let nseg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for (r, &s) in segment.iter().enumerate() {
                    dot[s] += g.data()[r] * out.data()[r];
                }
                let ga = slot(grads, *a, out.rows(), 1);
                for (r, &s) in segment.iter().enumerate() {
                    ga.data_mut()[r] += out.data()[r] * (g.data()[r] - dot[s]);
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let ga = slot(grads, *a, out.rows(), cols);
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] += y[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = out.cols();
                let ga = slot(grads, *a, out.rows(), cols);
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] += gr[c] - y[c].exp() * gsum;
                    }
                }
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, x.rows(), x.cols());
                for (d, v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let gv = g.item();
                let ga = slot(grads, *a, x.rows(), x.cols());
                for d in ga.data_mut() {
                    *d += gv;
                }
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let ga = slot(grads, *a, x.rows(), cols);
                for r in 0..x.rows() {
                    let gv = g.data()[r];
                    for d in &mut ga.data_mut()[r * cols..(r + 1) * cols] {
                        *d += gv;
                    }
                }
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let ga = slot(grads, *a, x.rows(), cols);
                for r in 0..x.rows() {
                    for (d, v) in ga.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
        }
    }

    fn backprop_binary(&self, kind: Binary, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let ta = self.value(a);
        let tb = self.value(b);
        let partials = |x: f64, y: f64| match kind {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (y, x),
            Binary::Div => (1.0 / y, -x / (y * y)),
            Binary::Min => {
                if x <= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Binary::Max => {
                if x >= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        };
        if ta.shape() == tb.shape() && a != b {
            let mut da = slot(grads, a, ta.rows(), ta.cols()).clone();
            {
                let db = slot(grads, b, tb.rows(), tb.cols());
                let (xs, ys, gs) = (ta.data(), tb.data(), g.data());
                for k in 0..gs.len() {
                    let (pa, pb) = partials(xs[k], ys[k]);
                    da.data_mut()[k] += gs[k] * pa;
                    db.data_mut()[k] += gs[k] * pb;
                }
            }
            grads[a.0] = Some(da);
            return;
        }
        let (rows, cols) = (g.rows(), g.cols());
        let mut da = Tensor::zeros(ta.rows(), ta.cols());
        let mut db = Tensor::zeros(tb.rows(), tb.cols());
        for r in 0..rows {
            let ra = if ta.rows() == 1 { 0 } else { r };
            let rb = if tb.rows() == 1 { 0 } else { r };
            for c in 0..cols {
                let ca = if ta.cols() == 1 { 0 } else { c };
                let cb = if tb.cols() == 1 { 0 } else { c };
                let (pa, pb) = partials(ta.get(ra, ca), tb.get(rb, cb));
                let gv = g.get(r, c);
                da.data_mut()[ra * ta.cols() + ca] += gv * pa;
                db.data_mut()[rb * tb.cols() + cb] += gv * pb;
            }
        }
        add_into(slot(grads, a, ta.rows(), ta.cols()), &da);
        add_into(slot(grads, b, tb.rows(), tb.cols()), &db);
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// `tanh` through a single `exp`; a few ulps from libm's and much cheaper.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    if x.abs() < 1e-4 {
        let x2 = x * x;
        return x * (1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0);
    }
    let e = (-2.0 * x.abs()).exp();
    x.signum() * (1.0 - e) / (1.0 + e)
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}
