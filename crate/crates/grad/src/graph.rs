//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradients of every trainable parameter that contributed to the output.

use crate::matrix::gemm_into;
use crate::{Matrix, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    LayerNorm { a: Var, rstd: Vec<f64> },
    Softmax(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { a: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    DepthwiseConv { x: Var, w: Var, b: Var, height: usize, width: usize, kernel: usize },
    RowMix { a: Var, taps: Vec<Vec<(usize, f64)>> },
    SoftmaxCrossEntropy { a: Var, targets: Vec<usize>, probs: Matrix },
    BceWithLogits { a: Var, targets: Matrix },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients indexed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self { by_param: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.iter().all(Option::is_none)
    }

    /// Accumulates `other` into `self`; both must index the same store.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.by_param.len(), other.by_param.len(), "gradient store mismatch");
        for (mine, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.by_param.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param.iter().flatten().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(Matrix::all_finite)
    }
}

/// Recording tape over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    /// A graph in which every parameter is trainable.
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, trainable: vec![true; store.len()], nodes: Vec::new() }
    }

    /// A graph in which only parameters accepted by `trainable` receive gradients.
    pub fn with_trainable(store: &'s ParamStore, trainable: impl Fn(ParamId) -> bool) -> Self {
        let mask = store.ids().map(trainable).collect();
        Self { store, trainable: mask, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.trainable[id.0];
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Matrix::matmul_t(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "add_row expects a 1 x {} row", x.cols());
        let mut out = x.clone();
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(r.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "mul_row expects a 1 x {} row", x.cols());
        let mut out = x.clone();
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(r.data()).for_each(|(o, g)| *o *= g);
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols() as f64;
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm { a, rstd }, rg)
    }

    /// Layer norm followed by a learned per-column gain and bias.
    pub fn layer_norm_affine(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let n = self.layer_norm(a);
        let s = self.mul_row(n, gain);
        self.add_row(s, bias)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let out = self.value(a).gather_rows(indices);
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows { a, indices: indices.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats);
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let out = Matrix::from_vec(rows, cols, x.data().to_vec());
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            out.data_mut().iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
        }
        out.scale_assign(1.0 / n);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Matrix::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanAll(a), rg)
    }

    /// Depthwise 2-D convolution with zero padding, stride 1, odd `kernel`.
    ///
    /// `x` is `(height * width, channels)` in row-major pixel order, `w` is
    /// `(kernel * kernel, channels)` and `b` is `(1, channels)`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "depthwise_conv needs an odd kernel");
        let (xin, wm, bm) = (self.value(x), self.value(w), self.value(b));
        let ch = xin.cols();
        assert_eq!(xin.rows(), height * width, "depthwise_conv input/grid mismatch");
        assert_eq!(wm.shape(), (kernel * kernel, ch), "depthwise_conv weight shape");
        assert_eq!(bm.shape(), (1, ch), "depthwise_conv bias shape");
        let mut out = Matrix::zeros(height * width, ch);
        for p in 0..height * width {
            out.row_mut(p).copy_from_slice(bm.row(0));
        }
        for_each_tap(height, width, kernel, |dst, src, tap| {
            let (wrow, srow) = (wm.row(tap), xin.row(src));
            let orow = &mut out.data_mut()[dst * ch..(dst + 1) * ch];
            for c in 0..ch {
                orow[c] += wrow[c] * srow[c];
            }
        });
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::DepthwiseConv { x, w, b, height, width, kernel }, rg)
    }

    /// Each output row is a weighted sum of input rows: `out[i] = sum_j w_ij * a[src_ij]`.
    pub fn row_mix(&mut self, a: Var, taps: Vec<Vec<(usize, f64)>>) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(taps.len(), x.cols());
        for (i, row_taps) in taps.iter().enumerate() {
            let orow = out.row_mut(i);
            for &(src, wgt) in row_taps {
                orow.iter_mut().zip(x.row(src)).for_each(|(o, v)| *o += wgt * v);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowMix { a, taps }, rg)
    }

    /// Mean over rows of `-log softmax(a)[target]`, as a 1x1 matrix.
    pub fn softmax_cross_entropy(&mut self, a: Var, targets: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), targets.len(), "one target per row");
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < x.cols(), "target class {t} out of range");
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let n = targets.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Matrix::scalar(loss / n), Op::SoftmaxCrossEntropy { a, targets: targets.to_vec(), probs }, rg)
    }

    /// Mean binary cross-entropy of independent logits against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, a: Var, targets: Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), targets.shape(), "bce target shape mismatch");
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let n = x.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Matrix::scalar(loss / n), Op::BceWithLogits { a, targets }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::empty(self.store.len());
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(&self, i: usize, g: Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                if let Value::Param(id) = node.value {
                    match &mut out.by_param[id.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let buf = self.buf(grads, *a);
                    // C = op(A) op(B)
                    match ta {
                        false => gemm_into(buf, 1.0, &g, false, bm, !tb),
                        true => gemm_into(buf, 1.0, bm, *tb, &g, true),
                    }
                }
                if self.requires_grad(*b) {
                    let buf = self.buf(grads, *b);
                    match tb {
                        false => gemm_into(buf, 1.0, am, !ta, &g, false),
                        true => gemm_into(buf, 1.0, &g, true, am, *ta),
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| buf.add_assign(&g));
                self.acc(grads, *b, |buf| buf.add_assign(&g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| buf.add_assign(&g));
                self.acc(grads, *b, |buf| axpy(buf, -1.0, &g));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| zip3(buf, &g, bm, |o, d, y| *o += d * y));
                self.acc(grads, *b, |buf| zip3(buf, &g, am, |o, d, x| *o += d * x));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |buf| buf.add_assign(&g));
                self.acc(grads, *row, |buf| {
                    for r in 0..g.rows() {
                        buf.data_mut().iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (am, rm) = (self.value(*a), self.value(*row));
                self.acc(grads, *a, |buf| {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        buf.row_mut(r).iter_mut().zip(gr.iter().zip(rm.data())).for_each(|(o, (d, s))| *o += d * s);
                    }
                });
                self.acc(grads, *row, |buf| {
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row(r), am.row(r));
                        buf.data_mut().iter_mut().zip(gr.iter().zip(xr)).for_each(|(o, (d, x))| *o += d * x);
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |buf| axpy(buf, *s, &g)),
            Op::Square(a) => {
                let am = self.value(*a);
                self.acc(grads, *a, |buf| zip3(buf, &g, am, |o, d, x| *o += 2.0 * d * x));
            }
            Op::Gelu(a) => {
                let am = self.value(*a);
                self.acc(grads, *a, |buf| {
                    zip3(buf, &g, am, |o, d, x| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *o += d * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    })
                });
            }
            Op::LayerNorm { a, rstd } => {
                let y = self.value(Var(i));
                self.acc(grads, *a, |buf| {
                    let n = y.cols() as f64;
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / n;
                        let s = rstd[r];
                        buf.row_mut(r)
                            .iter_mut()
                            .zip(gr.iter().zip(yr))
                            .for_each(|(o, (d, v))| *o += s * (d - mean_g - v * mean_gy));
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.value(Var(i));
                self.acc(grads, *a, |buf| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        buf.row_mut(r).iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (d, v))| *o += v * (d - dot));
                    }
                });
            }
            Op::SliceCols { a, start } => {
                self.acc(grads, *a, |buf| {
                    for r in 0..g.rows() {
                        let dst = &mut buf.row_mut(r)[*start..*start + g.cols()];
                        dst.iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |buf| {
                        for r in 0..g.rows() {
                            buf.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]).for_each(|(o, d)| *o += d);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { a, indices } => {
                self.acc(grads, *a, |buf| {
                    for (r, &src) in indices.iter().enumerate() {
                        buf.row_mut(src).iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    self.acc(grads, p, |buf| {
                        buf.data_mut()
                            .iter_mut()
                            .zip(&g.data()[off * cols..(off + n) * cols])
                            .for_each(|(o, d)| *o += d);
                    });
                    off += n;
                }
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |buf| buf.data_mut().iter_mut().zip(g.data()).for_each(|(o, d)| *o += d));
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows() as f64;
                self.acc(grads, *a, |buf| {
                    for r in 0..buf.rows() {
                        buf.row_mut(r).iter_mut().zip(g.data()).for_each(|(o, d)| *o += d / n);
                    }
                });
            }
            Op::SumAll(a) => {
                let d = g.item();
                self.acc(grads, *a, |buf| buf.data_mut().iter_mut().for_each(|o| *o += d));
            }
            Op::MeanAll(a) => {
                let d = g.item() / self.value(*a).len() as f64;
                self.acc(grads, *a, |buf| buf.data_mut().iter_mut().for_each(|o| *o += d));
            }
            Op::DepthwiseConv { x, w, b, height, width, kernel } => {
                let (xin, wm) = (self.value(*x), self.value(*w));
                let ch = xin.cols();
                self.acc(grads, *x, |buf| {
                    for_each_tap(*height, *width, *kernel, |dst, src, tap| {
                        let (wrow, grow) = (wm.row(tap), g.row(dst));
                        let brow = &mut buf.data_mut()[src * ch..(src + 1) * ch];
                        for c in 0..ch {
                            brow[c] += wrow[c] * grow[c];
                        }
                    })
                });
                self.acc(grads, *w, |buf| {
                    for_each_tap(*height, *width, *kernel, |dst, src, tap| {
                        let (xrow, grow) = (xin.row(src), g.row(dst));
                        let brow = &mut buf.data_mut()[tap * ch..(tap + 1) * ch];
                        for c in 0..ch {
                            brow[c] += xrow[c] * grow[c];
                        }
                    })
                });
                self.acc(grads, *b, |buf| {
                    for r in 0..g.rows() {
                        buf.data_mut().iter_mut().zip(g.row(r)).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::RowMix { a, taps } => {
                self.acc(grads, *a, |buf| {
                    for (i, row_taps) in taps.iter().enumerate() {
                        let grow = g.row(i);
                        for &(src, wgt) in row_taps {
                            buf.row_mut(src).iter_mut().zip(grow).for_each(|(o, d)| *o += wgt * d);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { a, targets, probs } => {
                let scale = g.item() / targets.len().max(1) as f64;
                self.acc(grads, *a, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let brow = buf.row_mut(r);
                        brow.iter_mut().zip(probs.row(r)).for_each(|(o, p)| *o += scale * p);
                        brow[t] -= scale;
                    }
                });
            }
            Op::BceWithLogits { a, targets } => {
                let am = self.value(*a);
                let scale = g.item() / am.len().max(1) as f64;
                self.acc(grads, *a, |buf| {
                    zip3(buf, am, targets, |o, z, t| *o += scale * (1.0 / (1.0 + (-z).exp()) - t));
                });
            }
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> &'g mut Matrix {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if self.requires_grad(v) {
            f(self.buf(grads, v));
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn axpy(buf: &mut Matrix, alpha: f64, x: &Matrix) {
    buf.data_mut().iter_mut().zip(x.data()).for_each(|(o, v)| *o += alpha * v);
}

fn zip3(buf: &mut Matrix, a: &Matrix, b: &Matrix, f: impl Fn(&mut f64, f64, f64)) {
    for ((o, &x), &y) in buf.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        f(o, x, y);
    }
}

/// Calls `f(dst_pixel, src_pixel, tap)` for every in-bounds kernel tap.
fn for_each_tap(height: usize, width: usize, kernel: usize, mut f: impl FnMut(usize, usize, usize)) {
    let r = (kernel / 2) as isize;
    for y in 0..height as isize {
        for x in 0..width as isize {
            let dst = (y as usize) * width + x as usize;
            for ky in 0..kernel as isize {
                let sy = y + ky - r;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..kernel as isize {
                    let sx = x + kx - r;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    f(dst, (sy as usize) * width + sx as usize, (ky as usize) * kernel + kx as usize);
                }
            }
        }
    }
}

/// Interpolation taps for bilinear resizing of a `(height, width)` grid by an
/// integer factor, half-pixel centers, edge clamping.
pub fn bilinear_taps(height: usize, width: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let axis = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..n * factor)
            .map(|o| {
                let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(height), axis(width));
    let mut taps = Vec::with_capacity(ys.len() * xs.len());
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (idx, w) in [
                (y0 * width + x0, (1.0 - ly) * (1.0 - lx)),
                (y0 * width + x1, (1.0 - ly) * lx),
                (y1 * width + x0, ly * (1.0 - lx)),
                (y1 * width + x1, ly * lx),
            ] {
                if w == 0.0 {
                    continue;
                }
                match t.iter_mut().find(|(j, _)| *j == idx) {
                    Some(e) => e.1 += w,
                    None => t.push((idx, w)),
                }
            }
            taps.push(t);
        }
    }
    taps
}
