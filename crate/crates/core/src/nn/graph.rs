//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the tape
//! in reverse and returns gradients for the parameters that were read
//! through [`Graph::param`]. [`Graph::detach`] is the stop-gradient: its
//! output holds the same values but no gradient reaches the input.
//!
//! Recurrent layers and Gaussian upsampling are single fused ops with
//! hand-written backward passes.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis};

use super::params::{Gradients, Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct GruCache {
    xp: Var,
    h0: Var,
    u: Var,
    bh: Var,
    starts: Vec<bool>,
    hprev: Mat,
    r: Mat,
    z: Mat,
    n: Mat,
    hn: Mat,
}

#[derive(Debug)]
struct UpsampleCache {
    cond: Var,
    sigma: Var,
    weights: Mat,
    offsets: Mat,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    ReverseRows(Var),
    Unfold(Var, usize, Vec<usize>),
    Gru(Box<GruCache>),
    Upsample(Box<UpsampleCache>),
    MeanSquare(Var, Var),
    MeanAbs(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `y += x A` for row-major `a` of shape `[x.len() x y.len()]`.
pub(crate) fn vecmat(x: &[f64], a: &[f64], y: &mut [f64]) {
    const B: usize = 64;
    let n = y.len();
    debug_assert_eq!(a.len(), x.len() * n);
    let mut c = 0;
    while c + B <= n {
        let mut acc = [0.0f64; B];
        acc.copy_from_slice(&y[c..c + B]);
        for (j, &xj) in x.iter().enumerate() {
            let row = &a[j * n + c..j * n + c + B];
            for k in 0..B {
                acc[k] = fma(xj, row[k], acc[k]);
            }
        }
        y[c..c + B].copy_from_slice(&acc);
        c += B;
    }
    for col in c..n {
        let mut acc = y[col];
        for (j, &xj) in x.iter().enumerate() {
            acc = fma(xj, a[j * n + col], acc);
        }
        y[col] = acc;
    }
}

#[cfg(target_feature = "fma")]
#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    a.mul_add(b, c)
}

#[cfg(not(target_feature = "fma"))]
#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    a * b + c
}

/// Gaussian upsampling weights `[T x n]` and the frame-minus-center offsets
/// they were computed from. Rows are a softmax over phonemes of
/// `-(t + 0.5 - c_i)^2 / (2 sigma_i^2)` with `c_i` the midpoint of phoneme
/// `i`'s span.
pub fn upsample_weights(durations: &[usize], sigmas: &[f64]) -> (Mat, Mat) {
    let n = durations.len();
    let total: usize = durations.iter().sum();
    let mut centers = Vec::with_capacity(n);
    let mut cum = 0.0;
    for &d in durations {
        cum += d as f64;
        centers.push(cum - d as f64 / 2.0);
    }
    let mut weights = Mat::zeros((total, n));
    let mut offsets = Mat::zeros((total, n));
    for t in 0..total {
        let pos = t as f64 + 0.5;
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            let off = pos - centers[i];
            offsets[[t, i]] = off;
            let logit = -off * off / (2.0 * sigmas[i] * sigmas[i]);
            weights[[t, i]] = logit;
            max = max.max(logit);
        }
        let mut row = weights.row_mut(t);
        row.mapv_inplace(|l| (l - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    (weights, offsets)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(self.params.get(id)), op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `[1 x c]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1);
        assert_eq!(self.shape(a).1, self.shape(b).1, "add_row width mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat_cols row mismatch");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), ng)
    }

    /// Row `w` of the output is the mean of the rows of `a` whose segment id
    /// is `w`. Ids must cover `0..=max` with every segment non-empty.
    pub fn segment_mean(&mut self, a: Var, ids: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), ids.len(), "segment ids length mismatch");
        let n_seg = ids.iter().max().map_or(0, |m| m + 1);
        let mut value = Mat::zeros((n_seg, x.ncols()));
        let mut counts = vec![0usize; n_seg];
        for (row, &id) in x.rows().into_iter().zip(ids) {
            let mut out = value.row_mut(id);
            out += &row;
            counts[id] += 1;
        }
        for (mut row, &c) in value.rows_mut().into_iter().zip(&counts) {
            assert!(c > 0, "empty segment");
            row /= c as f64;
        }
        let ng = self.ng(a);
        self.push(value, Op::SegmentMean(a, ids.to_vec()), ng)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).slice(s![..;-1, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::ReverseRows(a), ng)
    }

    /// Time-window unfolding for a width-`k` convolution with zero padding.
    /// Windows never cross the segment boundaries listed in `starts`.
    pub fn unfold(&mut self, a: Var, k: usize, starts: &[usize]) -> Var {
        assert!(k % 2 == 1, "kernel width must be odd");
        let x = self.value(a);
        let (t_len, d) = x.dim();
        let seg = segment_ids(t_len, starts);
        let half = k / 2;
        let mut value = Mat::zeros((t_len, k * d));
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src as usize >= t_len || seg[src as usize] != seg[t] {
                    continue;
                }
                value.slice_mut(s![t, j * d..(j + 1) * d]).assign(&x.row(src as usize));
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Unfold(a, k, starts.to_vec()), ng)
    }

    /// Gated recurrent unit over pre-projected inputs `xp` `[T x 3H]`, gate
    /// order `[reset | update | candidate]`. `u` is `[H x 3H]`, `bh` the
    /// `[1 x 3H]` recurrent bias. The state restarts from `h0` at row 0 and at
    /// every index in `starts`. Returns all states `[T x H]`.
    pub fn gru(&mut self, xp: Var, h0: Var, u: Var, bh: Var, starts: &[usize]) -> Var {
        let xpv = self.value(xp);
        let uv = self.value(u);
        let bhv = self.value(bh);
        let h0v = self.value(h0);
        let (t_len, three_h) = xpv.dim();
        let h = three_h / 3;
        assert_eq!(uv.dim(), (h, three_h), "gru recurrent weight shape");
        assert_eq!(h0v.dim(), (1, h), "gru initial state shape");
        let mut is_start = vec![false; t_len];
        if t_len > 0 {
            is_start[0] = true;
        }
        for &s in starts {
            if s < t_len {
                is_start[s] = true;
            }
        }
        let mut out = Mat::zeros((t_len, h));
        let mut hprev = Mat::zeros((t_len, h));
        let mut r = Mat::zeros((t_len, h));
        let mut z = Mat::zeros((t_len, h));
        let mut n = Mat::zeros((t_len, h));
        let mut hn = Mat::zeros((t_len, h));
        let uv = uv.as_standard_layout();
        let u_s = uv.as_slice().expect("contiguous");
        let bh_s = bhv.as_slice().expect("contiguous");
        let h0_s = h0v.as_slice().expect("contiguous");
        let xpv = xpv.as_standard_layout();
        let x_s = xpv.as_slice().expect("contiguous");
        let mut cur = h0_s.to_vec();
        let mut gh = vec![0.0; three_h];
        let (out_s, hp_s) = (out.as_slice_mut().unwrap(), hprev.as_slice_mut().unwrap());
        let (r_s, z_s) = (r.as_slice_mut().unwrap(), z.as_slice_mut().unwrap());
        let (n_s, hn_s) = (n.as_slice_mut().unwrap(), hn.as_slice_mut().unwrap());
        for t in 0..t_len {
            if is_start[t] {
                cur.copy_from_slice(h0_s);
            }
            gh.copy_from_slice(bh_s);
            vecmat(&cur, u_s, &mut gh);
            let row = t * h..(t + 1) * h;
            hp_s[row.clone()].copy_from_slice(&cur);
            let x = &x_s[t * three_h..(t + 1) * three_h];
            let (rr, zr) = (&mut r_s[row.clone()], &mut z_s[row.clone()]);
            let (nr, hnr) = (&mut n_s[row.clone()], &mut hn_s[row.clone()]);
            for i in 0..h {
                let ri = sigmoid(x[i] + gh[i]);
                let zi = sigmoid(x[h + i] + gh[h + i]);
                let hni = gh[2 * h + i];
                let ni = (x[2 * h + i] + ri * hni).tanh();
                rr[i] = ri;
                zr[i] = zi;
                nr[i] = ni;
                hnr[i] = hni;
                cur[i] = (1.0 - zi) * ni + zi * cur[i];
            }
            out_s[row].copy_from_slice(&cur);
        }
        let ng = self.ng(xp) || self.ng(h0) || self.ng(u) || self.ng(bh);
        let cache = GruCache {
            xp,
            h0,
            u,
            bh,
            starts: is_start,
            hprev,
            r,
            z,
            n,
            hn,
        };
        self.push(out, Op::Gru(Box::new(cache)), ng)
    }

    /// Gaussian upsampling of per-phoneme rows `cond` `[n x d]` to
    /// `sum(durations)` frames; `sigma` is `[n x 1]`.
    pub fn gaussian_upsample(&mut self, cond: Var, sigma: Var, durations: &[usize]) -> Var {
        let sig: Vec<f64> = self.value(sigma).iter().copied().collect();
        assert_eq!(sig.len(), durations.len());
        assert_eq!(self.shape(cond).0, durations.len());
        let (weights, offsets) = upsample_weights(durations, &sig);
        let value = weights.dot(self.value(cond));
        let ng = self.ng(cond) || self.ng(sigma);
        self.push(value, Op::Upsample(Box::new(UpsampleCache { cond, sigma, weights, offsets })), ng)
    }

    /// `mean((a - b)^2)` as a `[1 x 1]` node.
    pub fn mean_square(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_square shape mismatch");
        let diff = self.value(a) - self.value(b);
        let value = diff.mapv(|x| x * x).mean().unwrap_or(0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Mat::from_elem((1, 1), value), Op::MeanSquare(a, b), ng)
    }

    /// `mean(|a - b|)` as a `[1 x 1]` node.
    pub fn mean_abs(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_abs shape mismatch");
        let diff = self.value(a) - self.value(b);
        let value = diff.mapv(f64::abs).mean().unwrap_or(0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Mat::from_elem((1, 1), value), Op::MeanAbs(a, b), ng)
    }

    /// Gradients of the `[1 x 1]` node `root` with respect to every parameter
    /// read into this graph.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with(root, Mat::from_elem((1, 1), 1.0))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` shaped like `root`.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        let mut out = Gradients::with_len(self.params.len());
        self.backward_seeded(root, seed, &mut out, 1.0);
        out
    }

    /// Adds `scale` times the gradient of the scalar `root` into `out`.
    pub fn backward_into(&self, root: Var, out: &mut Gradients, scale: f64) {
        self.backward_seeded(root, Mat::from_elem((1, 1), 1.0), out, scale);
    }

    fn backward_seeded(&self, root: Var, seed: Mat, out: &mut Gradients, scale: f64) {
        assert_eq!(seed.dim(), self.shape(root));
        out.ensure_len(self.params.len());
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads, out, scale);
        }
    }

    fn send(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Mat, g: Mat, grads: &mut [Option<Mat>], out: &mut Gradients, scale: f64) {
        match op {
            Op::Const => {}
            Op::Param(id) => out.accumulate_scaled(*id, g, scale),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.send(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.send(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.send(grads, *b, -&g);
                }
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.send(grads, *a, &g * self.value(*b));
                }
                if self.ng(*b) {
                    self.send(grads, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*b) {
                    self.send(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.send(grads, *a, g);
            }
            Op::Scale(a, s) => self.send(grads, *a, g * *s),
            Op::Tanh(a) => {
                let d = ndarray::Zip::from(&g).and(value).map_collect(|&g, &y| g * (1.0 - y * y));
                self.send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = ndarray::Zip::from(&g).and(value).map_collect(|&g, &y| g * y * (1.0 - y));
                self.send(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = ndarray::Zip::from(&g).and(value).map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 });
                self.send(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = ndarray::Zip::from(&g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * sigmoid(x));
                self.send(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Mat::zeros(value.raw_dim());
                for ((gr, yr), mut dr) in g.rows().into_iter().zip(value.rows()).zip(d.rows_mut()) {
                    let inner = gr.dot(&yr);
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.send(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        self.send(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        self.send(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.send(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.send(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (row, &i) in g.rows().into_iter().zip(idx) {
                    let mut dst = d.row_mut(i);
                    dst += &row;
                }
                self.send(grads, *a, d);
            }
            Op::SegmentMean(a, ids) => {
                let mut counts = vec![0usize; g.nrows()];
                for &id in ids {
                    counts[id] += 1;
                }
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (mut row, &id) in d.rows_mut().into_iter().zip(ids) {
                    row.assign(&g.row(id));
                    row /= counts[id] as f64;
                }
                self.send(grads, *a, d);
            }
            Op::ReverseRows(a) => self.send(grads, *a, g.slice(s![..;-1, ..]).to_owned()),
            Op::Unfold(a, k, starts) => {
                let (t_len, d) = self.shape(*a);
                let seg = segment_ids(t_len, starts);
                let half = k / 2;
                let mut dx = Mat::zeros((t_len, d));
                for t in 0..t_len {
                    for j in 0..*k {
                        let src = t as isize + j as isize - half as isize;
                        if src < 0 || src as usize >= t_len || seg[src as usize] != seg[t] {
                            continue;
                        }
                        let mut dst = dx.row_mut(src as usize);
                        dst += &g.slice(s![t, j * d..(j + 1) * d]);
                    }
                }
                self.send(grads, *a, dx);
            }
            Op::Gru(c) => self.gru_backward(c, &g, grads),
            Op::Upsample(c) => {
                if self.ng(c.cond) {
                    self.send(grads, c.cond, c.weights.t().dot(&g));
                }
                if self.ng(c.sigma) {
                    let dw = g.dot(&self.value(c.cond).t());
                    let sig = self.value(c.sigma);
                    let n = sig.nrows();
                    let mut ds = Mat::zeros((n, 1));
                    for t in 0..dw.nrows() {
                        let inner = dw.row(t).dot(&c.weights.row(t));
                        for i in 0..n {
                            let w = c.weights[[t, i]];
                            if w == 0.0 {
                                continue;
                            }
                            let s = sig[[i, 0]];
                            let off = c.offsets[[t, i]];
                            ds[[i, 0]] += w * (dw[[t, i]] - inner) * off * off / (s * s * s);
                        }
                    }
                    self.send(grads, c.sigma, ds);
                }
            }
            Op::MeanSquare(a, b) => {
                let gs = g[[0, 0]];
                let n = self.value(*a).len().max(1) as f64;
                let d = (self.value(*a) - self.value(*b)) * (2.0 * gs / n);
                if self.ng(*b) {
                    self.send(grads, *b, -&d);
                }
                self.send(grads, *a, d);
            }
            Op::MeanAbs(a, b) => {
                let gs = g[[0, 0]];
                let n = self.value(*a).len().max(1) as f64;
                let d = ndarray::Zip::from(self.value(*a))
                    .and(self.value(*b))
                    .map_collect(|&x, &y| {
                        let diff = x - y;
                        if diff > 0.0 {
                            gs / n
                        } else if diff < 0.0 {
                            -gs / n
                        } else {
                            0.0
                        }
                    });
                if self.ng(*b) {
                    self.send(grads, *b, -&d);
                }
                self.send(grads, *a, d);
            }
        }
    }

    fn gru_backward(&self, c: &GruCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let (t_len, h) = g.dim();
        let three_h = 3 * h;
        let ut = self.value(c.u).t().as_standard_layout().into_owned();
        let ut_s = ut.as_slice().expect("contiguous");
        let mut dxp = Mat::zeros((t_len, three_h));
        let mut dgh = Mat::zeros((t_len, three_h));
        let mut dh0 = vec![0.0; h];
        let mut carry = vec![0.0; h];
        let mut dh = vec![0.0; h];
        let g = g.as_standard_layout();
        let g_s = g.as_slice().expect("contiguous");
        let (r_s, z_s) = (c.r.as_slice().unwrap(), c.z.as_slice().unwrap());
        let (n_s, hn_s, hp_s) = (c.n.as_slice().unwrap(), c.hn.as_slice().unwrap(), c.hprev.as_slice().unwrap());
        let dx_s = dxp.as_slice_mut().unwrap();
        let dg_s = dgh.as_slice_mut().unwrap();
        for t in (0..t_len).rev() {
            let row = t * h..(t + 1) * h;
            let (r, z, n, hn, hp) = (&r_s[row.clone()], &z_s[row.clone()], &n_s[row.clone()], &hn_s[row.clone()], &hp_s[row.clone()]);
            for ((d, gi), ci) in dh.iter_mut().zip(&g_s[row]).zip(&carry) {
                *d = gi + ci;
            }
            let dx = &mut dx_s[t * three_h..(t + 1) * three_h];
            let dgs = &mut dg_s[t * three_h..(t + 1) * three_h];
            for i in 0..h {
                let dn_pre = dh[i] * (1.0 - z[i]) * (1.0 - n[i] * n[i]);
                let dz_pre = dh[i] * (hp[i] - n[i]) * z[i] * (1.0 - z[i]);
                let dr_pre = dn_pre * hn[i] * r[i] * (1.0 - r[i]);
                dx[i] = dr_pre;
                dx[h + i] = dz_pre;
                dx[2 * h + i] = dn_pre;
                dgs[i] = dr_pre;
                dgs[h + i] = dz_pre;
                dgs[2 * h + i] = dn_pre * r[i];
            }
            for i in 0..h {
                carry[i] = dh[i] * z[i];
            }
            vecmat(dgs, ut_s, &mut carry);
            if c.starts[t] {
                for i in 0..h {
                    dh0[i] += carry[i];
                    carry[i] = 0.0;
                }
            }
        }
        if self.ng(c.u) {
            self.send(grads, c.u, c.hprev.t().dot(&dgh));
        }
        if self.ng(c.bh) {
            self.send(grads, c.bh, dgh.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if self.ng(c.h0) {
            self.send(grads, c.h0, Array2::from_shape_vec((1, h), dh0).unwrap());
        }
        if self.ng(c.xp) {
            self.send(grads, c.xp, dxp);
        }
    }
}

fn segment_ids(t_len: usize, starts: &[usize]) -> Vec<usize> {
    let mut seg = vec![0usize; t_len];
    let mut is_start = vec![false; t_len];
    for &s in starts {
        if s < t_len {
            is_start[s] = true;
        }
    }
    let mut cur = 0;
    for t in 0..t_len {
        if t > 0 && is_start[t] {
            cur += 1;
        }
        seg[t] = cur;
    }
    seg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    /// Compares analytic parameter gradients of `f` with central differences.
    fn check_grads(store: &ParamStore, f: impl Fn(&mut Graph) -> Var, tol: f64) {
        let g = {
            let mut graph = Graph::new(store);
            let out = f(&mut graph);
            graph.backward(out)
        };
        let eps = 1e-6;
        for id in store.ids() {
            let analytic = g.get(id).cloned().unwrap_or_else(|| Mat::zeros(store.get(id).raw_dim()));
            for idx in 0..store.get(id).len() {
                let mut plus = store.clone();
                let mut minus = store.clone();
                plus.get_mut(id).as_slice_mut().unwrap()[idx] += eps;
                minus.get_mut(id).as_slice_mut().unwrap()[idx] -= eps;
                let fp = {
                    let mut gr = Graph::new(&plus);
                    let o = f(&mut gr);
                    gr.scalar(o)
                };
                let fm = {
                    let mut gr = Graph::new(&minus);
                    let o = f(&mut gr);
                    gr.scalar(o)
                };
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < tol, "{} [{idx}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }

    /// Contracts a node to a scalar against a fixed random target.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.shape(v);
        let target = g.constant(rand_mat(&mut rng, r, c));
        g.mean_square(v, target)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_mat(&mut rng, 3, 4));
        let b = store.add("b", rand_mat(&mut rng, 4, 5));
        let c = store.add("c", rand_mat(&mut rng, 1, 5));
        let d = store.add("d", rand_mat(&mut rng, 2, 5));
        check_grads(
            &store,
            |g| {
                let (a, b, c, d) = (g.param(a), g.param(b), g.param(c), g.param(d));
                let ab = g.matmul(a, b);
                let x = g.add_row(ab, c);
                let t = g.tanh(x);
                let s = g.sigmoid(t);
                let sp = g.softplus(x);
                let m = g.mul(s, sp);
                let sm = g.softmax_rows(m);
                let nt = g.matmul_nt(sm, d);
                let r = g.relu(nt);
                let cat = g.concat_cols(&[r, nt]);
                let rev = g.reverse_rows(cat);
                let sl = g.slice_cols(rev, 1, 3);
                let sr = g.slice_rows(sl, 0, 2);
                let sc = g.scale(sr, 0.7);
                let ab2 = g.slice_rows(nt, 1, 3);
                let diff = g.sub(sc, ab2);
                project(g, diff, 9)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_segment_unfold_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_mat(&mut rng, 6, 3));
        check_grads(
            &store,
            |g| {
                let a = g.param(a);
                let m = g.segment_mean(a, &[0, 0, 1, 2, 2, 2]);
                let rep = g.gather_rows(m, &[0, 0, 1, 2, 2, 2]);
                let u = g.unfold(a, 3, &[0, 2, 3]);
                let cat = g.concat_cols(&[rep, u]);
                let both = g.concat_rows(&[cat, cat]);
                let pad = rep_pad(g, 12, 12);
                let ab = g.mean_abs(both, pad);
                let sq = project(g, both, 4);
                g.add(ab, sq)
            },
            1e-5,
        );
    }

    fn rep_pad(g: &mut Graph, r: usize, c: usize) -> Var {
        g.constant(Mat::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2))
    }

    #[test]
    fn gru_gradients_with_restarts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let h = 4;
        let xp = store.add("xp", rand_mat(&mut rng, 7, 3 * h));
        let h0 = store.add("h0", rand_mat(&mut rng, 1, h));
        let u = store.add("u", rand_mat(&mut rng, h, 3 * h));
        let bh = store.add("bh", rand_mat(&mut rng, 1, 3 * h));
        check_grads(
            &store,
            |g| {
                let (xp, h0, u, bh) = (g.param(xp), g.param(h0), g.param(u), g.param(bh));
                let out = g.gru(xp, h0, u, bh, &[3, 5]);
                project(g, out, 5)
            },
            1e-5,
        );
    }

    #[test]
    fn gru_restart_isolates_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let u = store.add("u", rand_mat(&mut rng, 3, 9));
        let bh = store.add("bh", rand_mat(&mut rng, 1, 9));
        let x = rand_mat(&mut rng, 6, 9);
        let mut x2 = x.clone();
        x2.row_mut(1).fill(5.0);
        let run = |x: Mat| {
            let mut g = Graph::new(&store);
            let xp = g.constant(x);
            let h0 = g.zeros(1, 3);
            let (u, bh) = (g.param(u), g.param(bh));
            let o = g.gru(xp, h0, u, bh, &[3]);
            g.value(o).clone()
        };
        let a = run(x);
        let b = run(x2);
        assert_ne!(a.row(1), b.row(1));
        assert_eq!(a.slice(s![3.., ..]), b.slice(s![3.., ..]));
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cond = store.add("cond", rand_mat(&mut rng, 4, 3));
        let sig = store.add("sig", Mat::from_shape_vec((4, 1), vec![0.8, 1.5, 2.0, 1.1]).unwrap());
        check_grads(
            &store,
            |g| {
                let (c, s) = (g.param(cond), g.param(sig));
                let up = g.gaussian_upsample(c, s, &[2, 0, 3, 1]);
                project(g, up, 7)
            },
            1e-5,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::from_elem((2, 2), 0.5));
        let b = store.add("b", Mat::from_elem((2, 2), 0.25));
        let mut g = Graph::new(&store);
        let (av, bv) = (g.param(a), g.param(b));
        let ad = g.detach(av);
        let m = g.mul(ad, bv);
        let z = g.zeros(2, 2);
        let l = g.mean_square(m, z);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn upsample_weight_rows_sum_to_one() {
        let (w, _) = upsample_weights(&[2, 2], &[1.0, 1.0]);
        assert_eq!(w.nrows(), 4);
        let e0 = (-(0.5f64 - 1.0).powi(2) / 2.0).exp();
        let e1 = (-(0.5f64 - 3.0).powi(2) / 2.0).exp();
        assert!((w[[0, 0]] - e0 / (e0 + e1)).abs() < 1e-12);
        assert!((w[[0, 0]] - 0.9526).abs() < 1e-4);
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

